"""Training loop, density control, checkpoints and evaluation."""
from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import network
from .gaussians import GaussianCloud, logit, project, project_backward
from .metrics import l1_ssim_loss, ssim
from .renderer import RenderConfig, bin_splats, render, render_backward
from .scene import RxPose

MAGIC = b"WBGS"
CHECKPOINT_VERSION = 1
CLOUD_KEYS = ("means", "log_scales", "quats", "delta_latent")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    iterations: int = 2000
    lr_position: float = 2e-4  # multiplied by the scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_delta: float = 5e-2
    lr_net: float = 1e-3
    densify_interval: int = 100
    densify_from: int = 0
    densify_until: int = -1  # -1: half of ``iterations``
    densify_grad_threshold: float = 2e-4
    scale_split_fraction: float = 0.05
    prune_threshold: float = 0.005
    reset_interval: int = 3000
    seed: int = 0
    render_mode: str = "alpha"
    loss_log_window: int = 7500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        for name in ("densify_grad_threshold", "scale_split_fraction", "prune_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.loss_log_window < 1:
            raise ValueError("loss_log_window must be >= 1")
        RenderConfig(mode=self.render_mode)

    @property
    def densify_stop(self) -> int:
        return self.iterations // 2 if self.densify_until < 0 else self.densify_until


@dataclass
class FieldModel:
    """Everything needed to render a PAS for any (TX, frequency)."""

    cloud: GaussianCloud
    net: network.EmNetParams
    rx: RxPose
    W: int = 360
    H: int = 90
    render_config: RenderConfig = RenderConfig()

    def attributes(self, tx, freq, ids=None):
        """Per-Gaussian ``(delta, sig)`` with ``delta = clamp(delta_o + delta_f, 0, 1)``."""
        ids = np.arange(len(self.cloud)) if ids is None else ids
        _, delta_f, sig = network.forward(self.net, self.cloud.means[ids], tx, freq)
        return np.clip(self.cloud.delta_o[ids] + delta_f, 0.0, 1.0), sig

    def render(self, tx, freq) -> np.ndarray:
        proj = project(self.cloud, self.rx, self.W, self.H)
        delta, sig = self.attributes(tx, freq, proj.ids)
        return render(proj, delta, sig, self.W, self.H, self.render_config)


@dataclass
class TrainState:
    model: FieldModel
    config: TrainConfig
    scene_extent: float
    iteration: int = 0
    adam_t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    grad3_accum: np.ndarray = None

    def __post_init__(self):
        n = len(self.model.cloud)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
            self.grad_count = np.zeros(n)
            self.grad3_accum = np.zeros((n, 3))
        for name, arr in self._params().items():
            self.m.setdefault(name, np.zeros_like(arr))
            self.v.setdefault(name, np.zeros_like(arr))

    def _params(self) -> dict:
        out = {f"cloud.{k}": v for k, v in self.model.cloud.arrays().items()}
        out.update({f"net.{k}": v for k, v in self.model.net.arrays.items()})
        return out

    def lr(self, name: str) -> float:
        c = self.config
        return {
            "cloud.means": c.lr_position * self.scene_extent,
            "cloud.log_scales": c.lr_scale,
            "cloud.quats": c.lr_rotation,
            "cloud.delta_latent": c.lr_delta,
        }.get(name, c.lr_net)


@dataclass
class StepResult:
    loss: float
    image: np.ndarray


def _adam(state: TrainState, grads: dict) -> None:
    c = state.config
    state.adam_t += 1
    t = state.adam_t
    b1c = 1.0 - c.beta1 ** t
    b2c = 1.0 - c.beta2 ** t
    for name, p in state._params().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        lr = state.lr(name)
        if lr != 0.0:
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.adam_eps)


def forward_backward(model: FieldModel, tx, freq, gt, lam: float):
    """Full composite loss and gradients for every cloud and network parameter.

    Returns ``(loss, image, grads, d_pixel_mean_visible, visible_ids)``.
    """
    cloud = model.cloud
    W, H = model.W, model.H
    proj = project(cloud, model.rx, W, H)
    vis = proj.ids
    _, delta_f, sig, cache = network.forward(model.net, cloud.means[vis], tx, freq, return_cache=True)
    d_o = cloud.delta_o[vis]
    pre = d_o + delta_f
    delta = np.clip(pre, 0.0, 1.0)
    cfg = model.render_config
    bins = bin_splats(proj, W, H, cfg)
    image = render(proj, delta, sig, W, H, cfg, bins=bins)
    loss, d_img = l1_ssim_loss(image, gt, lam)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss at tx={tuple(np.round(tx, 4))}, freq={freq:g}")
    d_delta, d_sig, d_pm, d_cov = render_backward(proj, delta, sig, W, H, cfg, d_img, bins=bins)
    d_pre = d_delta * ((pre > 0.0) & (pre < 1.0))
    n = len(cloud)
    g_net, (d_pg, _, _) = network.backward(model.net, cache, 0.0, d_pre, d_sig)
    d_means, d_ls, d_q = project_backward(proj, n, d_pm, d_cov)
    d_means[vis] += d_pg
    d_latent = np.zeros(n)
    d_latent[vis] = d_pre * d_o * (1.0 - d_o)
    grads = {"cloud.means": d_means, "cloud.log_scales": d_ls, "cloud.quats": d_q,
             "cloud.delta_latent": d_latent}
    grads.update({f"net.{k}": v for k, v in g_net.items()})
    return loss, image, grads, d_pm, vis


def train_step(state: TrainState, tx, freq, gt) -> StepResult:
    """One optimiser update on a single (tx, freq, gt) sample."""
    model = state.model
    loss, image, grads, d_pm, vis = forward_backward(model, tx, freq, gt, state.config.lam)
    _adam(state, grads)
    model.cloud.normalize_quats()
    # positional gradient in normalised pixel units ([-1, 1] across the image)
    scale = np.array([model.W / 2.0, model.H / 2.0])
    state.grad_accum[vis] += np.linalg.norm(d_pm * scale, axis=1)
    state.grad_count[vis] += 1.0
    state.grad3_accum += grads["cloud.means"]
    state.iteration += 1
    return StepResult(loss, image)


def _stat(cloud: GaussianCloud, mode: str) -> np.ndarray:
    """Pruning statistic: opacity ``1 - delta_o`` in alpha mode, ``delta_o`` otherwise."""
    d = cloud.delta_o
    return 1.0 - d if mode == "alpha" else d


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(cloud: GaussianCloud, grad_accum, grad_count, grad3_accum, config: TrainConfig,
                      scene_extent: float, rng=None, mode: str | None = None):
    """Clone small / split large high-gradient Gaussians, prune faint ones.

    Returns ``(new_cloud, report, source)``; ``source[k]`` is the index of the
    parent of new Gaussian ``k`` or -1 for freshly sampled children.
    """
    mode = mode or config.render_mode
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = len(cloud)
    mean_grad = grad_accum / np.maximum(grad_count, 1.0)
    big = cloud.scales.max(axis=1) > config.scale_split_fraction * scene_extent
    hot = mean_grad > config.densify_grad_threshold
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    parts = [cloud.take(np.flatnonzero(keep))]
    source = [np.flatnonzero(keep)]

    if len(clone_idx):
        clones = cloud.take(clone_idx)
        g3 = grad3_accum[clone_idx]
        norm = np.linalg.norm(g3, axis=1, keepdims=True)
        step = config.lr_position * scene_extent
        clones.means -= step * np.divide(g3, norm, out=np.zeros_like(g3), where=norm > 0)
        parts.append(clones)
        source.append(clone_idx)
    if len(split_idx):
        par = cloud.take(split_idx)
        from .gaussians import quat_to_rotmat

        R = quat_to_rotmat(par.quats / np.linalg.norm(par.quats, axis=1, keepdims=True))
        for _ in range(2):
            child = par.copy()
            z = rng.standard_normal((len(par), 3)) * par.scales
            child.means = par.means + np.einsum("nij,nj->ni", R, z)
            child.log_scales = par.log_scales - np.log(1.6)
            parts.append(child)
            source.append(np.full(len(par), -1))
    new = GaussianCloud.concat(parts)
    src = np.concatenate(source)
    alive = _stat(new, mode) >= config.prune_threshold
    report = DensifyReport(len(clone_idx), len(split_idx), int(np.count_nonzero(~alive)))
    return new.take(np.flatnonzero(alive)), report, src[alive]


def reset_attenuation(cloud: GaussianCloud, mode: str = "alpha", level: float = 0.01) -> GaussianCloud:
    """Cap the pruning statistic at ``level`` (in place; returns the cloud)."""
    if mode == "alpha":
        cloud.delta_latent = np.maximum(cloud.delta_latent, logit(1.0 - level))
    else:
        cloud.delta_latent = np.minimum(cloud.delta_latent, logit(level))
    return cloud


def _remap_state(state: TrainState, source: np.ndarray) -> None:
    for key in CLOUD_KEYS:
        name = f"cloud.{key}"
        for store in (state.m, state.v):
            old = store[name]
            new = np.zeros((len(source),) + old.shape[1:])
            ok = source >= 0
            new[ok] = old[source[ok]]
            store[name] = new
    n = len(source)
    state.grad_accum = np.zeros(n)
    state.grad_count = np.zeros(n)
    state.grad3_accum = np.zeros((n, 3))


def maintain(state: TrainState) -> DensifyReport | None:
    """Periodic density control and attenuation reset after a step."""
    c = state.config
    it = state.iteration
    mode = state.model.render_config.mode
    report = None
    if c.densify_interval > 0 and it % c.densify_interval == 0 and c.densify_from < it <= c.densify_stop:
        rng = np.random.default_rng([c.seed, it])
        cloud, report, source = densify_and_prune(
            state.model.cloud, state.grad_accum, state.grad_count, state.grad3_accum,
            c, state.scene_extent, rng, mode)
        state.model.cloud = cloud
        _remap_state(state, source)
    if c.reset_interval > 0 and it % c.reset_interval == 0 and it < c.iterations:
        reset_attenuation(state.model.cloud, mode)
        state.m["cloud.delta_latent"][:] = 0.0
        state.v["cloud.delta_latent"][:] = 0.0
    return report


def sample_order(n: int, iteration: int, seed: int) -> int:
    """Index of the sample used at ``iteration``: one shuffled pass per ``n`` steps."""
    epoch, pos = divmod(iteration, n)
    return int(np.random.default_rng([seed, epoch]).permutation(n)[pos])


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class History:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    count: list = field(default_factory=list)
    timestamp: list = field(default_factory=list)

    def append(self, it, loss, count):
        self.iteration.append(it)
        self.loss.append(loss)
        self.count.append(count)
        self.timestamp.append(time.time())

    def windowed(self, window: int) -> np.ndarray:
        return moving_average(self.loss, window)

    def write_csv(self, path, window: int) -> None:
        ma = self.windowed(window)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "loss_moving_avg", "gaussian_count", "timestamp"])
            for row in zip(self.iteration, self.loss, ma, self.count, self.timestamp):
                w.writerow([row[0], repr(row[1]), repr(float(row[2])), row[3], f"{row[4]:.3f}"])


def fit_loop(state: TrainState, X, y, iterations: int, history: History | None = None,
             callback=None) -> History:
    """Run ``iterations`` steps over samples ``(X[i, :3], X[i, 3]) -> y[i]``."""
    history = history or History()
    n = len(X)
    if n == 0:
        raise ValueError("no training samples")
    for _ in range(iterations):
        i = sample_order(n, state.iteration, state.config.seed)
        res = train_step(state, X[i, :3], X[i, 3], y[i])
        maintain(state)
        history.append(state.iteration, res.loss, len(state.model.cloud))
        if callback is not None:
            callback(state, res)
    return history


# --------------------------------------------------------------------------- checkpoints

def _model_meta(model: FieldModel) -> dict:
    return {
        "W": model.W,
        "H": model.H,
        "rx": {"position": list(model.rx.position), "frame": [list(r) for r in model.rx.frame]},
        "encoding": asdict(model.net.config),
        "render": asdict(model.render_config),
    }


def save_checkpoint(state: TrainState, path) -> None:
    arrays = {f"cloud.{k}": v for k, v in state.model.cloud.arrays().items()}
    arrays.update({f"net.{k}": v for k, v in state.model.net.arrays.items()})
    arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    arrays["accum.grad"] = state.grad_accum
    arrays["accum.count"] = state.grad_count
    arrays["accum.grad3"] = state.grad3_accum
    header = {
        "train_config": asdict(state.config),
        "model": _model_meta(state.model),
        "scene_extent": state.scene_extent,
        "iteration": state.iteration,
        "adam_t": state.adam_t,
        "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen])
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    meta = header["model"]
    enc = meta["encoding"]
    enc = network.EncodingConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()})
    net = network.EmNetParams(enc, {k[4:]: v for k, v in arrays.items() if k.startswith("net.")})
    cloud = GaussianCloud(**{k: arrays[f"cloud.{k}"] for k in CLOUD_KEYS})
    rx = RxPose(tuple(meta["rx"]["position"]), tuple(tuple(r) for r in meta["rx"]["frame"]))
    model = FieldModel(cloud, net, rx, meta["W"], meta["H"], RenderConfig(**meta["render"]))
    cfg = TrainConfig(**header["train_config"])
    return TrainState(
        model=model, config=cfg, scene_extent=header["scene_extent"],
        iteration=header["iteration"], adam_t=header["adam_t"],
        m={k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
        v={k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")},
        grad_accum=arrays["accum.grad"], grad_count=arrays["accum.count"],
        grad3_accum=arrays["accum.grad3"],
    )


# --------------------------------------------------------------------------- evaluation

def lower_median(values) -> float:
    v = sorted(values)
    if not v:
        return float("nan")
    return float(v[(len(v) - 1) // 2])


@dataclass
class EvalReport:
    rows: list  # (freq_hz, n, median_ssim, mean_ssim)
    overall: tuple  # (n, median, mean)
    per_sample: list

    @property
    def mean_ssim(self) -> float:
        return self.overall[2]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["freq_hz", "n", "median_ssim", "mean_ssim"])
        for f, n, med, mean in self.rows:
            w.writerow([repr(f), n, repr(med), repr(mean)])
        n, med, mean = self.overall
        w.writerow(["all", n, repr(med), repr(mean)])
        return out.getvalue()


def evaluate_images(freqs, preds, gts) -> EvalReport:
    scores = [ssim(p, g) for p, g in zip(preds, gts)]
    by_f: dict = {}
    for f, s in zip(freqs, scores):
        by_f.setdefault(float(f), []).append(s)
    rows = [(f, len(v), lower_median(v), float(np.mean(v))) for f, v in sorted(by_f.items())]
    overall = (len(scores), lower_median(scores), float(np.mean(scores)) if scores else float("nan"))
    return EvalReport(rows, overall, list(zip([float(f) for f in freqs], scores)))


def evaluate(model: FieldModel, manifest, ids) -> EvalReport:
    """Per-frequency median/mean SSIM of ``model`` on manifest samples ``ids``."""
    ids = list(ids)
    if not ids:
        raise ValueError("evaluation split is empty")
    missing = [i for i in ids if not manifest.path_of(i).is_file()]
    if missing:
        raise FileNotFoundError(f"missing samples: {missing}")
    X, y = manifest.arrays(ids)
    preds = [model.render(x[:3], x[3]) for x in X]
    return evaluate_images(X[:, 3], preds, y)


def config_replace(cfg: TrainConfig, **overrides) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return replace(cfg, **{k: v for k, v in overrides.items() if k in names and v is not None})
