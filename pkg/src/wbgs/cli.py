"""``wbgs`` command line: simulate, train, render, eval.

Exit codes: 0 ok, 2 usage or validation error, 3 I/O error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import renderer
from .dataset import (TABLE4_FREQS, DatasetError, SplitSpec, load_manifest,
                      split, write_sample)
from .estimator import WidebandGaussianField
from .oracle import generate_dataset
from .scene import SamplingError, SceneFormatError, SceneValidationError, load_scene, sample_tx_positions
from .training import CheckpointError, evaluate, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
WORKERS_ENV = "WBGS_WORKERS"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _freq_list(text: str) -> tuple:
    if text.strip().lower() == "table4":
        return TABLE4_FREQS
    try:
        out = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad frequency list {text!r}") from None
    if not out or any(f <= 0 for f in out):
        raise argparse.ArgumentTypeError("frequencies must be positive")
    return out


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split-seed", type=_nonneg_int, default=0)
    p.add_argument("--tx-train-fraction", type=float, default=0.8)
    p.add_argument("--train-freqs", type=_freq_list, default=())
    p.add_argument("--test-freqs", type=_freq_list, default=())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wbgs", description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=_positive_int, default=None,
                    help=f"worker threads/processes (default ${WORKERS_ENV} or all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate an oracle PAS dataset")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-tx", type=_positive_int, default=64)
    s.add_argument("--freqs", type=_freq_list, default=TABLE4_FREQS)
    s.add_argument("--width", type=_positive_int, default=360)
    s.add_argument("--height", type=_positive_int, default=90)
    s.add_argument("--kernel-sigma", type=float, default=8.0)
    s.add_argument("--max-bounces", type=_nonneg_int, default=2)
    s.add_argument("--dynamic-range-db", type=float, default=60.0,
                   help="width of the dB normalisation window below the dataset peak")
    s.add_argument("--seed", type=_nonneg_int, default=0)

    t = sub.add_parser("train", help="fit a model on the training split")
    _split_args(t)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--metrics", type=Path, default=None, help="metrics CSV (default <out>.metrics.csv)")
    t.add_argument("--iters", type=_nonneg_int, default=2000)
    t.add_argument("--seed", type=_nonneg_int, default=0)
    t.add_argument("--render-mode", choices=renderer.MODES, default="alpha")
    t.add_argument("--n-surface", type=_nonneg_int, default=2000)
    t.add_argument("--n-volume", type=_nonneg_int, default=500)
    t.add_argument("--loss-window", type=_positive_int, default=7500)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override an estimator parameter, e.g. --set lr_net=5e-4")

    r = sub.add_parser("render", help="render one PAS from a checkpoint")
    r.add_argument("--checkpoint", required=True, type=Path)
    r.add_argument("--tx", required=True, type=float, nargs=3, metavar=("X", "Y", "Z"))
    r.add_argument("--freq", required=True, type=float)
    r.add_argument("--out", required=True, type=Path, help="raw float32 sample path; a .pgm preview is written alongside")

    e = sub.add_parser("eval", help="SSIM report on the test split")
    _split_args(e)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path, help="CSV report path")
    return ap


def write_pgm(values, path) -> None:
    """Binary P5 preview: normalised values times 255, rounded half-up."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    b = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    H, W = b.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + b.tobytes())


def _load_manifest(path: Path):
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    return load_manifest(path)


def _split_spec(args) -> SplitSpec:
    return SplitSpec(args.tx_train_fraction, args.split_seed, tuple(args.train_freqs), tuple(args.test_freqs))


def _parse_overrides(items) -> dict:
    out = {}
    valid = WidebandGaussianField().get_params()
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in valid or key == "scene":
            raise CliError(f"bad --set {item!r}; known keys: {', '.join(sorted(k for k in valid if k != 'scene'))}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def cmd_simulate(args) -> int:
    if not args.scene.is_file():
        raise CliError(f"scene file not found: {args.scene}")
    scene = load_scene(args.scene)
    if not args.kernel_sigma > 0:
        raise CliError("--kernel-sigma must be > 0")
    if args.max_bounces > 3:
        raise CliError("--max-bounces must be <= 3")
    if not args.dynamic_range_db > 0:
        raise CliError("--dynamic-range-db must be > 0")
    txs = sample_tx_positions(scene, args.n_tx, args.seed)
    manifest = generate_dataset(scene, txs, args.freqs, args.out, args.width, args.height,
                                args.kernel_sigma, args.max_bounces, workers=args.workers,
                                dynamic_range_db=args.dynamic_range_db)
    print(f"{args.out / 'manifest.json'}  samples={len(manifest.samples)}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    train_ids, _ = split(manifest, _split_spec(args))
    if not train_ids:
        raise CliError("training split is empty")
    scene = load_scene(manifest.root / manifest.scene_file)
    params = dict(scene=scene, W=manifest.W, H=manifest.H, iterations=args.iters, seed=args.seed,
                  render_mode=args.render_mode, n_surface=args.n_surface, n_volume=args.n_volume,
                  loss_log_window=args.loss_window)
    params.update(_parse_overrides(args.set))
    est = WidebandGaussianField(**params)
    X, y = manifest.arrays(train_ids)
    est.fit(X, y)
    est.save(args.out)
    metrics = args.metrics or args.out.with_name(args.out.name + ".metrics.csv")
    est.history_.write_csv(metrics, est.loss_log_window)
    final = est.history_.loss[-1] if est.history_.loss else float("nan")
    print(f"checkpoint={args.out} metrics={metrics} iterations={args.iters} "
          f"gaussians={len(est.state_.model.cloud)} final_loss={final:.6g}")
    return EXIT_OK


def cmd_render(args) -> int:
    if not args.checkpoint.is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    if not args.freq > 0 or not np.all(np.isfinite(args.tx)):
        raise CliError("--freq must be > 0 and --tx finite")
    state = load_checkpoint(args.checkpoint)
    img = state.model.render(np.array(args.tx), args.freq)
    write_sample(img, args.out)
    pgm = args.out.with_suffix(".pgm")
    write_pgm(img, pgm)
    print(f"{args.out} {pgm}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    _, test_ids = split(manifest, _split_spec(args))
    if not test_ids:
        raise CliError("test split is empty")
    if not args.checkpoint.is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    report = evaluate(state.model, manifest, test_ids)
    text = report.to_csv()
    args.out.write_text(text)
    sys.stdout.write(text)
    print(f"mean_ssim={report.mean_ssim:.6f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.workers is None:
            args.workers = default_workers()
        renderer.set_workers(args.workers)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"wbgs: error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"wbgs: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SceneFormatError, SceneValidationError, DatasetError, CheckpointError, SamplingError,
            ValueError) as exc:
        print(f"wbgs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"wbgs: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
