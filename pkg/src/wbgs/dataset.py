"""PAS dataset container: raw float32 samples plus a JSON manifest.

Layout on disk::

    out_dir/
      manifest.json
      scene.json
      samples/000000.f32  ...

Each sample file is headerless little-endian float32, row-major, ``H`` rows
of ``W`` linear power values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1
EPS_POWER = 1e-20
DEFAULT_DYNAMIC_RANGE_DB = 60.0

# Commonly used radio frequencies (Hz) from 1 to 94 GHz.
TABLE4_FREQS = (1e9, 2.4e9, 5e9, 10e9, 24.25e9, 37e9, 47e9, 60e9, 77e9, 94e9)

_F32 = np.dtype("<f4")


class DatasetError(ValueError):
    pass


def write_sample(values, path) -> None:
    arr = np.ascontiguousarray(values, dtype=_F32)
    if arr.ndim != 2:
        raise DatasetError("sample must be a 2-D H x W grid")
    Path(path).write_bytes(arr.tobytes())


def read_sample(path, W: int, H: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != W * H * 4:
        raise DatasetError(f"{path}: expected {W * H * 4} bytes for {H}x{W}, found {len(raw)}")
    return np.frombuffer(raw, dtype=_F32).reshape(H, W).copy()


@dataclass(frozen=True)
class Norm:
    db_floor: float
    db_ceil: float

    def __post_init__(self):
        if not self.db_ceil > self.db_floor:
            raise DatasetError("db_ceil must exceed db_floor")


def normalize(values, norm: Norm) -> np.ndarray:
    """Linear power -> [0, 1] through a fixed dB window."""
    db = 10.0 * np.log10(np.asarray(values, dtype=float) + EPS_POWER)
    return np.clip((db - norm.db_floor) / (norm.db_ceil - norm.db_floor), 0.0, 1.0)


def norm_from_peak(max_power: float, dynamic_range_db: float = DEFAULT_DYNAMIC_RANGE_DB) -> Norm:
    ceil = 10.0 * np.log10(max_power + EPS_POWER)
    return Norm(float(ceil - dynamic_range_db), float(ceil))


@dataclass(frozen=True)
class SampleRecord:
    file: str
    tx: tuple
    freq: float


@dataclass
class DatasetManifest:
    W: int
    H: int
    samples: list
    norm: Norm
    scene_file: str = "scene.json"
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    @property
    def freqs(self) -> list[float]:
        return sorted({s.freq for s in self.samples})

    @property
    def tx_positions(self) -> list[tuple]:
        """Distinct TX positions in first-appearance order."""
        seen = {}
        for s in self.samples:
            seen.setdefault(s.tx, None)
        return list(seen)

    def path_of(self, i: int) -> Path:
        return self.root / self.samples[i].file

    def read(self, i: int) -> np.ndarray:
        return read_sample(self.path_of(i), self.W, self.H)

    def read_normalized(self, i: int) -> np.ndarray:
        return normalize(self.read(i), self.norm)

    def arrays(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """``X`` rows ``(tx_x, tx_y, tx_z, freq)`` and normalised images ``y`` for ``ids``."""
        ids = list(ids)
        X = np.array([[*self.samples[i].tx, self.samples[i].freq] for i in ids], dtype=float).reshape(-1, 4)
        y = np.stack([self.read_normalized(i) for i in ids]) if ids else np.zeros((0, self.H, self.W))
        return X, y

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "W": self.W,
            "H": self.H,
            "scene_file": self.scene_file,
            "norm": {"db_floor": self.norm.db_floor, "db_ceil": self.norm.db_ceil},
            "samples": [{"file": s.file, "tx": list(s.tx), "freq": s.freq} for s in self.samples],
            **({"extra": self.extra} if self.extra else {}),
        }

    def validate(self) -> None:
        for s in self.samples:
            p = self.root / s.file
            if not p.is_file():
                raise DatasetError(f"missing sample file {p}")
            if p.stat().st_size != self.W * self.H * 4:
                raise DatasetError(f"{p}: wrong size for {self.H}x{self.W}")


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        samples = [SampleRecord(s["file"], tuple(float(v) for v in s["tx"]), float(s["freq"]))
                   for s in doc["samples"]]
        m = DatasetManifest(
            W=int(doc["W"]), H=int(doc["H"]), samples=samples,
            norm=Norm(float(doc["norm"]["db_floor"]), float(doc["norm"]["db_ceil"])),
            scene_file=doc.get("scene_file", "scene.json"),
            version=int(doc.get("version", MANIFEST_VERSION)),
            extra=doc.get("extra", {}),
            root=path.parent,
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    if check_files:
        m.validate()
    return m


@dataclass(frozen=True)
class SplitSpec:
    """TX-position split shared by all frequencies, plus frequency filters.

    If both frequency lists are empty every frequency is used on both sides.
    If only one is given, the other side gets the remaining frequencies.
    """

    tx_train_fraction: float = 0.8
    seed: int = 0
    train_freqs: tuple = ()
    test_freqs: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.tx_train_fraction < 1.0:
            raise DatasetError("tx_train_fraction must lie in (0, 1)")
        if set(self.train_freqs) & set(self.test_freqs):
            raise DatasetError("train and test frequency sets must be disjoint")


def _match_freqs(requested, available):
    out = []
    for f in requested:
        hits = [a for a in available if abs(a - f) <= 1e-6 * max(abs(f), 1.0)]
        if not hits:
            raise DatasetError(f"frequency {f:g} Hz is not present in the manifest")
        out.append(hits[0])
    return set(out)


def split_tx(n_tx: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of train/test TX positions after a seeded shuffle."""
    perm = np.random.default_rng(seed).permutation(n_tx)
    n_train = int(np.floor(fraction * n_tx + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(manifest: DatasetManifest, spec: SplitSpec) -> tuple[list[int], list[int]]:
    freqs = manifest.freqs
    train_f = _match_freqs(spec.train_freqs, freqs)
    test_f = _match_freqs(spec.test_freqs, freqs)
    if not train_f and not test_f:
        train_f = test_f = set(freqs)
    elif not test_f:
        test_f = set(freqs) - train_f
    elif not train_f:
        train_f = set(freqs) - test_f
    txs = manifest.tx_positions
    tr_idx, te_idx = split_tx(len(txs), spec.tx_train_fraction, spec.seed)
    train_tx = {txs[i] for i in tr_idx}
    test_tx = {txs[i] for i in te_idx}
    train, test = [], []
    for i, s in enumerate(manifest.samples):
        if s.tx in train_tx and s.freq in train_f:
            train.append(i)
        elif s.tx in test_tx and s.freq in test_f:
            test.append(i)
    return train, test
