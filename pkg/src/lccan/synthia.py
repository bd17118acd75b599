"""Synthetic shapes benchmark: 12 shape classes, 4 folds, episode sampling.

Images are ``[3, 64, 64]`` float32 in [0, 1], masks ``[64, 64]`` in {0, 1}.
Object sizes are drawn from three regimes (small / mid / large foreground
ratio) so that both augmentation branches of IDA are exercised.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from . import tenfile

SHAPES = ("disk", "ring", "square", "triangle", "cross", "star",
          "bar", "L-shape", "crescent", "diamond", "T-shape", "ellipse")
N_FOLDS = 4
MIN_FOREGROUND = 8


class DatasetError(ValueError):
    pass


@dataclass
class DataConfig:
    shapes: tuple = SHAPES
    samples_per_class: int = 100
    image_size: int = 64
    # (lo, hi) foreground-ratio targets and the fraction of samples per regime
    small_mu: tuple = (0.03, 0.12)
    mid_mu: tuple = (0.17, 0.27)
    large_mu: tuple = (0.33, 0.45)
    regime_split: tuple = (0.3, 0.4, 0.3)
    color_jitter: float = 0.25
    background_noise: float = 0.04
    distractor_prob: float = 0.15

    @classmethod
    def from_dict(cls, d: dict | None) -> "DataConfig":
        d = dict(d or {})
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    sample_id: int
    branch: str | None = None  # set on IDA-augmented copies

    @property
    def mu(self) -> float:
        return float(self.mask.mean())


@dataclass
class Episode:
    support: list
    query: Sample
    class_id: int

    @property
    def K(self) -> int:
        return len(self.support)


@dataclass
class DatasetManifest:
    classes: list
    folds: list
    samples: list
    seed: int
    config: dict = field(default_factory=dict)
    root: Path | None = None
    _index: dict | None = field(default=None, repr=False, compare=False)

    def by_class(self, class_id: int) -> list:
        if self._index is None:
            self._index = {}
            for s in self.samples:
                self._index.setdefault(s.class_id, []).append(s)
        return self._index.get(class_id, [])

    def fold_classes(self, fold: int) -> list:
        return list(self.folds[fold])

    def records(self) -> list[dict]:
        return [{"id": s.sample_id, "class": s.class_id, "mu": round(s.mu, 6),
                 "image": f"images/{s.sample_id:05d}.ten", "mask": f"masks/{s.sample_id:05d}.ten"}
                for s in self.samples]


def fold_of(class_id: int) -> int:
    return class_id % N_FOLDS


def make_folds(n_classes: int) -> list[list[int]]:
    return [[c for c in range(n_classes) if fold_of(c) == f] for f in range(N_FOLDS)]


# ---------------------------------------------------------------- rasterization

def _polygon_inside(u, v, poly) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    inside = np.zeros(u.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = ((y1 > v) != (y0 > v)) & (u < (x0 - x1) * (v - y1) / (y0 - y1 + 1e-12) + x1)
        inside ^= crosses
        x0, y0 = x1, y1
    return inside


def _star(n=5, r_in=0.45):
    a = np.arange(2 * n) * np.pi / n - np.pi / 2
    r = np.where(np.arange(2 * n) % 2 == 0, 1.0, r_in)
    return np.stack([r * np.cos(a), r * np.sin(a)], 1)


_POLYS = {
    "triangle": [(0, -1), (0.866, 0.5), (-0.866, 0.5)],
    "star": _star(),
    "L-shape": [(-0.7, -1), (-0.2, -1), (-0.2, 0.5), (0.7, 0.5), (0.7, 1), (-0.7, 1)],
    "T-shape": [(-1, -0.8), (1, -0.8), (1, -0.35), (0.22, -0.35), (0.22, 1), (-0.22, 1),
                (-0.22, -0.35), (-1, -0.35)],
}


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u * u + v * v
    if shape == "disk":
        return r2 <= 1
    if shape == "ring":
        return (r2 <= 1) & (r2 >= 0.55 ** 2)
    if shape == "square":
        return (np.abs(u) <= 0.75) & (np.abs(v) <= 0.75)
    if shape == "cross":
        return ((np.abs(u) <= 0.28) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 1))
    if shape == "bar":
        return (np.abs(u) <= 1) & (np.abs(v) <= 0.3)
    if shape == "crescent":
        return (r2 <= 1) & ((u - 0.45) ** 2 + v * v > 0.8 ** 2)
    if shape == "diamond":
        return np.abs(u) / 0.6 + np.abs(v) <= 1
    if shape == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1
    if shape in _POLYS:
        return _polygon_inside(u, v, _POLYS[shape])
    raise DatasetError(f"unknown shape {shape!r}")


def rasterize(shape: str, center, radius: float, angle: float = 0.0, size: int = 64) -> np.ndarray:
    """Binary mask of ``shape`` scaled to ``radius`` pixels, sampled at pixel centers.

    ``center`` is (x, y) in continuous pixel coordinates.
    """
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - center[0], ys - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    return _inside(shape, u, v).astype(np.float32)


def _fit_radius(shape, center, angle, target_mu, size) -> np.ndarray:
    lo, hi = 0.5, 0.6 * size
    mask = None
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        mask = rasterize(shape, center, mid, angle, size)
        if mask.mean() < target_mu:
            lo = mid
        else:
            hi = mid
    return rasterize(shape, center, hi, angle, size)


# ---------------------------------------------------------------- image synthesis

def _background(rng, size, noise) -> np.ndarray:
    base = rng.uniform(0.35, 0.65)
    direction = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = 0.15 * (np.cos(direction) * xs + np.sin(direction) * ys)
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = base + ramp[None] + tint[:, None, None] + noise * rng.standard_normal((3, size, size))
    return img


def _object_color(rng, jitter) -> np.ndarray:
    # saturated colors keep objects distinguishable from the near-gray background
    hue = rng.uniform(0, 1)
    rgb = np.clip(np.abs(((hue * 6 + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1)
    rgb = 0.15 + 0.8 * rgb + jitter * rng.uniform(-0.5, 0.5, size=3)
    return np.clip(rgb, 0, 1)


def _regime_of(index: int, split) -> int:
    slot = (index % 10) / 10
    return 0 if slot < split[0] - 1e-9 else (1 if slot < split[0] + split[1] - 1e-9 else 2)


def make_sample(cfg: DataConfig, seed: int, class_id: int, index: int, sample_id: int) -> Sample:
    rng = rng_mod.stream(seed, "data", class_id, index)
    size = cfg.image_size
    shape = cfg.shapes[class_id]
    regime = _regime_of(index, cfg.regime_split)
    lo, hi = (cfg.small_mu, cfg.mid_mu, cfg.large_mu)[regime]
    img = _background(rng, size, cfg.background_noise)

    if rng.uniform() < cfg.distractor_prob:
        other = int(rng.integers(len(cfg.shapes) - 1))
        other += other >= class_id
        dc = rng.uniform(0.2 * size, 0.8 * size, size=2)
        dm = _fit_radius(cfg.shapes[other], dc, rng.uniform(0, 2 * np.pi), rng.uniform(0.02, 0.06), size)
        img = img * (1 - dm) + dm * _object_color(rng, cfg.color_jitter)[:, None, None]

    for _ in range(20):
        target = rng.uniform(lo, hi)
        spread = 0.3 if regime == 0 else 0.12
        center = size * (0.5 + rng.uniform(-spread, spread, size=2))
        mask = _fit_radius(shape, center, rng.uniform(0, 2 * np.pi), target, size)
        mu = mask.mean()
        if mask.sum() >= MIN_FOREGROUND and lo - 0.02 <= mu <= hi + 0.02:
            break
    else:
        raise DatasetError(f"cannot reach foreground ratio {lo}-{hi} for {shape}")

    color = _object_color(rng, cfg.color_jitter)
    texture = color[:, None, None] + 0.03 * rng.standard_normal((3, size, size))
    img = img * (1 - mask) + texture * mask
    return Sample(np.clip(img, 0, 1).astype(np.float32), mask, class_id, sample_id)


def generate_dataset(config: DataConfig | dict | None = None, seed: int = 0, out_dir=None) -> DatasetManifest:
    """Generate the full dataset; when ``out_dir`` is given write ``.ten`` files and
    ``manifest.jsonl`` (one sample per line) plus ``dataset.json``."""
    cfg = config if isinstance(config, DataConfig) else DataConfig.from_dict(config)
    if cfg.samples_per_class < 100:
        raise DatasetError("need at least 100 samples per class")
    small, large = cfg.regime_split[0], cfg.regime_split[2]
    if small < 0.2 or large < 0.2 or cfg.small_mu[1] >= 0.15 or cfg.large_mu[0] <= 0.3:
        raise DatasetError("size distribution cannot guarantee both IDA regimes")
    if len(cfg.shapes) != 12:
        raise DatasetError("expected 12 shape classes")

    samples = []
    for c in range(len(cfg.shapes)):
        for i in range(cfg.samples_per_class):
            samples.append(make_sample(cfg, seed, c, i, len(samples)))
    manifest = DatasetManifest(classes=list(cfg.shapes), folds=make_folds(len(cfg.shapes)),
                               samples=samples, seed=seed, config=_jsonable(asdict(cfg)))
    if out_dir is not None:
        write_dataset(manifest, out_dir)
    return manifest


def _jsonable(d):
    return json.loads(json.dumps(d))


def write_dataset(manifest: DatasetManifest, out_dir) -> Path:
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s, rec in zip(manifest.samples, manifest.records()):
        tenfile.save(root / rec["image"], s.image)
        tenfile.save(root / rec["mask"], s.mask)
        lines.append(json.dumps(rec, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    info = {"classes": manifest.classes, "folds": manifest.folds, "seed": manifest.seed,
            "config": manifest.config}
    (root / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    manifest.root = root
    return root


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    if not (root / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no dataset at {root}")
    info = json.loads((root / "dataset.json").read_text())
    samples = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        samples.append(Sample(tenfile.load(root / rec["image"]), tenfile.load(root / rec["mask"]),
                              rec["class"], rec["id"]))
    return DatasetManifest(info["classes"], info["folds"], samples, info["seed"], info["config"], root)


# ---------------------------------------------------------------- episodes

def episode_classes(manifest: DatasetManifest, fold: int, role: str) -> list[int]:
    if not 0 <= fold < N_FOLDS:
        raise ValueError(f"fold must be in 0..{N_FOLDS - 1}")
    inside = set(manifest.folds[fold])
    if role == "eval":
        return sorted(inside)
    if role == "train":
        return [c for c in range(len(manifest.classes)) if c not in inside]
    raise ValueError(f"role must be 'train' or 'eval', got {role!r}")


def sample_episode(manifest: DatasetManifest, fold: int, K: int, role: str, seed: int,
                   index: int = 0) -> Episode:
    if K < 1:
        raise ValueError("K must be >= 1")
    classes = episode_classes(manifest, fold, role)
    rng = rng_mod.stream(seed, "episode", fold, K, role, index)
    class_id = int(classes[rng.integers(len(classes))])
    pool = manifest.by_class(class_id)
    if len(pool) < K + 1:
        raise DatasetError(f"class {class_id} has fewer than {K + 1} samples")
    picks = rng.choice(len(pool), size=K + 1, replace=False)
    return Episode(support=[pool[i] for i in picks[:K]], query=pool[picks[K]], class_id=class_id)
