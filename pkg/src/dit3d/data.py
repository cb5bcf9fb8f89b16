"""Synthetic primitive-shape datasets, global normalisation and text I/O."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError, ScaleError

SHAPES = ("sphere", "box", "torus", "cylinder")

# fixed primitive dimensions before jitter
BOX_HALF = np.array([1.0, 0.6, 0.8])
TORUS_MAJOR, TORUS_MINOR = 0.75, 0.3
CYL_RADIUS, CYL_HALF_HEIGHT = 0.6, 0.9


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n):
    a, b, c = BOX_HALF
    # face pairs normal to x, y, z with areas 4bc, 4ac, 4ab
    areas = np.array([b * c, a * c, a * b])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * BOX_HALF
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * BOX_HALF[axis]
    return pts


def _torus(rng, n):
    R, r = TORUS_MAJOR, TORUS_MINOR
    out = np.empty((0, 2))
    # area density on the tube angle is proportional to R + r cos(v)
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, R + r, 2 * n) < R + r * np.cos(v)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = R + r * np.cos(v)
    return np.stack([ring * np.cos(u), r * np.sin(v), ring * np.sin(u)], axis=1)


def _cylinder(rng, n):
    r, h = CYL_RADIUS, CYL_HALF_HEIGHT
    side, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    y = np.where(part == 0, rng.uniform(-h, h, n), np.where(part == 1, h, -h))
    return np.stack([rad * np.cos(theta), y, rad * np.sin(theta)], axis=1)


_GENERATORS = {"sphere": _sphere, "box": _box, "torus": _torus, "cylinder": _cylinder}


def gen_shape(kind: str, n: int, seed, rotate: bool = True, jitter: bool = True) -> np.ndarray:
    """``n`` points uniform on the surface of a primitive, y axis up.

    Each sample gets a random rotation about y and an isotropic scale in
    ``[0.8, 1.2]``. ``seed`` is anything ``np.random.default_rng`` accepts.
    """
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ConfigError(f"unknown shape kind {kind!r}; expected one of {SHAPES}") from None
    if n < 1:
        raise ContractError("a shape needs at least one point")
    rng = np.random.default_rng(seed)
    pts = gen(rng, n)
    if rotate:
        a = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        pts = pts @ rot.T
    if jitter:
        pts = pts * rng.uniform(0.8, 1.2)
    return pts


@dataclass
class NormStats:
    center: np.ndarray
    scale: float

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]))


@dataclass
class Dataset:
    clouds: list[np.ndarray]
    labels: list[int]
    class_names: list[str]
    split: dict[str, list[int]] = field(default_factory=dict)
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if len(self.clouds) != len(self.labels):
            raise ContractError("clouds and labels differ in length")
        M = len(self.class_names)
        if any(not 0 <= y < M for y in self.labels):
            raise ContractError(f"labels must lie in [0, {M})")
        if not self.split:
            self.split = {"train": list(range(len(self.clouds))), "test": []}

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, name: str) -> tuple[list[np.ndarray], list[int]]:
        idx = self.split.get(name, [])
        return [self.clouds[i] for i in idx], [self.labels[i] for i in idx]


def make_dataset(kinds=SHAPES, per_class: int = 16, n_points: int = 256, seed: int = 0,
                 test_fraction: float = 0.0) -> Dataset:
    """Deterministic dataset from ``(kinds, per_class, n_points, seed)``.

    Each class contributes ``round(per_class * test_fraction)`` test clouds.
    """
    kinds = list(kinds)
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must be in [0, 1)")
    clouds, labels, train, test = [], [], [], []
    n_test = int(round(per_class * test_fraction))
    for c, kind in enumerate(kinds):
        for i in range(per_class):
            idx = len(clouds)
            clouds.append(gen_shape(kind, n_points, np.random.SeedSequence([seed, c, i])))
            labels.append(c)
            (test if i >= per_class - n_test else train).append(idx)
    return Dataset(clouds, labels, kinds, {"train": train, "test": test})


def normalize_global(ds: Dataset) -> tuple[Dataset, NormStats]:
    """Subtract the pooled mean and divide by the pooled max-abs coordinate."""
    if not ds.clouds:
        raise ContractError("cannot normalise an empty dataset")
    pooled = np.concatenate(ds.clouds, axis=0)
    center = pooled.mean(axis=0)
    scale = float(np.max(np.abs(pooled - center)))
    if not scale > 0:
        raise ScaleError("all points coincide; global scale is zero")
    clouds = [(c - center) / scale for c in ds.clouds]
    stats = NormStats(center, scale)
    return replace(ds, clouds=clouds, norm_stats=stats), stats


def denormalize(ds: Dataset, stats: NormStats) -> Dataset:
    return replace(ds, clouds=[c * stats.scale + stats.center for c in ds.clouds], norm_stats=None)


def write_cloud(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"cloud must be [N, 3], got {pts.shape}")
    with open(path, "w", newline="\n") as f:
        for x, y, z in pts:
            f.write(f"{x:.9f} {y:.9f} {z:.9f}\n")


def read_cloud(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, got {len(parts)}", lineno, str(path))
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-numeric value in {line.strip()!r}", lineno, str(path)) from None
    if not rows:
        raise ParseError("file has no points", None, str(path))
    pts = np.array(rows)
    if not np.all(np.isfinite(pts)):
        raise ParseError("non-finite coordinate", None, str(path))
    return pts


@dataclass
class ManifestEntry:
    file: str
    class_name: str
    class_id: int
    split: str


MANIFEST_FIELDS = ["file", "class_name", "class_id", "split"]


def write_manifest(entries: list[ManifestEntry], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in entries:
            w.writerow({"file": e.file, "class_name": e.class_name, "class_id": e.class_id, "split": e.split})


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ParseError(f"manifest header must be {','.join(MANIFEST_FIELDS)}", 1, str(path))
        for lineno, row in enumerate(reader, 2):
            try:
                out.append(ManifestEntry(row["file"], row["class_name"], int(row["class_id"]), row["split"]))
            except (TypeError, ValueError):
                raise ParseError("malformed manifest row", lineno, str(path)) from None
    return out


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write every cloud plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    split_of = {i: name for name, idx in ds.split.items() for i in idx}
    counters: dict[int, int] = {}
    entries = []
    for i, (cloud, y) in enumerate(zip(ds.clouds, ds.labels)):
        k = counters.get(y, 0)
        counters[y] = k + 1
        rel = os.path.join("clouds", f"{ds.class_names[y]}_{k:04d}.xyz")
        write_cloud(cloud, out / rel)
        entries.append(ManifestEntry(rel, ds.class_names[y], y, split_of.get(i, "train")))
    manifest = out / "manifest.csv"
    write_manifest(entries, manifest)
    return manifest


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    if not entries:
        raise ContractError(f"manifest {manifest_path} lists no clouds")
    names: dict[int, str] = {}
    for e in entries:
        names.setdefault(e.class_id, e.class_name)
    class_names = [names.get(i, f"class{i}") for i in range(max(names) + 1)]
    clouds, labels, split = [], [], {}
    for i, e in enumerate(entries):
        clouds.append(read_cloud(manifest_path.parent / e.file))
        labels.append(e.class_id)
        split.setdefault(e.split, []).append(i)
    split.setdefault("train", [])
    split.setdefault("test", [])
    return Dataset(clouds, labels, class_names, split)


def load_cloud_dir(path) -> list[np.ndarray]:
    """All clouds in a directory (sorted by name), or those listed by a manifest."""
    p = Path(path)
    if p.is_file() and p.suffix == ".csv":
        return load_dataset(p).clouds
    if (p / "manifest.csv").exists():
        return load_dataset(p / "manifest.csv").clouds
    files = sorted(f for f in p.iterdir() if f.suffix in (".xyz", ".txt") and f.is_file())
    if not files:
        raise ContractError(f"no point-cloud files in {p}")
    return [read_cloud(f) for f in files]
