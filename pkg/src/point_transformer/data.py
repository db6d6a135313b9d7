"""Synthetic shapes, point-cloud files, normalisation and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("sphere", "cube", "cylinder", "torus")

# Global part ids per synthetic category, in the style of a shared part-label space.
PARTS = {
    "sphere": (0, 1),  # lower / upper hemisphere
    "cube": (2, 3, 4),  # faces normal to x / y / z
    "cylinder": (5, 6),  # caps / side
    "torus": (7, 8),  # inner / outer half of the tube
}

CYLINDER_RADIUS = 1.0
CYLINDER_HEIGHT = 2.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35


class DataError(ValueError):
    """Malformed point-cloud file or dataset manifest."""


@dataclass
class Sample:
    cloud: np.ndarray
    label: int
    category: int
    point_labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.cloud.shape[0]


@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple[float, float] = (0.8, 1.25)
    translate: tuple[float, float] = (-0.1, 0.1)
    max_dropout: float = 0.875
    min_keep: int = 1

    def __post_init__(self):
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale}")
        if self.translate[0] > self.translate[1]:
            raise ValueError(f"translate range must be ordered, got {self.translate}")
        if not 0 <= self.max_dropout < 1:
            raise ValueError("max_dropout must be in [0, 1)")


def check_cloud(cloud: np.ndarray) -> None:
    """Raise ``DataError`` unless ``cloud`` is a valid ``(N, 3)`` or ``(N, 6)`` point set."""
    if cloud.ndim != 2 or cloud.shape[0] < 1 or cloud.shape[1] not in (3, 6):
        raise DataError(f"point cloud must be (N>=1, 3|6), got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise DataError("point cloud contains non-finite values")
    if cloud.shape[1] == 6:
        norms = np.linalg.norm(cloud[:, 3:], axis=1)
        if np.any(np.abs(norms - 1) > 1e-3):
            raise DataError("normals must have unit length")


# ------------------------------------------------------------------ shapes


def _sphere(n, rng):
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p, p.copy(), (p[:, 2] >= 0).astype(int)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    p = rng.uniform(-1, 1, size=(n, 3))
    rows = np.arange(n)
    p[rows, axis] = sign
    nrm = np.zeros((n, 3))
    nrm[rows, axis] = sign
    return p, nrm, axis


def _cylinder(n, rng):
    r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
    side_area, cap_area = 2 * np.pi * r * h, np.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + 2 * cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    p = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    # side
    p[:, 0], p[:, 1] = r * np.cos(theta), r * np.sin(theta)
    p[:, 2] = rng.uniform(-h / 2, h / 2, n)
    nrm[:, 0], nrm[:, 1] = np.cos(theta), np.sin(theta)
    # caps
    cap = ~on_side
    rad = r * np.sqrt(rng.random(n))
    top = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    p[cap, 0] = rad[cap] * np.cos(theta[cap])
    p[cap, 1] = rad[cap] * np.sin(theta[cap])
    p[cap, 2] = top[cap] * h / 2
    nrm[cap] = 0.0
    nrm[cap, 2] = top[cap]
    return p, nrm, on_side.astype(int)


def _torus(n, rng):
    big, small = TORUS_MAJOR, TORUS_MINOR
    v = np.empty(0)
    # area element is proportional to (R + r cos v); rejection-sample v
    while len(v) < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (big + small * np.cos(cand)) / (big + small)
        v = np.concatenate([v, cand[keep]])
    v = v[:n]
    u = rng.uniform(0, 2 * np.pi, n)
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    ring = big + small * np.cos(v)
    p = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    return p, nrm, (np.cos(v) >= 0).astype(int)


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def generate_synthetic(kind: str, n: int, noise: float = 0.0, seed=None) -> Sample:
    """``n`` points uniform on the surface of ``kind``, with analytic unit normals.

    Coordinates get isotropic Gaussian noise of std ``noise``; normals do not.
    ``point_labels`` carry global part ids from :data:`PARTS`.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown shape {kind!r}, expected one of {KINDS}")
    if n < 64:
        raise ValueError("synthetic shapes need at least 64 points")
    rng = np.random.default_rng(seed)
    p, nrm, local_part = _GENERATORS[kind](n, rng)
    if noise > 0:
        p = p + rng.normal(0.0, noise, size=p.shape)
    parts = np.asarray(PARTS[kind])[local_part]
    cat = KINDS.index(kind)
    return Sample(np.concatenate([p, nrm], axis=1), cat, cat, parts)


def synthetic_dataset(
    n_train: int,
    n_test: int,
    n_points: int,
    seed: int,
    kinds: Sequence[str] = KINDS,
    noise: float = 0.01,
    normalize: bool = True,
) -> tuple[list[Sample], list[Sample]]:
    """Class-balanced synthetic train/test split; identical for identical arguments.

    Labels are indices into ``kinds``; part ids are renumbered compactly over
    the parts of ``kinds`` (the full set of kinds keeps :data:`PARTS` ids).
    """
    part_ids = sorted({p for k in kinds for p in PARTS[k]})
    remap = np.zeros(max(part_ids) + 1, dtype=int)
    remap[part_ids] = np.arange(len(part_ids))
    ss = np.random.SeedSequence(seed)
    out = []
    for count, child in zip((n_train, n_test), ss.spawn(2)):
        seeds = child.generate_state(count)
        samples = []
        for i in range(count):
            kind = kinds[i % len(kinds)]
            s = generate_synthetic(kind, n_points, noise, int(seeds[i]))
            s.label = s.category = list(kinds).index(kind)
            s.point_labels = remap[s.point_labels]
            samples.append(normalize_unit_sphere(s) if normalize else s)
        out.append(samples)
    return out[0], out[1]


# -------------------------------------------------------------- transforms


def normalize_unit_sphere(sample: Sample) -> Sample:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    cloud = np.array(sample.cloud, dtype=float)
    xyz = cloud[:, :3] - cloud[:, :3].mean(axis=0)
    radius = np.linalg.norm(xyz, axis=1).max()
    cloud[:, :3] = xyz / radius if radius > 0 else 0.0
    return replace(sample, cloud=cloud)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random isotropic scale, per-axis shift and point dropout (survivors refill the gaps)."""
    cloud = np.array(sample.cloud, dtype=float)
    labels = None if sample.point_labels is None else np.array(sample.point_labels)
    n = len(cloud)
    cloud[:, :3] *= rng.uniform(*cfg.scale)
    cloud[:, :3] += rng.uniform(*cfg.translate, size=3)
    ratio = rng.random() * cfg.max_dropout
    drop = rng.random(n) < ratio
    keep_min = min(n, max(cfg.min_keep, 1))
    if n - drop.sum() < keep_min:
        drop[np.flatnonzero(drop)[: keep_min - (n - drop.sum())]] = False
    if drop.any():
        survivors = np.flatnonzero(~drop)
        fill = survivors[rng.integers(0, len(survivors), size=drop.sum())]
        cloud[drop] = cloud[fill]
        if labels is not None:
            labels[drop] = labels[fill]
    return replace(sample, cloud=cloud, point_labels=labels)


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalised Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate(sample: Sample, rot: np.ndarray) -> Sample:
    cloud = np.array(sample.cloud, dtype=float)
    cloud[:, :3] = cloud[:, :3] @ rot.T
    if cloud.shape[1] >= 6:
        cloud[:, 3:6] = cloud[:, 3:6] @ rot.T
    return replace(sample, cloud=cloud)


def random_rotation(sample: Sample, rng: np.random.Generator) -> Sample:
    return rotate(sample, random_rotation_matrix(rng))


def permute(sample: Sample, rng: np.random.Generator) -> Sample:
    perm = rng.permutation(sample.n)
    labels = None if sample.point_labels is None else sample.point_labels[perm]
    return replace(sample, cloud=sample.cloud[perm], point_labels=labels)


# -------------------------------------------------------------------- files


def save_cloud(path, sample: Sample, num_classes: int = 0) -> None:
    """Header ``N D C label``, then one row per point (plus its part label, if any)."""
    cloud = np.asarray(sample.cloud)
    lines = [f"{cloud.shape[0]} {cloud.shape[1]} {num_classes} {sample.label}"]
    for i, row in enumerate(cloud):
        vals = " ".join(format(float(v), ".17g") for v in row)
        if sample.point_labels is not None:
            vals += f" {int(sample.point_labels[i])}"
        lines.append(vals)
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path, category: int | None = None) -> Sample:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise DataError(f"{path}: cannot read: {err}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    head = lines[0].split()
    try:
        n, d, c, label = (int(x) for x in head)
    except ValueError:
        raise DataError(f"{path}:1: header must be 'N D C label', got {lines[0]!r}") from None
    if d not in (3, 6):
        raise DataError(f"{path}:1: point dimension must be 3 or 6, got {d}")
    if len(lines) - 1 != n:
        raise DataError(f"{path}: header declares {n} points, found {len(lines) - 1}")
    rows, parts = [], []
    with_parts = None
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) not in (d, d + 1) or (with_parts is not None and len(fields) != d + int(with_parts)):
            raise DataError(f"{path}:{lineno}: expected {d} values, got {len(fields)}")
        with_parts = len(fields) == d + 1
        try:
            rows.append([float(x) for x in fields[:d]])
            if with_parts:
                parts.append(int(fields[d]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {line!r}") from None
    cloud = np.array(rows)
    try:
        check_cloud(cloud)
    except DataError as err:
        raise DataError(f"{path}: {err}") from None
    point_labels = np.array(parts) if with_parts else None
    if c > 0:
        bad = label >= c if point_labels is None else (point_labels.min() < 0 or point_labels.max() >= c)
        if label < 0 or bad:
            raise DataError(f"{path}: labels outside [0, {c})")
    return Sample(cloud, label, label if category is None else category, point_labels)


def load_manifest(path) -> list[Sample]:
    """Read ``path label category`` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as err:
        raise DataError(f"{path}: cannot read manifest: {err}") from None
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 'path label category'")
        try:
            label, category = int(fields[1]), int(fields[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label and category must be integers") from None
        sample = load_cloud(path.parent / fields[0], category)
        sample.label = label
        samples.append(sample)
    if not samples:
        raise DataError(f"{path}: manifest lists no samples")
    return samples


def batches(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator | None = None):
    """Yield lists of samples; shuffled when ``rng`` is given."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]
