"""Point-set kernels: sampling, neighbourhoods, score ranking and grouping.

Index computations are plain numpy and never carry gradients. Every kernel
accepts a single cloud ``(N, D)`` or a batch ``(B, N, D)``; batched inputs give
batched outputs. Ties are resolved by lexicographic ``(x, y, z)`` comparison
wherever the result has to be independent of the row order of the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import RFF, Tensor, UsageError


@dataclass(frozen=True)
class Neighborhood:
    center_index: int
    member_indices: tuple[int, ...]
    radius: float


@dataclass(frozen=True)
class MsgConfig:
    n_prime: int
    radii: tuple[float, ...] = (0.1, 0.2, 0.4)
    max_samples: tuple[int, ...] = (16, 32, 64)
    widths: tuple[tuple[int, ...], ...] = ((32, 32, 64), (64, 64, 128), (64, 96, 128))
    d_m: int = 512

    def __post_init__(self):
        if not (len(self.radii) == len(self.max_samples) == len(self.widths)) or not self.radii:
            raise UsageError("MSG scales need matching radii, max_samples and widths")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise UsageError(f"MSG radii must be strictly increasing, got {self.radii}")
        if self.n_prime < 1:
            raise UsageError("n_prime must be positive")


@dataclass
class MsgParams:
    encoders: list[RFF]
    out: RFF

    @classmethod
    def create(cls, name: str, cfg: MsgConfig, d_feat: int, rng: np.random.Generator) -> "MsgParams":
        encoders = [
            RFF.create(f"{name}.scale{i}", 3 + d_feat, w, rng) for i, w in enumerate(cfg.widths)
        ]
        total = sum(w[-1] for w in cfg.widths)
        return cls(encoders, RFF.create(f"{name}.out", total, (cfg.d_m,), rng))


def _batched(points: np.ndarray) -> tuple[np.ndarray, bool]:
    points = np.asarray(points)
    if points.ndim == 2:
        return points[None], True
    if points.ndim != 3:
        raise UsageError(f"expected (N, D) or (B, N, D) points, got {points.shape}")
    return points, False


def lex_rank(points: np.ndarray) -> np.ndarray:
    """Rank of every point in lexicographic ``(x, y, z)`` order, along the last point axis."""
    pts, single = _batched(points)
    order = np.lexsort((pts[..., 2], pts[..., 1], pts[..., 0]), axis=-1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(pts.shape[1])[None, :].repeat(len(pts), 0), axis=-1)
    return rank[0] if single else rank


def _pick(values: np.ndarray, rank: np.ndarray, largest: bool) -> np.ndarray:
    best = values.max(axis=-1, keepdims=True) if largest else values.min(axis=-1, keepdims=True)
    tied = values == best
    return np.argmin(np.where(tied, rank, np.iinfo(rank.dtype).max), axis=-1)


def farthest_point_sampling(points: np.ndarray, n_prime: int) -> np.ndarray:
    """Greedy max-min sampling starting from the point nearest the centroid."""
    pts, single = _batched(points)
    b, n = pts.shape[:2]
    if not 1 <= n_prime <= n:
        raise UsageError(f"cannot sample {n_prime} of {n} points")
    xyz = pts[..., :3]
    rank = lex_rank(pts)
    rows = np.arange(b)
    centroid = xyz.mean(axis=1, keepdims=True)
    cur = _pick(((xyz - centroid) ** 2).sum(-1), rank, largest=False)
    mind = np.full((b, n), np.inf)
    out = np.empty((b, n_prime), dtype=np.intp)
    for t in range(n_prime):
        out[:, t] = cur
        d = ((xyz - xyz[rows, cur][:, None, :]) ** 2).sum(-1)
        mind = np.minimum(mind, d)
        mind[rows, cur] = -np.inf
        if t + 1 < n_prime:
            cur = _pick(mind, rank, largest=True)
    return out[0] if single else out


def ball_query_indices(points: np.ndarray, centers: np.ndarray, r: float, max_k: int) -> np.ndarray:
    """Fixed-width neighbour index table of shape ``(..., C, max_k)``.

    Members are the points within ``r`` of each centre, centre first, then by
    ascending distance with ties to the lower index; short groups repeat the
    centre index.
    """
    if r <= 0 or max_k < 1:
        raise UsageError(f"ball query needs r > 0 and max_k >= 1 (got {r}, {max_k})")
    pts, single = _batched(points)
    centers = np.asarray(centers, dtype=np.intp)
    if single:
        centers = centers[None]
    b, n = pts.shape[:2]
    xyz = pts[..., :3]
    rows = np.arange(b)[:, None]
    c_xyz = xyz[rows, centers]
    d2 = ((c_xyz[:, :, None, :] - xyz[:, None, :, :]) ** 2).sum(-1)
    key = np.where(d2 <= r * r, d2, np.inf)
    np.put_along_axis(key, centers[..., None], -1.0, axis=-1)
    width = min(max_k, n)
    order = np.argsort(key, axis=-1, kind="stable")[..., :width]
    inside = np.take_along_axis(key, order, axis=-1) < np.inf
    idx = np.where(inside, order, centers[..., None])
    if width < max_k:
        pad = np.repeat(centers[..., None], max_k - width, axis=-1)
        idx = np.concatenate([idx, pad], axis=-1)
    return idx[0] if single else idx


def ball_query(points: np.ndarray, center_indices: Sequence[int], r: float, max_k: int) -> list[Neighborhood]:
    table = ball_query_indices(np.asarray(points)[None], np.asarray(center_indices)[None], r, max_k)[0]
    return [
        Neighborhood(int(c), tuple(int(i) for i in row), float(r))
        for c, row in zip(center_indices, table)
    ]


def top_k_indices(scores: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores, descending; ties go to the lexicographically smaller point."""
    pts, single = _batched(points)
    s = np.asarray(scores).reshape(pts.shape[:2])
    n = pts.shape[1]
    if not 1 <= k <= n:
        raise UsageError(f"cannot select top {k} of {n} points")
    order = np.lexsort((pts[..., 2], pts[..., 1], pts[..., 0], -s), axis=-1)[:, :k]
    return order[0] if single else order


def top_k_by_score(scores: Sequence[float], points: np.ndarray, k: int) -> list[tuple[int, float]]:
    s = np.asarray(scores, dtype=float)
    idx = top_k_indices(s, np.asarray(points), k)
    return [(int(i), float(s[i])) for i in idx]


def grouped_inputs(points: np.ndarray, centers: np.ndarray, members: np.ndarray, features=None) -> Tensor:
    """Encoder input for each group member: offset from its centre, then its features.

    ``points`` is ``(B, N, D)``, ``centers`` ``(B, C)``, ``members`` ``(B, C, S)``.
    ``features`` is an optional ``(B, N, d_f)`` tensor; it keeps its gradient.
    """
    rows = np.arange(points.shape[0])[:, None, None]
    xyz = points[..., :3]
    rel = xyz[rows, members] - xyz[rows, centers[..., None]]
    rel = Tensor(rel.astype(nx.default_dtype()))
    if features is None:
        return rel
    return nx.concat([rel, nx.gather_rows(features, members)], axis=-1)


def group_encode_batch(
    points: np.ndarray,
    centers: np.ndarray,
    members: np.ndarray,
    encoder: RFF,
    features=None,
    dropout: float = 0.0,
    rng=None,
    training: bool = False,
) -> Tensor:
    """Shared encoder over every member, max over members: ``(B, C, d_out)``."""
    x = grouped_inputs(points, centers, members, features)
    return nx.max_over(encoder(x, dropout, rng, training), axis=-2)


def group_encode(cloud: np.ndarray, nbhd: Neighborhood, encoder: RFF, out_dim: int) -> np.ndarray:
    """Single-neighbourhood feature vector of width ``out_dim``."""
    if encoder.d_out != out_dim:
        raise UsageError(f"encoder width {encoder.d_out} != requested {out_dim}")
    cloud = np.asarray(cloud, dtype=float)
    extra = Tensor(cloud[None, :, 3:]) if cloud.shape[1] > 3 else None
    out = group_encode_batch(
        cloud[None], np.array([[nbhd.center_index]]), np.array([[nbhd.member_indices]]), encoder, extra
    )
    return out.data[0, 0]


def set_abstraction_msg(
    cloud: np.ndarray,
    per_point_features,
    params: MsgParams,
    cfg: MsgConfig,
    dropout: float = 0.0,
    rng=None,
    training: bool = False,
    centers: np.ndarray | None = None,
) -> Tensor:
    """FPS to ``n_prime`` centres, encode each radius scale, concatenate, project to ``d_m``.

    ``cloud`` may be ``(N, D)`` or ``(B, N, D)``; ``per_point_features`` is
    ``None`` or a tensor with matching leading axes.
    """
    pts, single = _batched(cloud)
    feats = per_point_features
    if feats is not None:
        feats = nx._as_tensor(feats)
        if single:
            feats = nx.reshape(feats, (1, *feats.shape))
    if cfg.n_prime > pts.shape[1]:
        raise UsageError(f"n_prime {cfg.n_prime} exceeds point count {pts.shape[1]}")
    if centers is None:
        centers = farthest_point_sampling(pts, cfg.n_prime)
    scales = []
    for r, k, enc in zip(cfg.radii, cfg.max_samples, params.encoders):
        members = ball_query_indices(pts, centers, r, k)
        scales.append(group_encode_batch(pts, centers, members, enc, feats, dropout, rng, training))
    out = params.out(nx.concat(scales, axis=-1))
    if single:
        out = nx.reshape(out, out.shape[1:])
    return out
