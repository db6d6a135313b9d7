"""SortNet: learned per-point scores, top-K selection and local grouping.

The selection itself is a hard top-K and carries no gradient. The score of each
selected point is written into its feature row, which is how the scoring
network receives a training signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import MhaBlockParams, self_mha
from .geometry import _batched, ball_query_indices, farthest_point_sampling, group_encode_batch, top_k_indices
from .numerics import RFF, Tensor, UsageError

SELECTIONS = ("learned", "fps", "random")


@dataclass
class SortNetParams:
    self_attn: MhaBlockParams
    score: RFF
    encoder: RFF
    radius: float = 0.2
    max_samples: int = 32

    @classmethod
    def create(
        cls,
        name: str,
        d: int,
        d_m: int,
        heads: int,
        rng: np.random.Generator,
        encoder_hidden: Sequence[int] = (128, 256),
        score_hidden: Sequence[int] = (),
        radius: float = 0.2,
        max_samples: int = 32,
    ) -> "SortNetParams":
        g_dim = d_m - 1 - d
        if g_dim < 1:
            raise UsageError(f"d_m={d_m} leaves no room for grouped features with D={d}")
        return cls(
            self_attn=MhaBlockParams.create(f"{name}.attn", d_m, heads, rng),
            score=RFF.create(f"{name}.score", d_m, (*score_hidden, 1), rng),
            encoder=RFF.create(f"{name}.group", d, (*encoder_hidden, g_dim), rng),
            radius=radius,
            max_samples=max_samples,
        )


@dataclass
class SortedLocalFeatures:
    """``features`` rows are ``point ⊕ score ⊕ grouped feature``, best score first."""

    features: Tensor
    scores: np.ndarray
    indices: np.ndarray
    source_points: np.ndarray


def _select(
    selection: str,
    scores: np.ndarray,
    pts: np.ndarray,
    k: int,
    rng: np.random.Generator | None,
) -> np.ndarray:
    if selection == "learned":
        return top_k_indices(scores, pts, k)
    if selection == "fps":
        return farthest_point_sampling(pts, k)
    if selection == "random":
        if rng is None:
            raise UsageError("random selection needs a random generator")
        n = pts.shape[1]
        return np.stack([rng.permutation(n)[:k] for _ in range(len(pts))])
    raise UsageError(f"unknown selection {selection!r}, expected one of {SELECTIONS}")


def sortnet_forward(
    cloud: np.ndarray,
    p_latent,
    params: SortNetParams,
    k: int,
    selection: str = "learned",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    training: bool = False,
) -> SortedLocalFeatures:
    """Score every point, keep the ``k`` best in descending order, attach local features.

    ``selection`` swaps the learned top-K for FPS or uniform random picks; the
    score channel is kept either way so the feature layout does not change.
    """
    pts, single = _batched(cloud)
    p_latent = nx._as_tensor(p_latent)
    if single:
        p_latent = nx.reshape(p_latent, (1, *p_latent.shape))
    b, n, d = pts.shape
    if p_latent.shape[:2] != (b, n):
        raise UsageError(f"latent features {p_latent.shape} do not match cloud {pts.shape}")
    if not 1 <= k <= n:
        raise UsageError(f"cannot select top {k} of {n} points")

    attended = self_mha(p_latent, params.self_attn)
    s = params.score(attended, dropout, rng, training)
    idx = _select(selection, s.data[..., 0], pts, k, rng)

    rows = np.arange(b)[:, None]
    chosen = pts[rows, idx]
    sel_scores = nx.gather_rows(s, idx)
    members = ball_query_indices(pts, idx, params.radius, params.max_samples)
    extra = Tensor(pts[..., 3:].astype(nx.default_dtype())) if d > 3 else None
    # no dropout ahead of the max-pool: it inflates pooled maxima in training only
    g = group_encode_batch(pts, idx, members, params.encoder, extra)
    feats = nx.concat([Tensor(chosen.astype(nx.default_dtype())), sel_scores, g], axis=-1)

    out = SortedLocalFeatures(feats, sel_scores.data[..., 0], idx, chosen)
    if single:
        out = SortedLocalFeatures(
            nx.reshape(feats, feats.shape[1:]), out.scores[0], idx[0], chosen[0]
        )
    return out


def multi_sortnet(
    cloud: np.ndarray,
    p_latent,
    params_list: Sequence[SortNetParams],
    k: int,
    selection: str = "learned",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    training: bool = False,
) -> tuple[Tensor, list[SortedLocalFeatures]]:
    """Run every SortNet and stack their blocks in module order: ``(K·M, d_m)`` per cloud."""
    if not params_list:
        raise UsageError("need at least one SortNet")
    parts = [
        sortnet_forward(cloud, p_latent, p, k, selection, rng, dropout, training) for p in params_list
    ]
    return nx.concat([p.features for p in parts], axis=-2), parts
