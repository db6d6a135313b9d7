"""Scaled dot-product attention, multi-head attention and the residual block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import RFF, Parameter, ShapeError, Tensor, kaiming_normal


@dataclass(frozen=True)
class AttentionConfig:
    d_m: int
    h: int

    def __post_init__(self):
        if self.h < 1 or self.d_m % self.h:
            raise ShapeError(f"head count {self.h} must divide model dim {self.d_m}")

    @property
    def d_k(self) -> int:
        return self.d_m // self.h

    @property
    def d_v(self) -> int:
        return self.d_m // self.h


@dataclass
class MultiheadParams:
    """Projections for all heads.

    Head ``i`` owns columns ``i*d_k:(i+1)*d_k`` of ``wq``/``wk``/``wv``; ``wo`` maps
    the head-ordered concatenation back to ``d_m``.
    """

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    h: int

    @classmethod
    def create(cls, name: str, cfg: AttentionConfig, rng: np.random.Generator) -> "MultiheadParams":
        d_m, hd = cfg.d_m, cfg.h * cfg.d_k
        return cls(
            wq=Parameter(f"{name}.wq", kaiming_normal(rng, d_m, hd)),
            wk=Parameter(f"{name}.wk", kaiming_normal(rng, d_m, hd)),
            wv=Parameter(f"{name}.wv", kaiming_normal(rng, d_m, hd)),
            wo=Parameter(f"{name}.wo", kaiming_normal(rng, hd, d_m)),
            h=cfg.h,
        )

    @property
    def config(self) -> AttentionConfig:
        return AttentionConfig(self.wq.shape[0], self.h)

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The ``(W^Q_i, W^K_i, W^V_i)`` blocks of head ``i`` as array views."""
        dk = self.wq.shape[1] // self.h
        cols = slice(i * dk, (i + 1) * dk)
        return self.wq.data[:, cols], self.wk.data[:, cols], self.wv.data[:, cols]


@dataclass
class MhaBlockParams:
    multihead: MultiheadParams
    ln1_gain: Parameter
    ln1_bias: Parameter
    rff: RFF
    ln2_gain: Parameter
    ln2_bias: Parameter
    # only present when the block narrows its output below d_m
    proj: Parameter | None = None

    @classmethod
    def create(
        cls,
        name: str,
        d_m: int,
        h: int,
        rng: np.random.Generator,
        d_out: int | None = None,
        hidden: int | None = None,
    ) -> "MhaBlockParams":
        d_out = d_m if d_out is None else d_out
        hidden = d_m if hidden is None else hidden
        mh = MultiheadParams.create(f"{name}.mh", AttentionConfig(d_m, h), rng)
        rff = RFF.create(f"{name}.rff", d_m, (hidden, d_out), rng)
        proj = None
        if d_out != d_m:
            proj = Parameter(f"{name}.proj", kaiming_normal(rng, d_m, d_out))
        return cls(
            multihead=mh,
            ln1_gain=Parameter(f"{name}.ln1.g", np.ones((1, d_m))),
            ln1_bias=Parameter(f"{name}.ln1.b", np.zeros((1, d_m))),
            rff=rff,
            ln2_gain=Parameter(f"{name}.ln2.g", np.ones((1, d_out))),
            ln2_bias=Parameter(f"{name}.ln2.b", np.zeros((1, d_out))),
            proj=proj,
        )

    @property
    def d_out(self) -> int:
        return self.rff.d_out


def score(q, k) -> Tensor:
    """Row-softmax of ``q kᵀ / √d_k``."""
    q, k = nx._as_tensor(q), nx._as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"score: query width {q.shape} differs from key width {k.shape}")
    # scaling the queries is cheaper than scaling the N x N_k logits
    q = nx.scale(q, 1.0 / math.sqrt(q.shape[-1]))
    return nx.softmax_rows(nx.matmul(q, nx.transpose(k)))


def attention(q, k, v) -> Tensor:
    k, v = nx._as_tensor(k), nx._as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return nx.matmul(score(q, k), v)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = nx.reshape(x, (*lead, n, h, d // h))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.reshape(nx.transpose(x, axes), (*lead, n, h * d))


def multihead(q, k, v, p: MultiheadParams, cfg: AttentionConfig | None = None) -> Tensor:
    """Project ``h`` times, attend per head, concatenate heads in order, project with ``W^O``."""
    q, k, v = nx._as_tensor(q), nx._as_tensor(k), nx._as_tensor(v)
    cfg = p.config if cfg is None else cfg
    if p.wq.shape != (cfg.d_m, cfg.h * cfg.d_k) or p.h != cfg.h:
        raise ShapeError(f"multihead: params {p.wq.shape}/h={p.h} do not match {cfg}")
    for name, t in (("query", q), ("key", k), ("value", v)):
        if t.shape[-1] != cfg.d_m:
            raise ShapeError(f"multihead: {name} width {t.shape[-1]} != d_m {cfg.d_m}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"multihead: {k.shape[-2]} keys but {v.shape[-2]} values")
    qh = _split_heads(nx.matmul(q, p.wq), cfg.h)
    kh = _split_heads(nx.matmul(k, p.wk), cfg.h)
    vh = _split_heads(nx.matmul(v, p.wv), cfg.h)
    return nx.matmul(_merge_heads(attention(qh, kh, vh)), p.wo)


def mha_block(x, y, p: MhaBlockParams) -> Tensor:
    """``LayerNorm(S + rFF(S))`` with ``S = LayerNorm(x + Multihead(x, y, y))``.

    When the block narrows to ``d_out < d_m`` the residual branch is ``S @ proj``.
    """
    x, y = nx._as_tensor(x), nx._as_tensor(y)
    s = nx.layer_norm(nx.add(x, multihead(x, y, y, p.multihead)), p.ln1_gain, p.ln1_bias)
    residual = s if p.proj is None else nx.matmul(s, p.proj)
    return nx.layer_norm(nx.add(residual, p.rff(s)), p.ln2_gain, p.ln2_bias)


def self_mha(p_latent, params: MhaBlockParams) -> Tensor:
    return mha_block(p_latent, p_latent, params)


def cross_mha(p, q, params: MhaBlockParams) -> Tensor:
    return mha_block(p, q, params)
