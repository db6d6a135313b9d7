"""The full Point Transformer: local SortNet branch, global branch, local-global attention, heads."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .attention import MhaBlockParams, cross_mha, self_mha
from .geometry import MsgConfig, MsgParams, _batched, farthest_point_sampling, set_abstraction_msg
from .numerics import RFF, Parameter, Tensor, UsageError
from .sortnet import SELECTIONS, SortedLocalFeatures, SortNetParams, multi_sortnet

TASKS = ("classification", "segmentation")
GLOBAL_MODES = ("msg", "fps", "none")

CHECKPOINT_MAGIC = b"PTFM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the classification column of the reference setup.

    Width tuples list hidden layers only; the output width of each stack is
    implied (``d_m`` for the input rFF, ``d_m - 1 - d`` for SortNet grouping,
    ``num_classes`` for the heads, ``d_m_dprime`` for the segmentation rFF).
    """

    task: str = "classification"
    n: int = 1024
    d: int = 6
    d_m: int = 512
    d_m_prime: int = 64
    d_m_dprime: int = 256
    m: int = 4
    k: int = 64
    n_prime: int = 128
    heads: int = 8
    local_layers: int = 1
    global_layers: int = 1
    lg_layers: int = 4
    local_rff: tuple[int, ...] = (64, 128)
    sortnet_rff: tuple[int, ...] = (128, 256)
    score_rff: tuple[int, ...] = ()
    sortnet_radius: float = 0.2
    sortnet_samples: int = 32
    msg_radii: tuple[float, ...] = (0.1, 0.2, 0.4)
    msg_samples: tuple[int, ...] = (16, 32, 64)
    msg_widths: tuple[tuple[int, ...], ...] = ((32, 32, 64), (64, 64, 128), (64, 96, 128))
    seg_rff: tuple[int, ...] = (64, 128)
    head_fc: tuple[int, ...] = (4096, 1024, 512, 128)
    seg_head: tuple[int, ...] = (256, 128)
    dropout: float = 0.4
    num_classes: int = 40
    num_categories: int = 16
    selection: str = "learned"
    global_mode: str = "msg"
    sortnet_only: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(tuple(x) if isinstance(x, list) else x for x in v))
        self.validate()

    @classmethod
    def segmentation(cls, **overrides) -> "ModelConfig":
        base = dict(
            task="segmentation", m=10, k=16, n_prime=64, d_m_prime=256, d_m_dprime=256,
            local_rff=(64, 128), sortnet_rff=(64, 128), dropout=0.3, num_classes=50,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Single-core scale for the 4-class synthetic benchmark (N=256, d_m=64, M=2, K=32, N'=32)."""
        base = dict(
            n=256, d=6, d_m=64, d_m_prime=16, d_m_dprime=16, m=2, k=32, n_prime=32, heads=4,
            lg_layers=2, local_rff=(32, 64), sortnet_rff=(32, 64), seg_rff=(32,), seg_head=(32,),
            msg_widths=((16, 32), (32, 32), (32, 64)), head_fc=(256, 64), num_classes=4,
            num_categories=4, dropout=0.2,
        )
        if overrides.get("task") == "segmentation":
            base.update(num_classes=9, n_prime=32, k=16, m=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The gradient-check configuration: d_m=16, h=2, N=8, M=1, K=4, N'=4, C=3."""
        base = dict(
            n=8, d=6, d_m=16, d_m_prime=8, d_m_dprime=8, m=1, k=4, n_prime=4, heads=2,
            lg_layers=2, local_rff=(8,), sortnet_rff=(8,), sortnet_radius=0.8, sortnet_samples=4,
            msg_radii=(0.5, 1.0), msg_samples=(3, 4), msg_widths=((8,), (8,)),
            seg_rff=(8,), head_fc=(12,), seg_head=(8,), num_classes=3, num_categories=2,
            dropout=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.selection in SELECTIONS, f"selection must be one of {SELECTIONS}")
        need(self.global_mode in GLOBAL_MODES, f"global_mode must be one of {GLOBAL_MODES}")
        need(self.d >= 3, "input dimension must include xyz")
        need(self.heads >= 1 and self.d_m % self.heads == 0, f"heads={self.heads} must divide d_m={self.d_m}")
        need(self.d_m_prime < self.d_m, "d_m_prime must be smaller than d_m")
        need(self.d_m_prime % self.heads == 0, f"heads={self.heads} must divide d_m_prime={self.d_m_prime}")
        need(self.d_m - 1 - self.d >= 1, "d_m too small for point + score + grouped features")
        need(1 <= self.k <= self.n, "top_k must be in [1, n]")
        need(1 <= self.n_prime <= self.n, "reduced_point_set must be in [1, n]")
        need(self.m >= 1 and self.lg_layers >= 1, "need at least one SortNet and one local-global layer")
        need(0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)")
        need(self.num_classes >= 2, "need at least two classes")
        need(len(self.msg_radii) == len(self.msg_samples) == len(self.msg_widths), "MSG scale lists differ in length")
        if self.task == "segmentation":
            need(not self.sortnet_only, "sortnet_only is a classification ablation")
            need(self.d_m_dprime == self.d_m_prime, "segmentation needs d_m_dprime == d_m_prime")
            need(self.d_m_dprime % self.heads == 0, "heads must divide d_m_dprime")

    @property
    def msg(self) -> MsgConfig:
        return MsgConfig(self.n_prime, self.msg_radii, self.msg_samples, self.msg_widths, self.d_m)

    @property
    def point_features(self) -> int:
        """Width of the per-point input: coordinates (plus category one-hot when segmenting)."""
        return self.d + (self.num_categories if self.task == "segmentation" else 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class LocalGlobalLayer:
    self_local: MhaBlockParams
    self_global: MhaBlockParams
    cross: MhaBlockParams


@dataclass
class ModelParams:
    input_rff: RFF
    local_attn: list[MhaBlockParams]
    sortnets: list[SortNetParams]
    lg: list[LocalGlobalLayer] = field(default_factory=list)
    msg: MsgParams | None = None
    global_in: RFF | None = None
    seg_rff: RFF | None = None
    seg_attn: list[MhaBlockParams] = field(default_factory=list)
    seg_cross: MhaBlockParams | None = None
    head: RFF | None = None

    def parameters(self) -> list[Parameter]:
        return nx.iter_unique(iter_params(self))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def iter_params(obj) -> Iterator[Parameter]:
    """Parameters of a dataclass tree in field order."""
    if isinstance(obj, Parameter):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_params(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_params(item)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Kaiming-normal weights, zero biases, unit layer-norm gains; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    h, d_m = cfg.heads, cfg.d_m
    params = ModelParams(
        input_rff=RFF.create("local.input", cfg.point_features, (*cfg.local_rff, d_m), rng),
        local_attn=[MhaBlockParams.create(f"local.attn{i}", d_m, h, rng) for i in range(cfg.local_layers)],
        sortnets=[
            SortNetParams.create(
                f"sortnet{i}", cfg.d, d_m, h, rng, cfg.sortnet_rff, cfg.score_rff,
                cfg.sortnet_radius, cfg.sortnet_samples,
            )
            for i in range(cfg.m)
        ],
    )
    if cfg.task == "segmentation":
        params.seg_rff = RFF.create("global.seg_input", cfg.point_features, (*cfg.seg_rff, cfg.d_m_dprime), rng)
        params.seg_attn = [
            MhaBlockParams.create(f"global.seg_attn{i}", cfg.d_m_dprime, h, rng) for i in range(cfg.global_layers)
        ]
    if not cfg.sortnet_only:
        if cfg.global_mode == "msg":
            d_feat = cfg.d_m_dprime if cfg.task == "segmentation" else cfg.d - 3
            params.msg = MsgParams.create("global.msg", cfg.msg, d_feat, rng)
        else:
            params.global_in = RFF.create("global.input", cfg.point_features, (*cfg.local_rff, d_m), rng)
        for i in range(cfg.lg_layers):
            last = i == cfg.lg_layers - 1
            params.lg.append(
                LocalGlobalLayer(
                    self_local=MhaBlockParams.create(f"lg{i}.self_local", d_m, h, rng),
                    self_global=MhaBlockParams.create(f"lg{i}.self_global", d_m, h, rng),
                    cross=MhaBlockParams.create(
                        f"lg{i}.cross", d_m, h, rng, d_out=cfg.d_m_prime if last else d_m
                    ),
                )
            )
    if cfg.task == "classification":
        width = cfg.d_m if cfg.sortnet_only else cfg.d_m_prime
        params.head = RFF.create("head", cfg.k * cfg.m * width, (*cfg.head_fc, cfg.num_classes), rng)
    else:
        params.seg_cross = MhaBlockParams.create("seg.cross", cfg.d_m_dprime, h, rng)
        params.head = RFF.create("seg.head", cfg.d_m_dprime, (*cfg.seg_head, cfg.num_classes), rng)
    return params


@dataclass
class ForwardResult:
    logits: Tensor
    local: list[SortedLocalFeatures]
    lg_out: Tensor | None = None


def _with_onehot(pts: np.ndarray, categories, cfg: ModelConfig) -> np.ndarray:
    if cfg.task != "segmentation":
        return pts
    cats = np.asarray(categories)
    if cats.ndim == 1 and cats.dtype.kind in "iu":
        onehot = np.zeros((len(cats), cfg.num_categories))
        onehot[np.arange(len(cats)), cats] = 1.0
    else:
        onehot = np.asarray(cats, dtype=float).reshape(len(pts), -1)
    if onehot.shape != (len(pts), cfg.num_categories) or not np.allclose(onehot.sum(-1), 1.0):
        raise UsageError(f"category one-hot must be ({len(pts)}, {cfg.num_categories}) rows summing to 1")
    tiled = np.broadcast_to(onehot[:, None, :], (*pts.shape[:2], cfg.num_categories))
    return np.concatenate([pts, tiled], axis=-1)


def global_branch(
    pts: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    categories=None,
    training: bool = False,
    rng=None,
) -> tuple[Tensor, Tensor | None]:
    """Global features ``(B, N', d_m)`` and, when segmenting, per-point features ``(B, N, d_m'')``."""
    pts, _ = _batched(pts)
    if pts.shape[1] < cfg.n_prime:
        raise UsageError(f"cloud has {pts.shape[1]} points, fewer than n_prime={cfg.n_prime}")
    dtype = nx.default_dtype()
    inputs = Tensor(_with_onehot(pts, categories, cfg).astype(dtype))
    per_point = None
    if cfg.task == "segmentation":
        per_point = params.seg_rff(inputs, cfg.dropout, rng, training)
        for block in params.seg_attn:
            per_point = self_mha(per_point, block)
    if cfg.global_mode == "msg":
        if per_point is not None:
            feats = per_point
        elif cfg.d > 3:
            feats = Tensor(pts[..., 3:].astype(dtype))
        else:
            feats = None
        # grouped encoders end in a max-pool, so they run without dropout
        f_g = set_abstraction_msg(pts, feats, params.msg, cfg.msg)
    elif cfg.global_mode == "fps":
        centers = farthest_point_sampling(pts, cfg.n_prime)
        f_g = params.global_in(nx.gather_rows(inputs, centers), cfg.dropout, rng, training)
    else:
        f_g = params.global_in(inputs, cfg.dropout, rng, training)
    return f_g, per_point


def local_branch(pts, params, cfg, categories=None, training=False, rng=None):
    pts, _ = _batched(pts)
    inputs = Tensor(_with_onehot(pts, categories, cfg).astype(nx.default_dtype()))
    latent = params.input_rff(inputs, cfg.dropout, rng, training)
    for block in params.local_attn:
        latent = self_mha(latent, block)
    return multi_sortnet(pts, latent, params.sortnets, cfg.k, cfg.selection, rng, cfg.dropout, training)


def local_global_attention(f_l, f_g, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Stacked ``cross(self(local), self(global))``; output rows follow ``f_l``, last width ``d_m'``."""
    for layer in params.lg[: cfg.lg_layers]:
        f_g = self_mha(f_g, layer.self_global)
        f_l = cross_mha(self_mha(f_l, layer.self_local), f_g, layer.cross)
    return f_l


def forward(
    clouds: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    categories=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Batched forward pass over ``(B, N, D)`` clouds.

    Returns class logits ``(B, C)`` or per-point logits ``(B, N, C)``; softmax
    is left to the loss / prediction code.
    """
    pts, _ = _batched(np.asarray(clouds))
    if pts.shape[-1] != cfg.d:
        raise UsageError(f"clouds have {pts.shape[-1]} columns, config expects d={cfg.d}")
    if cfg.task == "segmentation" and categories is None:
        raise UsageError("segmentation needs the object category")
    if rng is None and cfg.selection == "random":
        # a fixed stream keeps random-selection inference reproducible
        rng = np.random.default_rng(0)
    f_l, local = local_branch(pts, params, cfg, categories, training, rng)
    if cfg.sortnet_only:
        flat = nx.reshape(f_l, (len(pts), -1))
        logits = params.head(nx.dropout(flat, cfg.dropout, rng, training), cfg.dropout, rng, training)
        return ForwardResult(logits, local)
    f_g, per_point = global_branch(pts, params, cfg, categories, training, rng)
    lg = local_global_attention(f_l, f_g, params, cfg)
    if cfg.task == "classification":
        flat = nx.reshape(lg, (len(pts), -1))
        logits = params.head(nx.dropout(flat, cfg.dropout, rng, training), cfg.dropout, rng, training)
    else:
        attended = cross_mha(per_point, lg, params.seg_cross)
        logits = params.head(attended, cfg.dropout, rng, training)
    return ForwardResult(logits, local, lg)


def classify(cloud: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Class logits for one cloud (eval mode)."""
    if cfg.task != "classification":
        raise UsageError("classify needs a classification config")
    return forward(np.asarray(cloud)[None], params, cfg).logits.data[0]


def segment(cloud: np.ndarray, category_onehot, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Per-point part logits ``(N, C)`` for one cloud; row ``i`` belongs to input point ``i``."""
    if cfg.task != "segmentation":
        raise UsageError("segment needs a segmentation config")
    onehot = np.asarray(category_onehot, dtype=float).reshape(1, -1)
    return forward(np.asarray(cloud)[None], params, cfg, onehot).logits.data[0]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, extra: dict | None = None) -> None:
    """Write ``PTFM``, version, JSON config, then every parameter as float64 little-endian."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps({"config": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    plist = params.parameters()
    buf.write(struct.pack("<I", len(plist)))
    for p in plist:
        name = p.id.encode()
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)))
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as err:
        raise CheckpointError(f"{path}: bad config: {err}") from None
    params = init_params(cfg, 0)
    expected = params.parameters()
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} parameters stored, config needs {len(expected)}")
    for p in expected:
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name != p.id or tuple(shape) != p.shape:
            raise CheckpointError(f"{path}: parameter {name}{shape} does not match {p.id}{p.shape}")
        values = np.frombuffer(take(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
        p.data[...] = values
    return cfg, params, meta.get("extra", {})
