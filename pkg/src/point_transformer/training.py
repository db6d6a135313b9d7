"""Loss, RAdam, metrics and the train / evaluate loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PARTS, AugmentConfig, Sample, augment, batches, permute, random_rotation
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint
from .numerics import Parameter, Tensor, UsageError

log = logging.getLogger(__name__)

LOG_HEADER = "epoch\tloss\taccuracy\tmiou"


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over every leading position."""
    logits = nx._as_tensor(logits)
    target = np.asarray(target, dtype=np.intp)
    if target.shape != logits.shape[:-1]:
        target = target.reshape(logits.shape[:-1])
    c = logits.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= c):
        raise UsageError(f"target outside [0, {c})")
    return nx.scale(nx.mean_all(nx.pick(nx.log_softmax_rows(logits), target)), -1.0)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    params: list[Parameter]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]


def rho(t: int, beta2: float) -> float:
    """Length of the approximated simple moving average after ``t`` steps."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    return rho_inf - 2.0 * t * beta2**t / (1.0 - beta2**t)


def radam_step(state: OptimState) -> None:
    """One rectified-Adam update with decoupled weight decay.

    While the variance estimate is unreliable (rho_t <= 4) the step is plain
    bias-corrected momentum.
    """
    b1, b2 = state.betas
    state.t += 1
    t = state.t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho(t, b2)
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m_hat = m / (1 - b1**t)
        if rect is None:
            p.data -= state.lr * m_hat
        else:
            v_hat = np.sqrt(v / (1 - b2**t))
            p.data -= state.lr * rect * m_hat / (v_hat + state.eps)


# ------------------------------------------------------------------- metrics


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    return np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    return float((pred == true).mean()) if pred.size else 0.0


def mean_iou(pred_labels, true_labels, parts_of_category: Sequence[int]) -> float:
    """IoU averaged over the category's parts; a part absent from both counts as 1."""
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    ious = []
    for part in parts_of_category:
        p, t = pred == part, true == part
        union = np.sum(p | t)
        ious.append(1.0 if union == 0 else np.sum(p & t) / union)
    return float(np.mean(ious))


@dataclass
class Metrics:
    accuracy: float
    mean_iou: float = float("nan")
    per_class: dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------- train loop


@dataclass
class TrainConfig:
    batch_size: int = 11
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 30
    seed: int = 0
    augment: bool = True
    scale_range: tuple[float, float] = (0.8, 1.25)
    translate_range: tuple[float, float] = (-0.1, 0.1)
    max_dropout: float = 0.875
    dtype: str = "float64"
    eval_batch_size: int = 32

    @classmethod
    def segmentation(cls, **overrides) -> "TrainConfig":
        """Part-segmentation column of the reference setup: smaller batches, larger steps."""
        return cls(**{"batch_size": 8, "lr": 5e-3, "weight_decay": 1e-4, **overrides})


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float]]
    checkpoint: Path | None = None
    log_path: Path | None = None


def _stack(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.cloud for s in samples])


def _loss(result, samples: Sequence[Sample], cfg: ModelConfig) -> Tensor:
    if cfg.task == "classification":
        return cross_entropy(result.logits, [s.label for s in samples])
    return cross_entropy(result.logits, np.stack([s.point_labels for s in samples]))


def _categories(samples, cfg):
    return np.array([s.category for s in samples]) if cfg.task == "segmentation" else None


def category_parts(samples: Sequence[Sample]) -> dict[int, tuple[int, ...]]:
    """Part ids seen per category; used for mIoU when no explicit table is given."""
    table: dict[int, set] = {}
    for s in samples:
        table.setdefault(s.category, set()).update(np.unique(s.point_labels).tolist())
    return {c: tuple(sorted(v)) for c, v in table.items()}


def predict(params: ModelParams, cfg: ModelConfig, samples: Sequence[Sample], batch_size: int = 32) -> list:
    """Argmax predictions: a class id per sample, or a label array per sample."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        logits = forward(_stack(chunk), params, cfg, _categories(chunk, cfg)).logits.data
        out.extend(np.argmax(logits, axis=-1))
    return out


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    samples: Sequence[Sample],
    batch_size: int = 32,
    rotate_rng: np.random.Generator | None = None,
    permute_rng: np.random.Generator | None = None,
    parts: dict[int, Sequence[int]] | None = None,
) -> Metrics:
    """Accuracy (and instance-averaged mIoU when segmenting), optionally under random rotations or shuffles."""
    samples = list(samples)
    if rotate_rng is not None:
        samples = [random_rotation(s, rotate_rng) for s in samples]
    if permute_rng is not None:
        samples = [permute(s, permute_rng) for s in samples]
    preds = predict(params, cfg, samples, batch_size)
    if cfg.task == "classification":
        true = np.array([s.label for s in samples])
        pred = np.array(preds)
        per_class = {int(c): accuracy(pred[true == c], true[true == c]) for c in np.unique(true)}
        return Metrics(accuracy(pred, true), per_class=per_class)
    parts = parts or category_parts(samples)
    ious = [mean_iou(p, s.point_labels, parts[s.category]) for p, s in zip(preds, samples)]
    correct = sum(int((p == s.point_labels).sum()) for p, s in zip(preds, samples))
    total = sum(s.n for s in samples)
    per_class = {}
    for c in sorted(parts):
        vals = [iou for iou, s in zip(ious, samples) if s.category == c]
        if vals:
            per_class[int(c)] = float(np.mean(vals))
    return Metrics(correct / total, float(np.mean(ious)), per_class)


def format_row(epoch: int, loss: float, acc: float, miou: float) -> str:
    return f"{epoch}\t{loss:.6f}\t{acc:.6f}\t{miou:.6f}"


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Sequence[Sample],
    test_set: Sequence[Sample] = (),
    out_dir: str | Path | None = None,
    params: ModelParams | None = None,
    extra: dict | None = None,
) -> TrainResult:
    """Train with RAdam; deterministic in ``train_cfg.seed``.

    Writes ``model.ptfm`` and ``metrics.tsv`` into ``out_dir`` when given. The
    log gets one row per epoch; evaluation runs on ``test_set`` if non-empty.
    ``extra`` is stored in the checkpoint next to the training settings.
    """
    if not train_set:
        raise UsageError("training set is empty")
    init_seq, shuffle_seq, noise_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    aug = AugmentConfig(
        train_cfg.scale_range, train_cfg.translate_range, train_cfg.max_dropout,
        min_keep=max(model_cfg.k, model_cfg.n_prime),
    )
    parts = category_parts(list(train_set) + list(test_set)) if model_cfg.task == "segmentation" else None
    history = []
    with nx.precision(np.dtype(train_cfg.dtype).type):
        if params is None:
            params = init_params(model_cfg, int(init_seq.generate_state(1)[0]))
        state = OptimState(params.parameters(), train_cfg.lr, weight_decay=train_cfg.weight_decay)
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            losses, counts = [], []
            for batch in batches(train_set, train_cfg.batch_size, shuffle_rng):
                if train_cfg.augment:
                    batch = [augment(s, aug, noise_rng) for s in batch]
                params.zero_grad()
                with nx.Tape() as tape:
                    result = forward(_stack(batch), params, model_cfg, _categories(batch, model_cfg), True, noise_rng)
                    loss = _loss(result, batch, model_cfg)
                nx.backward(tape, loss)
                radam_step(state)
                losses.append(float(loss.data) * len(batch))
                counts.append(len(batch))
            mean_loss = sum(losses) / sum(counts)
            if test_set:
                m = evaluate(params, model_cfg, test_set, train_cfg.eval_batch_size, parts=parts)
                acc, miou = m.accuracy, m.mean_iou
            else:
                acc, miou = float("nan"), float("nan")
            history.append((epoch, mean_loss, acc, miou))
            log.info("epoch %d loss %.4f acc %.4f miou %.4f (%.1fs)", epoch, mean_loss, acc, miou, time.perf_counter() - t0)

    result = TrainResult(params, history)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            result.checkpoint = out / "model.ptfm"
            save_checkpoint(result.checkpoint, model_cfg, params, {**(extra or {}), "train": train_cfg.__dict__})
            result.log_path = out / "metrics.tsv"
            rows = [LOG_HEADER] + [format_row(*h) for h in history]
            result.log_path.write_text("\n".join(rows) + "\n")
        except OSError as err:
            raise OSError(f"cannot write training outputs to {out}: {err}") from err
    return result


def parts_table(kinds: Sequence[str]) -> dict[int, tuple[int, ...]]:
    """Compact part ids per category for a synthetic dataset built from ``kinds``."""
    ids = sorted({p for k in kinds for p in PARTS[k]})
    return {c: tuple(ids.index(p) for p in PARTS[k]) for c, k in enumerate(kinds)}
