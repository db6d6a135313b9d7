"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Every operation works on the trailing two axes as a matrix and broadcasts over
any leading batch axes, so a single ``(N, d)`` point set and a ``(B, N, d)``
batch go through the same code. Operations are recorded on the innermost
active :class:`Tape`; :func:`backward` sweeps that tape once in reverse.

Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so each rule
can be checked (or deliberately broken) in isolation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "UsageError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "precision",
    "default_dtype",
    "check_finite",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "pick",
    "max_over",
    "sum_all",
    "mean_all",
    "dropout",
    "RFF",
    "rff_forward",
    "kaiming_normal",
    "gradient_errors",
    "check_gradients",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


_state = {"dtype": np.float64, "check_finite": False}
_tapes: list["Tape"] = []


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported precision {dtype}")
    old = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always exists and matches ``data`` in shape."""

    __slots__ = ("id",)

    def __init__(self, id: str, value):
        super().__init__(np.array(value, dtype=_state["dtype"]), requires_grad=True)
        self.id = id
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: object = None


@dataclass
class Tape:
    """Append-only record of the operations of one forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], ctx=None) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].nodes.append(Node(op, out, inputs, ctx))
    return out


def _unbroadcast(g: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray | None:
    if g is None or g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise UsageError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out = node.out
        g = out.grad
        if g is None:
            continue
        out.grad = None
        grads = BACKWARD_RULES[node.op](g, node)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            elif inp.grad is None:
                inp.grad = gi
            else:
                inp.grad = inp.grad + gi


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


def _matmul_bw(g, node):
    a, b = node.inputs
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
    return ga, gb


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` as one node; ``w`` is ``(d_in, d_out)``, ``b`` is ``(1, d_out)``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return _record("linear", x.data @ w.data + b.data, (x, w, b))


def _linear_bw(g, node):
    x, w, b = node.inputs
    gx = g @ w.data.T if x.requires_grad else None
    gw = gb = None
    g2 = g.reshape(-1, g.shape[-1])
    if w.requires_grad:
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
    if b.requires_grad:
        gb = g2.sum(axis=0).reshape(b.shape)
    return gx, gw, gb


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _record("add", a.data + b.data, (a, b))


def _add_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record("sub", a.data - b.data, (a, b))


def _sub_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


def _mul_bw(g, node):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", a.data * c, (a,), c)


def _scale_bw(g, node):
    return (g * node.ctx,)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), mask)


def _relu_bw(g, node):
    return (g * node.ctx,)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax_rows", y, (x,))


def _softmax_bw(g, node):
    y = node.out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _record("log_softmax_rows", y, (x,))


def _log_softmax_bw(g, node):
    p = np.exp(node.out.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _record("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), (xhat, inv))


def _layer_norm_bw(g, node):
    x, gain, bias = node.inputs
    xhat, inv = node.ctx
    gx = None
    if x.requires_grad:
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
    ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
    gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
    return gx, ggain, gbias


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[t.shape for t in ts]} along axis {axis}: {err}") from None
    sizes = [t.shape[axis] for t in ts]
    return _record("concat", data, ts, (axis, np.cumsum(sizes)[:-1]))


def _concat_bw(g, node):
    axis, cuts = node.ctx
    return tuple(np.split(g, cuts, axis=axis))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", data, (x,), x.shape)


def _reshape_bw(g, node):
    return (g.reshape(node.ctx),)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,), axes)


def _transpose_bw(g, node):
    return (np.transpose(g, np.argsort(node.ctx)),)


def gather_rows(x, idx) -> Tensor:
    """Select rows along axis -2 of ``x`` with an integer index array.

    ``x`` has shape ``(*batch, N, d)`` and ``idx`` shape ``(*batch, *rest)``;
    the result has shape ``(*batch, *rest, d)``. With no batch axes this is
    plain ``x[idx]``.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    batch = x.shape[:-2]
    n, d = x.shape[-2:]
    if idx.shape[: len(batch)] != batch:
        raise ShapeError(f"gather_rows: index batch {idx.shape} does not match {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise UsageError(f"gather_rows: index out of range for {n} rows")
    nb = int(np.prod(batch)) if batch else 1
    flat = (idx.reshape(nb, -1) + (np.arange(nb) * n)[:, None]).ravel()
    data = x.data.reshape(nb * n, d)[flat].reshape(idx.shape + (d,))
    return _record("gather_rows", data, (x,), flat)


def _gather_rows_bw(g, node):
    (x,) = node.inputs
    flat = node.ctx
    d = x.shape[-1]
    rows = int(np.prod(x.shape[:-1]))
    g2 = g.reshape(-1, d)
    out = np.empty((rows, d), dtype=g.dtype)
    for j in range(d):
        out[:, j] = np.bincount(flat, weights=g2[:, j], minlength=rows)
    return (out.reshape(x.shape),)


def pick(x, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]``: one entry of the last axis per position."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} vs input {x.shape}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    return _record("pick", data, (x,), idx)


def _pick_bw(g, node):
    (x,) = node.inputs
    out = np.zeros_like(x.data)
    np.put_along_axis(out, node.ctx[..., None], g[..., None], axis=-1)
    return (out,)


def max_over(x, axis: int) -> Tensor:
    """Maximum along ``axis`` (removed). Gradient goes to the first maximiser."""
    x = _as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, arg, axis=axis)
    return _record("max_over", np.squeeze(data, axis=axis), (x,), (axis, arg))


def _max_over_bw(g, node):
    (x,) = node.inputs
    axis, arg = node.ctx
    out = np.zeros_like(x.data)
    np.put_along_axis(out, arg, np.expand_dims(g, axis), axis=axis)
    return (out,)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _record("sum_all", np.asarray(x.data.sum()), (x,))


def _sum_all_bw(g, node):
    (x,) = node.inputs
    return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return _record("mean_all", np.asarray(x.data.mean()), (x,))


def _mean_all_bw(g, node):
    (x,) = node.inputs
    return (np.full(x.shape, g / x.data.size, dtype=x.data.dtype),)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: identity in eval mode or at rate 0."""
    x = _as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    dtype = x.data.dtype
    mask = (rng.random(x.shape, dtype=dtype) >= rate).astype(dtype)
    mask *= 1.0 / (1.0 - rate)
    return _record("dropout", x.data * mask, (x,), mask)


def _dropout_bw(g, node):
    return (g * node.ctx,)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _matmul_bw,
    "linear": _linear_bw,
    "add": _add_bw,
    "sub": _sub_bw,
    "mul": _mul_bw,
    "scale": _scale_bw,
    "relu": _relu_bw,
    "softmax_rows": _softmax_bw,
    "log_softmax_rows": _log_softmax_bw,
    "layer_norm": _layer_norm_bw,
    "concat": _concat_bw,
    "reshape": _reshape_bw,
    "transpose": _transpose_bw,
    "gather_rows": _gather_rows_bw,
    "pick": _pick_bw,
    "max_over": _max_over_bw,
    "sum_all": _sum_all_bw,
    "mean_all": _mean_all_bw,
    "dropout": _dropout_bw,
}


# ------------------------------------------------------------ row-wise layers


def kaiming_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


@dataclass
class RFF:
    """Row-wise feed-forward stack: ReLU between layers, linear output."""

    weights: list[Parameter]
    biases: list[Parameter]

    @classmethod
    def create(cls, name: str, d_in: int, widths: Sequence[int], rng: np.random.Generator) -> "RFF":
        weights, biases = [], []
        for i, w in enumerate(widths):
            weights.append(Parameter(f"{name}.w{i}", kaiming_normal(rng, d_in, w)))
            biases.append(Parameter(f"{name}.b{i}", np.zeros((1, w))))
            d_in = w
        return cls(weights, biases)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    def layers(self) -> list[tuple[Parameter, Parameter, bool]]:
        last = len(self.weights) - 1
        return [(w, b, i < last) for i, (w, b) in enumerate(zip(self.weights, self.biases))]

    def __call__(self, x, dropout_rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
        return rff_forward(x, self.layers(), dropout_rate, rng, training)


def rff_forward(
    x,
    layers: Sequence[tuple[Parameter, Parameter, bool]],
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Apply ``(weight, bias, activate)`` layers to every row independently.

    Dropout, when active, hits the activated hidden outputs only.
    """
    h = _as_tensor(x)
    for w, b, act in layers:
        h = linear(h, w, b)
        if act:
            h = dropout(relu(h), dropout_rate, rng, training)
    return h


# ---------------------------------------------------------- gradient checking


def gradient_errors(
    f: Callable[[Sequence[Parameter]], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter worst ``|autodiff - central difference| / max(1, |central difference|)``."""
    for p in params:
        if p.data.dtype != np.float64:
            raise UsageError(f"gradient check needs float64 parameters, {p.id} is {p.data.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(tape, loss)
    errors = {}
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(params).data)
            flat[i] = orig - eps
            down = float(f(params).data)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        errors[p.id] = worst
    return errors


def check_gradients(f, params: Sequence[Parameter], eps: float = 1e-5) -> float:
    errors = gradient_errors(f, params, eps)
    return max(errors.values(), default=0.0)


def iter_unique(params: Iterator[Parameter]) -> list[Parameter]:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out
