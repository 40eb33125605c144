"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a ``Tape`` is active (``with Tape() as
tape:``) and at least one input is tracked, the operation appends a node
holding its inputs, its output and a backward rule. ``backward`` replays the
nodes in exact reverse order. Outside a tape nothing is recorded, which is how
evaluation runs.

Shapes are checked explicitly; binary elementwise ops require identical
shapes and broadcasting only happens through ``broadcast_to``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, OptimizerError, ShapeError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


class Tape:
    """Ordered record of differentiable operations."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tracked = False
    tape = Tape.active()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(Node(tuple(inputs), out, rule, op))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion following numpy broadcasting rules."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    src = a.shape
    return _emit("broadcast_to", data, (a,), lambda g: (_unbroadcast(g, src),))


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    src = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), rule)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", data, (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dimensions."""
    if (
        a.data.ndim < 2
        or a.data.ndim != b.data.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", ad @ bd, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` along the last axis of ``x``."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = (flat @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if bias is not None:
        out += bias.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs, rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm: feature dimension must be at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), rule)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation with the usual 0.044715 constant."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def rule(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit("gelu", out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits; targets are constants."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)
    return _emit("bce_with_logits", loss, (logits,), lambda g: (g * (p - y),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``rng`` is None (evaluation) or p == 0."""
    if rng is None or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"take_rows: index out of range [0, {n})")
    src = table.shape

    def rule(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", table.data[idx], (table,), rule)


def insert_tokens(visible: Tensor, index: np.ndarray, fill: Tensor, total: int) -> Tensor:
    """Place ``visible`` [B, n, d] at sequence positions ``index`` of a
    length-``total`` sequence; every other position receives ``fill`` [d]."""
    idx = np.asarray(index, dtype=np.int64)
    b, n, d = visible.shape
    if idx.shape != (n,):
        raise ContractError(f"insert_tokens: {n} tokens but {idx.size} indices")
    if fill.shape != (d,):
        raise ShapeError(f"insert_tokens: fill {fill.shape} vs token width {d}")
    if n and (idx.min() < 0 or idx.max() >= total):
        raise ContractError(f"insert_tokens: index out of range [0, {total})")
    if len(np.unique(idx)) != n:
        raise ContractError("insert_tokens: duplicate indices")
    hidden = np.setdiff1d(np.arange(total), idx)
    out = np.empty((b, total, d))
    out[:, hidden, :] = fill.data
    out[:, idx, :] = visible.data

    def rule(g):
        return g[:, idx, :], g[:, hidden, :].sum(axis=(0, 1))

    return _emit("insert_tokens", out, (visible, fill), rule)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Populate ``.grad`` for every ``requires_grad`` tensor reached by ``tape``.

    Gradients from multiple uses of a tensor are summed. Tensors listed in
    ``params`` that the loss does not depend on receive an all-zero gradient.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t._tracked:
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        t.grad = np.asarray(grads.get(key, np.zeros(t.shape)), dtype=np.float64).reshape(t.shape)
    for p in params or ():
        if id(p) not in leaves:
            p.grad = np.zeros(p.shape)


def _evaluate(fn, tensors) -> float:
    value = fn(*tensors)
    v = float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(-1)[0])
    if not math.isfinite(v):
        raise EvaluationError(f"function value is not finite: {v}")
    return v


def grad_check_detail(
    fn: Callable[..., Tensor],
    point,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Per-input max relative error between the tape gradient and central
    differences. ``max_coords`` caps how many coordinates per input are
    probed (chosen by a seeded draw); None probes all of them."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps must be in [1e-7, 1e-3], got {eps}")
    tensors = [point] if isinstance(point, (Tensor, np.ndarray)) else list(point)
    tensors = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t._tracked = True
    with Tape() as tape:
        loss = fn(*tensors)
    if not math.isfinite(loss.item()):
        raise EvaluationError(f"function value is not finite: {loss.item()}")
    backward(tape, loss, tensors)
    rng = np.random.default_rng(seed)
    errors = []
    for t in tensors:
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = _evaluate(fn, tensors)
            flat[i] = orig - eps
            down = _evaluate(fn, tensors)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors.append(float(worst))
    return errors


def grad_check(fn: Callable[..., Tensor], point, eps: float = 1e-5, **kw) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    return max(grad_check_detail(fn, point, eps, **kw))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place.

    All gradients are screened before anything is touched, so a NaN aborts the
    step with the parameters and moments unchanged.
    """
    if state.learning_rate < 0:
        raise ContractError(f"learning_rate must be nonnegative, got {state.learning_rate}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}; update aborted")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros(p.shape)
            state.second_moment[name] = np.zeros(p.shape)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
