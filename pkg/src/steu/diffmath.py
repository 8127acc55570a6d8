"""Dense float64 tensors with reverse-mode differentiation on a recording tape.

Only the primitives the classifier graph needs are provided; this is a
fixed-graph engine, not a general autodiff framework. Every op takes an
optional ``tape``: with a tape it records a node for the backward pass,
without one it is a plain numpy computation (used for frozen/no-grad
forwards). ``grad_check`` is the independent central-difference oracle
against which the analytic backward rules are verified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5
PROB_CLAMP = 1e-7
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's contract."""


class Tensor:
    """Immutable-shape, row-major float64 array. Hashable by identity."""

    __slots__ = ("data",)

    def __init__(self, data, validate: bool = True) -> None:
        arr = _contiguous(np.asarray(data, dtype=np.float64))
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return _t(self.data.copy())

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return _t(np.zeros(tuple(shape), dtype=np.float64))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        return np.ascontiguousarray(arr)
    return arr


def _t(arr: np.ndarray) -> Tensor:
    """Wrap an array the ops already know is finite/contiguous."""
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(arr, dtype=np.float64))
    return out


# A backward rule maps the output gradient to one gradient per input (None
# for inputs that are not differentiated, e.g. integer ids).
BackwardFn = Callable[[np.ndarray], tuple]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of executed primitives; reusable (backward is pure)."""

    nodes: list[Node] = field(default_factory=list)
    watched: list[Tensor] = field(default_factory=list)
    _watched_ids: set[int] = field(default_factory=set)

    def watch(self, *tensors: Tensor) -> None:
        """Register leaf parameters; unused ones get zero gradients."""
        for t in tensors:
            if id(t) not in self._watched_ids:
                self._watched_ids.add(id(t))
                self.watched.append(t)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward: BackwardFn) -> None:
        self.nodes.append(Node(op, inputs, output, backward))


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss w.r.t. every watched leaf tensor.

    The tape is not consumed; repeated calls return identical results.
    """
    if loss.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if tape.nodes and id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g_out = acc.get(id(node.output))
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None:
                continue
            prev = acc.get(id(inp))
            acc[id(inp)] = g if prev is None else prev + g
    return {
        p: _t(acc[id(p)]) if id(p) in acc else Tensor.zeros(p.shape)
        for p in tape.watched
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes back to the input's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # flatten leading dims into one 2-D gemm when the right operand is a
    # plain matrix; much faster than numpy's per-batch-row loop
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[1])
    return a @ b


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from exc
    out = _t(_mm(a.data, b.data))
    if tape is not None:
        a_d, b_d = a.data, b.data

        def bwd(g: np.ndarray) -> tuple:
            if b_d.ndim == 2:
                g2 = g.reshape(-1, g.shape[-1])
                ga = (g2 @ b_d.T).reshape(a_d.shape)
                gb = a_d.reshape(-1, a_d.shape[-1]).T @ g2
                return ga, gb
            ga = _unbroadcast(g @ np.swapaxes(b_d, -1, -2), a_d.shape)
            gb = _unbroadcast(np.swapaxes(a_d, -1, -2) @ g, b_d.shape)
            return ga, gb

        tape.record("matmul", (a, b), out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}") from exc
    out = _t(a.data + b.data)
    if tape is not None:
        a_shape, b_shape = a.shape, b.shape

        def bwd(g: np.ndarray) -> tuple:
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        tape.record("add", (a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc
    out = _t(a.data * b.data)
    if tape is not None:
        a_d, b_d = a.data, b.data

        def bwd(g: np.ndarray) -> tuple:
            return _unbroadcast(g * b_d, a_d.shape), _unbroadcast(g * a_d, b_d.shape)

        tape.record("mul", (a, b), out, bwd)
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = _t(a.data * c)
    if tape is not None:
        tape.record("scale", (a,), out, lambda g: (g * c,))
    return out


def reshape(a: Tensor, shape: Sequence[int], tape: Tape | None = None) -> Tensor:
    out = _t(a.data.reshape(tuple(shape)))
    if tape is not None:
        a_shape = a.shape
        tape.record("reshape", (a,), out, lambda g: (g.reshape(a_shape),))
    return out


def transpose(a: Tensor, axes: Sequence[int], tape: Tape | None = None) -> Tensor:
    axes = tuple(axes)
    out = _t(np.transpose(a.data, axes))
    if tape is not None:
        inv = tuple(np.argsort(axes))
        tape.record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))
    return out


def slice_rows(a: Tensor, n: int, tape: Tape | None = None) -> Tensor:
    if not 1 <= n <= a.shape[0]:
        raise ShapeError(f"slice_rows: n={n} outside rows of {a.shape}")
    out = _t(a.data[:n])
    if tape is not None:
        a_shape = a.shape

        def bwd(g: np.ndarray) -> tuple:
            full = np.zeros(a_shape, dtype=np.float64)
            full[:n] = g
            return (full,)

        tape.record("slice_rows", (a,), out, bwd)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    out = _t(table.data[ids])
    if tape is not None:
        t_shape = table.shape

        def bwd(g: np.ndarray) -> tuple:
            gt = np.zeros(t_shape, dtype=np.float64)
            np.add.at(gt, ids, g)
            return (gt,)

        tape.record("embedding_lookup", (table,), out, bwd)
    return out


def sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.data
    out_d = np.empty_like(x)
    pos = x >= 0
    out_d[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_d[~pos] = ex / (1.0 + ex)
    out = _t(out_d)
    if tape is not None:
        tape.record("sigmoid", (a,), out, lambda g: (g * out_d * (1.0 - out_d),))
    return out


def gelu(a: Tensor, tape: Tape | None = None) -> Tensor:
    """tanh-approximate GELU (smooth everywhere, FD-check friendly)."""
    # x + c*x^3 == x*(1 + c*x^2); buffers reused to limit allocation churn
    x = a.data
    th = np.multiply(x, x)
    th *= _GELU_C
    th += 1.0
    th *= x
    th *= _GELU_K
    np.tanh(th, out=th)
    out_d = th + 1.0
    out_d *= x
    out_d *= 0.5
    out = _t(out_d)
    if tape is not None:

        def bwd(g: np.ndarray) -> tuple:
            d_inner = np.multiply(x, x)
            d_inner *= 3.0 * _GELU_C
            d_inner += 1.0
            d_inner *= _GELU_K
            d_inner *= 1.0 - th * th
            d_inner *= x
            d_inner += 1.0 + th
            d_inner *= 0.5
            d_inner *= g
            return (d_inner,)

        tape.record("gelu", (a,), out, bwd)
    return out


def softmax(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise (last axis), max-subtracted."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out_d = e / e.sum(axis=-1, keepdims=True)
    out = _t(out_d)
    if tape is not None:

        def bwd(g: np.ndarray) -> tuple:
            dot = (g * out_d).sum(axis=-1, keepdims=True)
            return (out_d * (g - dot),)

        tape.record("softmax", (a,), out, bwd)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYERNORM_EPS, tape: Tape | None = None) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = _t(xhat * gain.data + bias.data)
    if tape is not None:
        g_d = gain.data

        def bwd(g: np.ndarray) -> tuple:
            lead = tuple(range(g.ndim - 1))
            d_gain = (g * xhat).sum(axis=lead)
            d_bias = g.sum(axis=lead)
            dxhat = g * g_d
            dx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            return dx, d_gain, d_bias

        tape.record("layer_norm", (a, gain, bias), out, bwd)
    return out


def mean_pool(a: Tensor, lengths: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over the first ``lengths[b]`` sequence positions of each row.

    Input (B, S, D) with 1 <= lengths[b] <= S; padded positions contribute
    exactly nothing.
    """
    if a.data.ndim != 3:
        raise ShapeError(f"mean_pool expects (B, S, D), got {a.shape}")
    batch, seq, _ = a.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,) or lengths.min() < 1 or lengths.max() > seq:
        raise ShapeError(f"mean_pool: bad lengths for input {a.shape}")
    w = np.where(np.arange(seq)[None, :] < lengths[:, None],
                 1.0 / lengths[:, None], 0.0)
    out = _t(np.einsum("bsd,bs->bd", a.data, w))
    if tape is not None:
        tape.record("mean_pool", (a,), out,
                    lambda g: (g[:, None, :] * w[:, :, None],))
    return out


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _t(np.asarray(a.data.sum()))
    if tape is not None:
        a_shape = a.shape
        tape.record("sum_all", (a,), out,
                    lambda g: (np.full(a_shape, float(g), dtype=np.float64),))
    return out


def bce_with_logits(z: Tensor, targets: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Elementwise max(z,0) - z*y + ln(1+e^-|z|); finite for |z| up to 1e4+.

    ``targets`` is a constant array (labels), never differentiated.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    x = z.data
    out = _t(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))
    if tape is not None:
        sig = sigmoid(z).data
        tape.record("bce_with_logits", (z,), out, lambda g: (g * (sig - y),))
    return out


def soft_bce(q: Tensor, targets: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Elementwise -(p ln q + (1-p) ln(1-q)) on probabilities.

    Both sides are clamped to [1e-7, 1-1e-7]; ``targets`` is constant.
    Exactly stationary in q at q == p.
    """
    p = np.asarray(targets, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"soft_bce: probs {q.shape} vs targets {p.shape}")
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    qc = np.clip(q.data, lo, hi)
    pc = np.clip(p, lo, hi)
    out = _t(-(pc * np.log(qc) + (1.0 - pc) * np.log1p(-qc)))
    if tape is not None:
        gate = (q.data > lo) & (q.data < hi)

        def bwd(g: np.ndarray) -> tuple:
            return (g * ((1.0 - pc) / (1.0 - qc) - pc / qc) * gate,)

        tape.record("soft_bce", (q,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[Sequence[Tensor], Tape | None], Tensor],
               params: Sequence[Tensor],
               eps: float = 1e-5,
               n_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params, tape)`` must return a scalar Tensor recomputed from the
    current values of ``params``. Coordinates are a deterministic sample of
    at least ``n_coords`` spread over every parameter tensor; the error per
    coordinate is |g_analytic - g_fd| / max(1, |g_fd|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must be positive and at most 1e-2")
    tape = Tape()
    tape.watch(*params)
    loss = f(params, tape)
    grads = backward(tape, loss)

    rng = np.random.default_rng(seed)
    total = sum(p.size for p in params)
    max_rel = 0.0
    for p in params:
        take = min(p.size, max(1, math.ceil(n_coords * p.size / total)))
        coords = np.sort(rng.choice(p.size, size=take, replace=False))
        analytic = grads[p].values
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(params, None).item()
            flat[i] = orig - eps
            f_minus = f(params, None).item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"f non-finite at perturbed coordinate {i}")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(analytic[i] - g_fd) / max(1.0, abs(g_fd))
            max_rel = max(max_rel, rel)
    return max_rel
