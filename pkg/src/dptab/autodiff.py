"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run tape: each op computes its numpy result eagerly and records a
closure that maps the output gradient to gradients for its inputs. Calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order. Leading (batch) dimensions broadcast through every op, so
the same code path serves single examples and batches.

Every op output is required to be finite; a NaN/Inf raises
:class:`~dptab.errors.NonFiniteError` at the op that produced it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError

# Finite stand-in for -inf in additive masks: exp() underflows to exactly 0.0
# in both float32 and float64, so masked entries carry no probability and no
# gradient, while tensors stay finite.
MASK_VALUE = -1.0e30

_grad_enabled = True
_per_example_mode = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference/sampling paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def per_example_tape():
    """Record ops so backward() keeps the leading batch axis in leaf gradients.

    Inside this context the forward must carry a batch axis 0 with no mixing
    across it, and the loss must be the sum over examples. Gradients of
    parameters that do not themselves carry the batch axis then come out with
    shape (batch,) + param.shape: one gradient per example, vectorized. This
    is the optimized counterpart of per-example replay; the two must agree.
    """
    global _per_example_mode
    prev = _per_example_mode
    _per_example_mode = True
    try:
        yield
    finally:
        _per_example_mode = prev


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward().

    ``parents``/``_backward`` are populated only while gradients are enabled
    and at least one input is tracked; constants fold away.
    """

    __slots__ = ("data", "parents", "grad", "requires_grad", "_backward", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self.parents)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{name}'", op=name)
    out = Tensor(data)
    if _grad_enabled and any(p.tracked for p in parents):
        out.parents = parents
        out._backward = backward
        out.name = name
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _unbroadcast_keep_batch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Like _unbroadcast, but reduce to (batch,) + shape, preserving axis 0."""
    extra = g.ndim - len(shape)
    if extra <= 0:
        return _unbroadcast(g, shape)
    if extra > 1:
        g = g.sum(axis=tuple(range(1, extra)))
    axes = tuple(i + 1 for i, s in enumerate(shape) if s == 1 and g.shape[i + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _ub():
    return _unbroadcast_keep_batch if _per_example_mode else _unbroadcast


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data + b.data
    ub = _ub()

    def bwd(g):
        return ub(g, a.data.shape), ub(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data * b.data
    ub = _ub()

    def bwd(g):
        return ub(g * b.data, a.data.shape), ub(g * a.data, b.data.shape)

    return _make(out, (a, b), bwd, "mul")


def _flat_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (..., m, k) @ (k, n) as a single flattened GEMM; faster than the
    # per-slice loop numpy uses for stacked @ 2-D
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = _flat_matmul(a.data, b.data)
    ub = _ub()
    keep_batch = ub is _unbroadcast_keep_batch

    def bwd(g):
        ga = ub(_flat_matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if not keep_batch and b.data.ndim == 2 and a.data.ndim > 2:
            # shared weight: one flattened GEMM instead of a batch of small ones
            gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = ub(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    In-place buffer reuse keeps the elementwise chain at two live arrays;
    these calls dominate CPU cache traffic in training.
    """
    xd = x.data
    u = xd * xd
    u *= xd
    u *= _GELU_A
    u += xd
    u *= _GELU_C
    np.tanh(u, out=u)
    t = u  # tanh(inner), kept for backward
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bwd(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) * c (1 + 3 a x^2)
        w = xd * xd
        w *= 3.0 * _GELU_A
        w += 1.0
        w *= _GELU_C * 0.5
        w *= xd
        w *= 1.0 - t * t
        w += 0.5 * (1.0 + t)
        w *= g
        return (w,)

    return _make(out, (x,), bwd, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    ub = _ub()

    def bwd(g):
        dxhat = g * gain.data
        dgain = ub(g * xhat, gain.data.shape)
        dbias = ub(g, bias.data.shape)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bwd, "softmax")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Fused -log softmax(logits)[target] over the last axis.

    ``targets`` is an integer array matching the leading shape of ``logits``;
    the result has that leading shape. Max-subtraction keeps the logsumexp
    stable for arbitrarily scaled (or masked) logits.
    """
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    esum = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    out = np.log(esum[..., 0]) - picked

    def bwd(g):
        p = e / esum
        np.put_along_axis(
            p, targets[..., None],
            np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1,
        )
        p *= g[..., None]
        return (p,)

    return _make(out, (logits,), bwd, "softmax_cross_entropy")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, d) at integer ``ids`` (...,) -> (..., d)."""
    ids = np.asarray(ids)
    out = table.data[ids]
    keep_batch = _per_example_mode

    def bwd(g):
        if keep_batch:
            # ids must be (batch, ...) matching g's leading axes
            b = g.shape[0]
            gt = np.zeros((b,) + table.data.shape, dtype=g.dtype)
            bidx = np.arange(b).reshape((b,) + (1,) * (ids.ndim - 1))
            np.add.at(gt, (bidx, ids), g)
        else:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), bwd, "embedding")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        if g.ndim == len(shape) + 1:  # per-example batch axis in front
            return (g.reshape((g.shape[0],) + x.data.shape),)
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        if g.ndim == len(axes) + 1:  # per-example batch axis in front
            return (g.transpose((0,) + tuple(i + 1 for i in inv)),)
        return (g.transpose(inv),)

    return _make(out, (x,), bwd, "transpose")


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with scatter-add backward."""
    out = np.ascontiguousarray(x.data[key])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(out, (x,), bwd, "slice")


def sum_(x: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), bwd, "sum")


def mean_(x: Tensor, axis: int | tuple | None = None) -> Tensor:
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(x, axis=axis), 1.0 / float(n))


def _causal_bias(t: int, dtype) -> np.ndarray:
    bias = np.zeros((t, t), dtype=dtype)
    bias[np.triu_indices(t, k=1)] = MASK_VALUE
    return bias


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal attention fused into one tape node.

    Inputs are (..., T, d) with d divisible by n_heads; position t attends to
    positions <= t only. Fusing keeps the per-example tape short, which is
    what the per-example-gradient replay path spends most of its time on.
    """
    *lead, t, d = q.data.shape
    if d % n_heads:
        raise ValueError("model width must be divisible by n_heads")
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)

    def split(a):
        return np.moveaxis(a.reshape(*lead, t, n_heads, hd), -2, -3)  # (...,H,T,hd)

    def join(a):
        return np.moveaxis(a, -3, -2).reshape(*lead, t, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale + _causal_bias(t, q.data.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = join(w @ vh)

    def bwd(g):
        gh = split(g)
        gw = gh @ np.swapaxes(vh, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) * scale
        gk = (np.swapaxes(gs, -1, -2) @ qh) * scale
        gv = np.swapaxes(w, -1, -2) @ gh
        return join(gq), join(gk), join(gv)

    return _make(out, (q, k, v), bwd, "causal_self_attention")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked tensor."""
    if loss.data.shape != ():
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.tracked and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for p, pg in zip(node.parents, node._backward(node.grad)):
            if pg is None or not p.tracked:
                continue
            if p.grad is None:
                p.grad = pg
            else:
                p.grad = p.grad + pg


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward() and collect fresh gradients for the named parameters.

    Parameters the loss does not depend on get zero gradients.
    """
    for t in params.values():
        t.grad = None
    backward(loss)
    out = {}
    for name, t in params.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return out


def per_example_gradients(
    loss_fn: Callable[[object], Tensor],
    examples: Iterable,
    params: Mapping[str, Tensor],
) -> list[dict[str, np.ndarray]]:
    """One gradient dict per example, by replaying backward per example.

    ``loss_fn(example)`` must build and return the scalar loss of a single
    example. Replay order follows ``examples``; an empty batch yields [].
    """
    return [gradients(loss_fn(ex), params) for ex in examples]
