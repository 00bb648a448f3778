"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the innermost active :class:`Tape`. Nothing is
recorded when no tape is active or when no input requires a gradient, which
makes plain forward evaluation cheap.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(square(x))
    >>> grads = tape.backward(loss)
    >>> grads[x].tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class NumericalDomainError(FloatingPointError):
    """Raised on log/sqrt of non-positive input or a non-finite forward result."""


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager that suspends recording on any enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside are recorded when any input
    requires a gradient. A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
        return backward(loss, self, accumulate=accumulate)


def backward(loss: Tensor, tape: Tape, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Returns a map from every requires-grad leaf reached to its gradient. When
    ``accumulate`` is true the gradient is also added into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True
    if not loss.requires_grad:
        return {}

    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        result[leaf] = g
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and register its vector-Jacobian product.

    ``backward_fn(g)`` must return one gradient (or None) per parent. Custom
    fused ops (e.g. the unrolled Sinkhorn solver) are built with this.
    """
    if not np.all(np.isfinite(data)):
        raise NumericalDomainError("non-finite value produced in forward pass")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, tuple(parents), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalDomainError("log of non-positive value")
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalDomainError("sqrt of non-positive value")
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,))


def xlogx(a) -> Tensor:
    """x*log(x) with the convention 0*log(0) = 0; negative input is an error."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise NumericalDomainError("xlogx of negative value")
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, x * np.log(safe), 0.0)
    # derivative diverges at 0; clip to the smallest positive double there
    dlog = np.log(np.where(pos, x, np.finfo(np.float64).tiny)) + 1.0
    return make_op(out, (a,), lambda g: (g * dlog,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return scalar_mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return make_op(out if keepdims else np.squeeze(out, axis=axis), (a,), bwd)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """numpy.matmul semantics, including 1-D promotion and batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul does not accept scalars")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bwd(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_op(out, (a, b), bwd)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_op(xhat, (a,), bwd)


def cosine_distance(x, y) -> Tensor:
    """1 - <x, y> / (|x| |y|) along the last axis; leading axes broadcast.

    Each norm is floored at ``NORM_FLOOR`` so zero vectors give distance 1.
    """
    x, y = as_tensor(x), as_tensor(y)
    xd, yd = x.data, y.data
    if xd.shape[-1] != yd.shape[-1]:
        raise ValueError(f"cosine_distance dim mismatch {xd.shape} vs {yd.shape}")
    nx_raw = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    ny_raw = np.sqrt((yd * yd).sum(axis=-1, keepdims=True))
    nx = np.maximum(nx_raw, NORM_FLOOR)
    ny = np.maximum(ny_raw, NORM_FLOOR)
    dot = (xd * yd).sum(axis=-1, keepdims=True)
    denom = nx * ny
    out = 1.0 - dot / denom

    def bwd(g):
        g = g[..., None]
        # norm derivative vanishes where the floor is active
        kx = np.where(nx_raw > NORM_FLOOR, dot / (nx * nx * denom), 0.0)
        ky = np.where(ny_raw > NORM_FLOOR, dot / (ny * ny * denom), 0.0)
        gx = -g * (yd / denom - kx * xd)
        gy = -g * (xd / denom - ky * yd)
        return unbroadcast(gx, xd.shape), unbroadcast(gy, yd.shape)

    return make_op(out[..., 0], (x, y), bwd)


# ---------------------------------------------------------------- shape ops


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in ts]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, tuple(ts), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index) -> Tensor:
    """Basic/advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None
                for i in (index if isinstance(index, tuple) else (index,)))

    def bwd(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(a.data[index]), (a,), bwd)


# ---------------------------------------------------------------- dispatcher

_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "layer_norm": layer_norm,
    "cosine_distance": cosine_distance,
    "xlogx": xlogx,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch ``op_kind`` by name, e.g. ``forward_op("softmax", x, axis=0)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


def op_kinds() -> list[str]:
    return sorted(_OPS)


# ---------------------------------------------------------------- verification


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, coords=None) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``fn`` maps a tensor to a scalar tensor. ``coords`` optionally restricts
    the check to a subset of flat indices.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    analytic = tape.backward(out, accumulate=False).get(x, np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi.reshape(x0.shape))).item()
        f_lo = fn(Tensor(lo.reshape(x0.shape))).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericalDomainError(f"non-finite function value at coordinate {i}")
        numeric = (f_hi - f_lo) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
