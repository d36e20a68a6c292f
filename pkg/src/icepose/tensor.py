"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op result keeps references to its parents plus a closure mapping the
output gradient to parent gradients. Nodes receive a monotonically
increasing id at creation, so inputs always precede outputs and visiting
reachable nodes in descending id order is a valid reverse topological order.

There is no implicit broadcasting. Multiplication by a Python scalar
(``scale``) is the only mixed-shape op; everything else demands equal shapes
or goes through ``expand`` / ``linear``, which tile explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_ids = itertools.count()
_debug = False
_recording = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise ``NonFiniteError``."""
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Leaf tensors (constructed directly) copy their input and reject
    non-finite values. ``grad`` is populated on leaves by ``backward`` and
    accumulates across calls until ``zero_grad`` is invoked.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        if any(d <= 0 for d in data.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor values must be finite")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        t.requires_grad = _recording and any(p.requires_grad for p in parents)
        t._parents = tuple(parents) if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        t._id = next(_ids)
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from op '{op}'")
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g

    return Tensor._result(a_data @ b_data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape [..., k], ``w`` [k, n], ``b`` [n]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    x_data, w_data = x.data, w.data
    out = x_data @ w_data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w_data.T
        gw = x_data.reshape(-1, x_data.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "linear")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return Tensor._result(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    if isinstance(c, Tensor) or np.ndim(c) != 0:
        raise DimensionError("scale: factor must be a Python/NumPy scalar")
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_K * xd**3))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return Tensor._result(out, (x,), backward, "gelu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "gelu": gelu, "scale": scale}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name to ``add``, ``sub``, ``mul``, ``gelu`` or ``scale``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``.

    The variance is the population variance; ``eps`` is added before the
    square root, so a constant row maps to ``bias``.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    g_data = gain.data

    def backward(g):
        gxhat = g * g_data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return Tensor._result(xhat * g_data + bias.data, (x, gain, bias), backward, "layer_norm")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._result(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; the gradient scatters back into zeros."""
    out = np.array(x.data[key], dtype=np.float64)
    if out.ndim and any(d == 0 for d in out.shape):
        raise DimensionError(f"index: empty selection from shape {x.shape}")
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return Tensor._result(out, (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] != ref[:ax] or t.shape[ax + 1 :] != ref[ax + 1 :]:
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Tile size-1 axes of ``x`` up to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s != d)
    out = np.array(np.broadcast_to(x.data, shape))
    return Tensor._result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = x.shape
    return Tensor._result(np.array(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    src, n = x.shape, x.size
    return Tensor._result(np.array(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),), "mean")


# --------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable leaf that requires grad.

    Gradients are *added* to ``leaf.grad``; call ``zero_grad`` on the leaves
    between optimisation steps. Returns a map from each reached leaf to its
    (accumulated) gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        g = pending.pop(node_id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaves[t] = t.grad
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg
    return leaves


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f(x) / dx.

    ``x.data`` is perturbed in place one entry at a time and restored
    afterwards, so ``f`` may either use its argument or close over ``x``.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")

    def value() -> float:
        with no_grad():
            out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.empty(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise.

    Below ``floor`` the comparison is effectively absolute. Central
    differences at h = 1e-5 carry about eps * |f| / h ~ 1e-10 of rounding
    noise, which would otherwise swamp near-zero (or exactly zero) gradients.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
