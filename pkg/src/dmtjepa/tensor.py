"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Everything is a row-major float64 numpy array wrapped in a :class:`Tensor`.
Ops record their inputs and a gradient closure on the output tensor; calling
:func:`backward` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into every tensor that requires
them. The op set is deliberately small: exactly what a small pre-norm
transformer needs, plus a central finite-difference oracle used to verify
every differentiable primitive.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "DegenerateInputError",
    "NonFiniteError",
    "no_grad",
    "set_debug_checks",
    "debug_checks_enabled",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "gather_rows",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "max_rows",
    "log",
    "softmax",
    "layernorm",
    "gelu",
    "l2_normalize",
    "cosine",
    "build_tape",
    "backward",
    "finite_difference_grad",
]


class TensorError(Exception):
    """Base class for tensor-library failures."""


class ShapeError(TensorError):
    """Operand shapes do not satisfy an op's contract."""


class DegenerateInputError(TensorError):
    """Input is in a regime where the op has no meaningful answer."""


class NonFiniteError(TensorError):
    """A NaN or Inf was produced while debug checks are enabled."""


# Debug mode scans every created tensor for NaN/Inf. Off by default; the
# test suite switches it on.
_DEBUG_CHECKS = False

# While False, ops do not record gradient closures (used for the frozen
# target-side forward passes).
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


@contextlib.contextmanager
def no_grad():
    """Disable gradient recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff.

    ``grad`` is allocated lazily: it is ``None`` until a backward pass (or an
    explicit accumulation) touches the tensor, and only tensors with
    ``requires_grad`` ever receive one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _grad_fn: Callable | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap an op output, recording the gradient closure when tracking is on."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


# ----------------------------------------------------------------------
# Elementwise and structural ops
# ----------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, a 1-D row broadcast over a matrix, or a scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,), "add_scalar")
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    # Row broadcast: (m, n) + (n,), in either argument order.
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_row")
    if a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g.sum(axis=0), g), "add_row")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients flow to both operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree ({a.shape} x {b.shape})")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    # Materialized copy: the library keeps no strided views.
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(np.reshape(a.data, shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate gradient."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if idx.size == 0:
        raise DegenerateInputError("gather_rows with an empty index set")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError("gather_rows index out of range")
    shape = a.shape

    def grad_fn(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(a.data[idx], (a,), grad_fn, "gather_rows")


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)
    shape = a.shape

    def grad_fn(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, key, g)
        return (buf,)

    return _make(np.array(out, copy=True), (a,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise DegenerateInputError("concat of zero tensors")
    if axis not in (0, 1):
        raise ShapeError("concat supports axis 0 or 1 only")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    splits = np.cumsum(extents)[:-1]

    def grad_fn(g):
        return tuple(np.array(p, copy=True) for p in np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), grad_fn, "concat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.full(shape, float(g), dtype=np.float64),)
        ge = g if keepdims else np.expand_dims(g, axis=axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def grad_fn(g):
        if axis is None:
            return (np.full(shape, float(g) / n, dtype=np.float64),)
        ge = g if keepdims else np.expand_dims(g, axis=axis)
        return (np.broadcast_to(ge, shape).copy() / n,)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn, "mean")


def max_rows(a: Tensor) -> Tensor:
    """Coordinatewise max over the rows of an (n, d) tensor -> (d,).

    Gradient routes to the first row attaining the max in each column.
    """
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"max_rows expects a non-empty 2-D tensor, got {a.shape}")
    winners = np.argmax(a.data, axis=0)
    shape = a.shape

    def grad_fn(g):
        buf = np.zeros(shape, dtype=np.float64)
        buf[winners, np.arange(shape[1])] = g
        return (buf,)

    return _make(a.data[winners, np.arange(shape[1])], (a,), grad_fn, "max_rows")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


# ----------------------------------------------------------------------
# Neural-net primitives with fused analytic backward passes
# ----------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``; rows sum to 1 and are strictly positive."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    m = np.max(a.data, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("softmax row with no finite entry")
    e = np.exp(a.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), grad_fn, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gdata = gamma.data

    def grad_fn(g):
        gx = g * gdata
        mean_gx = np.mean(gx, axis=-1, keepdims=True)
        mean_gx_xhat = np.mean(gx * xhat, axis=-1, keepdims=True)
        dx = inv * (gx - mean_gx - xhat * mean_gx_xhat)
        axes = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=axes) if axes else g * xhat
        dbeta = np.sum(g, axis=axes) if axes else np.array(g, copy=True)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), grad_fn, "layernorm")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approx: str = "exact") -> Tensor:
    """x * Phi(x). ``approx='tanh'`` selects the cubic tanh approximation."""
    xd = x.data
    if approx == "exact":
        phi = 0.5 * (1.0 + erf(xd / _SQRT2))
        out = xd * phi

        def grad_fn(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            return (g * (phi + xd * pdf),)

    elif approx == "tanh":
        u = _TANH_C * (xd + 0.044715 * xd**3)
        t = np.tanh(u)
        out = 0.5 * xd * (1.0 + t)

        def grad_fn(g):
            du = _TANH_C * (1.0 + 3 * 0.044715 * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    else:
        raise ValueError(f"unknown gelu mode {approx!r}")
    return _make(out, (x,), grad_fn, f"gelu_{approx}")


_NORM_FLOOR = 1e-12


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale along ``axis`` to unit L2 norm; rejects (near-)zero vectors."""
    norms = np.linalg.norm(v.data, axis=axis, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateInputError("l2_normalize: vector norm below 1e-12")
    out = v.data / norms

    def grad_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * dot) / norms,)

    return _make(out, (v,), grad_fn, "l2_normalize")


def cosine(u, v) -> float:
    """Cosine similarity of two vectors, clipped into [-1, 1]."""
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    ud, vd = ud.ravel(), vd.ravel()
    nu, nv = np.linalg.norm(ud), np.linalg.norm(vd)
    if nu < _NORM_FLOOR or nv < _NORM_FLOOR:
        raise DegenerateInputError("cosine: zero-norm vector")
    return float(np.clip(np.dot(ud, vd) / (nu * nv), -1.0, 1.0))


# ----------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Return the recorded op graph under ``root`` in topological order.

    Every node's parents appear before the node itself; the reverse pass
    therefore touches each node exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Accumulates into existing ``grad`` buffers, so successive backward calls
    on separate graphs sum their leaf gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape):
        if node._grad_fn is None or node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if parent.requires_grad and g is not None:
                parent.accumulate_grad(g)


# ----------------------------------------------------------------------
# Verification oracle
# ----------------------------------------------------------------------

def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate by coordinate.

    ``f`` must be deterministic. Step size is restricted to [1e-6, 1e-3],
    the window where truncation and cancellation errors are both small for
    float64.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"finite-difference step {h} outside [1e-6, 1e-3]")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = np.array(x.data, dtype=np.float64, copy=True)
    flat = base.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)
