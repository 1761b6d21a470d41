"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The engine is define-by-run: every operation builds a node holding its parent
tensors and a closure that maps the output gradient to parent gradients.
``backward`` walks the resulting DAG once in reverse topological order and
deposits gradients on leaf tensors.

Design rules enforced here:

* float64 everywhere; complex data never enters the graph (callers split
  real/imaginary planes).
* every operation validates its output (and every backward step its
  gradients) for NaN/inf and raises ``NonFiniteError`` instead of silently
  propagating.
* elementwise ops follow numpy broadcasting; gradients are summed back to
  each parent's shape.
* all kernels are deterministic: fixed reduction order, no threading
  dependence beyond sequential BLAS calls.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

Array = np.ndarray


def _check_finite(arr: Array, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum axes that were broadcast from length 1
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``grad`` is populated (overwritten, not accumulated) on leaf tensors by
    ``backward``. Interior nodes never keep gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if np.iscomplexobj(data):
            raise ShapeError("complex data is not allowed in the autodiff graph")
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array, ...]] | None = None
        self._op = "leaf"

    # -- construction of op outputs ------------------------------------
    @classmethod
    def _from_op(cls, data: Array, parents: tuple["Tensor", ...], op: str,
                 vjp: Callable[[Array], tuple[Array, ...]]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._op = op
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:  # prune the graph below non-differentiable subtrees
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -----------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    """Lift python scalars / ndarrays into constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, (a, b), "add", vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(data, (a, b), "sub", vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g: Array):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(data, (a, b), "mul", vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    # a zero denominator surfaces as NonFiniteError, not a numpy warning
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g: Array):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(data, (a, b), "div", vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Array):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), "neg", vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    # overflow surfaces as NonFiniteError, not a numpy warning
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def vjp(g: Array):
        return (g * data,)

    return Tensor._from_op(data, (a,), "exp", vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    # subgradient at 0 is taken as 0
    mask = a.data > 0.0

    def vjp(g: Array):
        return (g * mask,)

    return Tensor._from_op(data, (a,), "relu", vjp)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid(a.data)

    def vjp(g: Array):
        return (g * data * (1.0 - data),)

    return Tensor._from_op(data, (a,), "sigmoid", vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def vjp(g: Array):
        return (g * _sigmoid(a.data),)

    return Tensor._from_op(data, (a,), "softplus", vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    old = a.shape

    def vjp(g: Array):
        return (g.reshape(old),)

    return Tensor._from_op(data, (a,), "reshape", vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g: Array):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._from_op(data, (a,), "transpose", vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        grads = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(grads)

    return Tensor._from_op(data, tuple(ts), "concat", vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow out of range: axis {axis} has {a.shape[axis]} entries, "
            f"requested [{start}, {start + length})")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])
    full_shape = a.shape

    def vjp(g: Array):
        out = np.zeros(full_shape, dtype=np.float64)
        out[idx] = g
        return (out,)

    return Tensor._from_op(data, (a,), "narrow", vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())
    shape = a.shape

    def vjp(g: Array):
        return (np.broadcast_to(g, shape).astype(np.float64, copy=True),)

    return Tensor._from_op(data, (a,), "reduce_sum", vjp)


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    if n == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    data = np.asarray(a.data.mean())
    shape = a.shape

    def vjp(g: Array):
        return (np.broadcast_to(g / n, shape).astype(np.float64, copy=True),)

    return Tensor._from_op(data, (a,), "reduce_mean", vjp)


def reduce_abs_mean(a) -> Tensor:
    """Mean of absolute values; the L1 building block.

    The subgradient of |x| at 0 is taken as 0 (np.sign convention).
    """
    a = as_tensor(a)
    n = a.size
    if n == 0:
        raise ShapeError("reduce_abs_mean of an empty tensor")
    data = np.asarray(np.abs(a.data).mean())
    sgn = np.sign(a.data)

    def vjp(g: Array):
        return (g * sgn / n,)

    return Tensor._from_op(data, (a,), "reduce_abs_mean", vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g: Array):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(data, (a, b), "matmul", vjp)


# ---------------------------------------------------------------------------
# neural-network kernels
# ---------------------------------------------------------------------------

def conv2d(x, w, b) -> Tensor:
    """2-D cross-correlation with same-size zero padding, stride 1.

    ``x``: (N, C, H, W); ``w``: (O, C, k, k) with k odd; ``b``: (O,).
    Output: (N, O, H, W). Implemented as im2col + one matmul so the heavy
    lifting lands in BLAS; the backward pass scatters column gradients back
    with a k*k loop of shifted adds.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")

    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))       # (N, C, H, W, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    # diverged weights overflow here; the finite check turns that into an error
    with np.errstate(over="ignore", invalid="ignore"):
        out = cols @ wmat.T + b.data[None, :]
    data = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))

    def vjp(g: Array):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
        dw = (gmat.T @ cols).reshape(o, c, k, k)
        db = gmat.sum(axis=0)
        dcols = gmat @ wmat                                   # (N*H*W, C*k*k)
        dwin = dcols.reshape(n, h, wd, c, k, k)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + h, dj:dj + wd] += dwin[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd])
        return dx, dw, db

    return Tensor._from_op(data, (x, w, b), "conv2d", vjp)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean / unit variance.

    Statistics use the biased variance over the H*W plane. ``gamma`` and
    ``beta`` are per-channel scale and shift, shape (C,).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("instance_norm needs at least 2 spatial elements per plane")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm affine parameters must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}")

    # diverged activations overflow here; the finite check turns that into an error
    with np.errstate(over="ignore", invalid="ignore"):
        mu = x.data.mean(axis=(2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g: Array):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        mean_d = dxhat.mean(axis=(2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv * (dxhat - mean_d - xhat * mean_dx)
        return dx, dgamma, dbeta

    return Tensor._from_op(data, (x, gamma, beta), "instance_norm", vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order  # parents precede children


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, Array]:
    """Backpropagate from a scalar loss.

    Sets ``grad`` (overwriting any previous value) on every reachable leaf
    tensor with ``requires_grad``. If ``params`` is given, every listed
    tensor is guaranteed a gradient afterwards, zeros when unreachable.
    Returns the map id(tensor) -> gradient for the touched leaves.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("loss does not depend on any tensor with requires_grad")

    order = _topological_order(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, Array] = {}

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g
                leaf_grads[id(node)] = g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            _check_finite(pg, f"backward:{node._op}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    if params is not None:
        for p in params:
            if id(p) not in leaf_grads:
                p.grad = np.zeros_like(p.data)
                leaf_grads[id(p)] = p.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradcheckResult:
    """Outcome of one finite-difference comparison."""

    def __init__(self, name: str, max_rel_err: float, n_checked: int, passed: bool):
        self.name = name
        self.max_rel_err = max_rel_err
        self.n_checked = n_checked
        self.passed = passed

    def __repr__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"GradcheckResult({self.name}: max_rel_err={self.max_rel_err:.3e}, n={self.n_checked}, {status})"


def gradcheck(f: Callable[..., Tensor], arrays: Sequence[Array], *,
              h: float = 1e-6, rtol: float = 1e-5, floor: float = 1e-8,
              max_coords_per_input: int | None = None,
              rng: np.random.Generator | None = None,
              name: str = "f") -> GradcheckResult:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps len(arrays) tensors to a scalar tensor. Every coordinate of
    every input is probed unless ``max_coords_per_input`` caps the count, in
    which case coordinates are drawn without replacement from ``rng``.
    Relative error uses |a - n| / max(|a|, |n|, floor); absolute differences
    at or below ``floor`` count as agreement, because central differences on
    an O(1) objective carry ~1e-9 round-off noise, which would otherwise be
    misread as error wherever the true derivative is exactly zero (e.g. a
    conv bias immediately followed by instance normalization).
    """
    # private contiguous copies so the central-difference perturbations below
    # write into the same memory the re-evaluations read
    arrays = [np.array(a, dtype=np.float64, order="C") for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = f(*tensors)
    backward(loss, params=tensors)
    analytic = [t.grad.copy() for t in tensors]

    max_rel = 0.0
    n_checked = 0
    for i, base in enumerate(arrays):
        flat = base.ravel()
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = np.arange(n)
        for j in coords:
            j = int(j)
            orig = flat[j]
            flat[j] = orig + h
            plus = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - h
            minus = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[i].ravel()[j]
            diff = abs(a - numeric)
            rel = 0.0 if diff <= floor else diff / max(abs(a), abs(numeric), floor)
            if rel > max_rel:
                max_rel = rel
            n_checked += 1
    return GradcheckResult(name, max_rel, n_checked, max_rel < rtol)
