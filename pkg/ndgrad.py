#!/usr/bin/env python3
"""
🧮 NDGRAD - MINIMAL REVERSE-MODE DIFFERENTIABLE ARRAYS
======================================================

Exactly the primitives the detector needs, on 64-bit numpy buffers:

- elementwise: add, sub, mul, div, exp, log, power, relu, sigmoid, absolute,
  maximum, minimum
- reductions: sum, mean, softmax over one axis
- structure: reshape, transpose, expand, concat, gather
- vision: conv2d (zero padding, stride), max_pool2d (2x2, stride 2),
  bilinear_sample (clamped fractional coordinates)

Shape rules are explicit: the only implicit broadcast is a shape-() scalar
against an array. Anything else must go through `reshape` + `expand`.

Operations are recorded on the active `Graph` (a context manager) when any
input requires a gradient; `backward(graph, loss)` accumulates into leaves.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Input shapes do not conform to an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """A non-finite value reached a primitive while strict mode is on."""


_strict = False


def set_strict(flag: bool) -> None:
    global _strict
    _strict = bool(flag)


def is_strict() -> bool:
    return _strict


class Array:
    """Dense float64 array with an optional gradient buffer"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # leaves get their buffer now, graph outputs on their first backward
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Array":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Array":
        return Array._wrap(self.data, False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: Tuple[Array, ...]
    output: Array
    backward: BackwardFn


class Graph:
    """Topologically ordered record of the operations of one step"""

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()


_local = threading.local()


def _graph_stack() -> List[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


def as_array(value: Union[Array, Scalar, np.ndarray]) -> Array:
    if isinstance(value, Array):
        return value
    return Array(value)


def _check_finite(op: str, arrays: Sequence[Array]) -> None:
    if not _strict:
        return
    for arr in arrays:
        if not np.all(np.isfinite(arr.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {arr.shape}")


def _record(op: str, inputs: Sequence[Array], data: np.ndarray, backward_fn: BackwardFn) -> Array:
    needs_grad = any(arr.requires_grad for arr in inputs)
    out = Array._wrap(data, needs_grad)
    graph = current_graph()
    if needs_grad and graph is not None:
        graph.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def _shape_error(op: str, *shapes: Tuple[int, ...], detail: str = "") -> ShapeError:
    listed = ", ".join(str(tuple(s)) for s in shapes)
    suffix = f" ({detail})" if detail else ""
    return ShapeError(f"{op}: incompatible shapes {listed}{suffix}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _binary_shapes(op: str, a: Array, b: Array) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise _shape_error(op, a.shape, b.shape, detail="only scalar-with-array broadcasting is allowed")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes("add", a, b)
    _check_finite("add", (a, b))
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes("sub", a, b)
    _check_finite("sub", (a, b))
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes("mul", a, b)
    _check_finite("mul", (a, b))
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes("div", a, b)
    _check_finite("div", (a, b))
    out = a.data / b.data

    def backward(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))
    return _record("div", (a, b), out, backward)


def exp(x: Array) -> Array:
    _check_finite("exp", (x,))
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Array) -> Array:
    _check_finite("log", (x,))
    if np.any(x.data <= 0.0):
        raise ValueError(f"log: input of shape {x.shape} has non-positive entries")
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def power(x: Array, exponent: float) -> Array:
    _check_finite("power", (x,))
    c = float(exponent)
    out = np.power(x.data, c)
    return _record("power", (x,), out, lambda g: (g * c * np.power(x.data, c - 1.0),))


def relu(x: Array) -> Array:
    _check_finite("relu", (x,))
    mask = x.data > 0.0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Array) -> Array:
    _check_finite("sigmoid", (x,))
    out = expit(x.data)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def absolute(x: Array) -> Array:
    _check_finite("absolute", (x,))
    return _record("absolute", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def maximum(a, b) -> Array:
    """Elementwise max; on ties the gradient goes to `a`"""
    a, b = as_array(a), as_array(b)
    _binary_shapes("maximum", a, b)
    _check_finite("maximum", (a, b))
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _record("maximum", (a, b), out,
                   lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)))


def minimum(a, b) -> Array:
    """Elementwise min; on ties the gradient goes to `a`"""
    a, b = as_array(a), as_array(b)
    _binary_shapes("minimum", a, b)
    _check_finite("minimum", (a, b))
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _record("minimum", (a, b), out,
                   lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)))


def clamp(x: Array, lo: Optional[float] = None, hi: Optional[float] = None) -> Array:
    if lo is not None:
        x = maximum(x, float(lo))
    if hi is not None:
        x = minimum(x, float(hi))
    return x


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Array:
    """[n,k]@[k,m] -> [n,m] or batched [B,n,k]@[B,k,m] -> [B,n,m]"""
    a, b = as_array(a), as_array(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or \
         (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    if not ok:
        raise _shape_error("matmul", a.shape, b.shape)
    _check_finite("matmul", (a, b))
    out = np.matmul(a.data, b.data)

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return np.matmul(g, bt), np.matmul(at, g)
    return _record("matmul", (a, b), out, backward)


# ---------------------------------------------------------------- reductions

def _normalize_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(x: Array, axis: Optional[int] = None, keepdims: bool = False) -> Array:  # noqa: A001
    _check_finite("sum", (x,))
    if axis is None:
        out = np.asarray(x.data.sum())
        if keepdims:
            out = out.reshape((1,) * x.ndim)
        return _record("sum", (x,), out, lambda g: (np.full(x.shape, float(g.reshape(-1)[0])),))
    ax = _normalize_axis("sum", axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record("sum", (x,), out, backward)


def mean(x: Array, axis: Optional[int] = None, keepdims: bool = False) -> Array:
    count = x.size if axis is None else x.shape[_normalize_axis("mean", axis, x.ndim)]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(1, count))


def softmax(x: Array, axis: int = -1) -> Array:
    _check_finite("softmax", (x,))
    ax = _normalize_axis("softmax", axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)
    return _record("softmax", (x,), out, backward)


# ---------------------------------------------------------------- structure

def reshape(x: Array, shape: Sequence[int]) -> Array:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise _shape_error("reshape", x.shape, shape) from e
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Array, axes: Sequence[int]) -> Array:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise _shape_error("transpose", x.shape, detail=f"axes {axes} is not a permutation")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def expand(x: Array, shape: Sequence[int]) -> Array:
    """Repeat size-1 axes to `shape` (same rank required)"""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim or any(xs != s and xs != 1 for xs, s in zip(x.shape, shape)):
        raise _shape_error("expand", x.shape, shape)
    axes = tuple(i for i, (xs, s) in enumerate(zip(x.shape, shape)) if xs != s)
    out = np.broadcast_to(x.data, shape).copy()
    return _record("expand", (x,), out, lambda g: (g.sum(axis=axes, keepdims=True) if axes else g,))


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [as_array(a) for a in arrays]
    if not arrays:
        raise ShapeError("concat: empty input list")
    ndim = arrays[0].ndim
    ax = _normalize_axis("concat", axis, ndim)
    for arr in arrays[1:]:
        if arr.ndim != ndim or any(s != t for i, (s, t) in enumerate(zip(arr.shape, arrays[0].shape)) if i != ax):
            raise _shape_error("concat", *[a.shape for a in arrays])
    _check_finite("concat", arrays)
    out = np.concatenate([a.data for a in arrays], axis=ax)
    splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
    return _record("concat", tuple(arrays), out, lambda g: tuple(np.split(g, splits, axis=ax)))


def gather(x: Array, indices: Sequence[int], axis: int = 0) -> Array:
    """Select entries along `axis` by an index list (repeats allowed)"""
    ax = _normalize_axis("gather", axis, x.ndim)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise _shape_error("gather", x.shape, detail=f"index out of range for axis {ax}")
    out = np.take(x.data, idx, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gx,)
    return _record("gather", (x,), out, backward)


# ---------------------------------------------------------------- vision

def conv2d(x: Array, weight: Array, bias: Optional[Array] = None, stride: int = 1, padding: int = 0) -> Array:
    """Cross-correlation of x [C,H,W] or [N,C,H,W] with weight [O,C,k,k], zero padding"""
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or weight.ndim != 4 or weight.shape[1] != x.shape[-3] \
            or weight.shape[2] != weight.shape[3]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("conv2d", weight.shape, bias.shape, detail="bias must be [O]")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_finite("conv2d", inputs)
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, _, k, _ = weight.shape
    s, p = int(stride), int(padding)
    if h + 2 * p < k or w + 2 * p < k:
        raise _shape_error("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w]
        gx = gx if batched else gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _record("conv2d", inputs, out, backward)


def max_pool2d(x: Array) -> Array:
    """2x2 max pool, stride 2, ceil mode: [C,H,W] -> [C,ceil(H/2),ceil(W/2)]"""
    if x.ndim != 3:
        raise _shape_error("max_pool2d", x.shape, detail="expected [C,H,W]")
    _check_finite("max_pool2d", (x,))
    c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    padded = np.full((c, 2 * ho, 2 * wo), -np.inf)
    padded[:, :h, :w] = x.data
    blocks = padded.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros((c, ho, wo, 4))
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gpad = gblocks.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        return (gpad[:, :h, :w].copy(),)
    return _record("max_pool2d", (x,), out, backward)


def bilinear_sample(x: Array, u: np.ndarray, v: np.ndarray) -> Array:
    """Sample x [C,H,W] at fractional (u=col, v=row) points -> [C,P]

    Cell (r, c) holds the value at (u=c, v=r). Points outside the grid are
    clamped to the valid rectangle.
    """
    if x.ndim != 3:
        raise _shape_error("bilinear_sample", x.shape, detail="expected [C,H,W]")
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise _shape_error("bilinear_sample", u.shape, v.shape)
    _check_finite("bilinear_sample", (x,))
    c, h, w = x.shape
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0
    corners = ((y0, x0, (1.0 - fy) * (1.0 - fx)), (y0, x1, (1.0 - fy) * fx),
               (y1, x0, fy * (1.0 - fx)), (y1, x1, fy * fx))
    out = np.zeros((c, u.size))
    for yy, xx, wt in corners:
        out += x.data[:, yy, xx] * wt

    def backward(g):
        gt = np.zeros((h, w, c))
        for yy, xx, wt in corners:
            np.add.at(gt, (yy, xx), (g * wt).T)
        return (gt.transpose(2, 0, 1),)
    return _record("bilinear_sample", (x,), out, backward)


# ---------------------------------------------------------------- composites

def linear(x: Array, weight: Array, bias: Optional[Array] = None) -> Array:
    """x [N,i] @ weight [i,o] (+ bias [o])"""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, expand(reshape(bias, (1, bias.shape[0])), out.shape))
    return out


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis of x [N,d]"""
    n, d = x.shape
    mu = expand(mean(x, axis=1, keepdims=True), (n, d))
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=1, keepdims=True)
    inv = expand(power(add(var, eps), -0.5), (n, d))
    normed = mul(centered, inv)
    scale = expand(reshape(gamma, (1, d)), (n, d))
    shift = expand(reshape(beta, (1, d)), (n, d))
    return add(mul(normed, scale), shift)


# ---------------------------------------------------------------- backward

def backward(graph: Graph, loss: Array) -> None:
    """Accumulate dLoss/dx into every requires_grad array reachable from loss"""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any array that requires grad")
    pending: Dict[int, Tuple[Array, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(graph.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        out, g = entry
        _accumulate(out, g)
        for arr, ga in zip(node.inputs, node.backward(g)):
            if ga is None or not arr.requires_grad:
                continue
            key = id(arr)
            if key in pending:
                pending[key] = (arr, pending[key][1] + ga)
            else:
                pending[key] = (arr, np.asarray(ga, dtype=np.float64).reshape(arr.shape))
    for arr, g in pending.values():
        _accumulate(arr, g)


def _accumulate(arr: Array, g: np.ndarray) -> None:
    if arr.grad is None:
        arr.grad = np.array(g, dtype=np.float64).reshape(arr.shape)
    else:
        arr.grad += g.reshape(arr.shape)


def grad_check(f: Callable[[Array], Array], x: Array, step: float = 1e-6) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|)"""
    if not 0.0 < step <= 1e-3:
        raise ValueError(f"grad_check: step must be in (0, 1e-3], got {step}")
    leaf = Array(x.data, requires_grad=True)
    with Graph() as graph:
        y = f(leaf)
        if y.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
        backward(graph, y)
    analytic = leaf.grad.reshape(-1).copy()
    flat = x.data.reshape(-1).copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = f(Array(flat.reshape(x.shape))).item()
        flat[i] = original - step
        minus = f(Array(flat.reshape(x.shape))).item()
        flat[i] = original
        numeric[i] = (plus - minus) / (2.0 * step)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------- parameters

def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = 1.0) -> Array:
    """Fan-in scaled uniform init (variance gain^2 / fan_in)"""
    bound = gain * np.sqrt(3.0 / max(1, fan_in))
    return Array(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int], fill: float = 0.0) -> Array:
    return Array(np.full(tuple(shape), float(fill)), requires_grad=True)


class Module:
    """Named parameter container; children are walked in registration order"""

    def __init__(self):
        self._params: Dict[str, Array] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, array: Array) -> Array:
        array.name = name
        self._params[name] = array
        return array

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Array]]:
        for name, arr in self._params.items():
            yield f"{prefix}{name}", arr
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Array]:
        return [arr for _, arr in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([arr.size for arr in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for arr in self.parameters():
            arr.zero_grad()
