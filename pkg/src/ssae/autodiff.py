"""Small reverse-mode autodiff over float64 numpy arrays.

Only what the autoencoders need: dense and convolutional layers in NHWC
layout, a handful of activations, and reductions to a scalar loss.
Broadcasting is limited to scalar operands.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def numpy(self):
        return self.values

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name=None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules (inference on frozen weights)."""
    previous = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = previous


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every leaky-relu input evaluated inside the block.

    Finite-difference checks use it to detect perturbations that cross a
    kink, where the loss is not differentiable.
    """
    previous = getattr(_local, "kinks", None)
    _local.kinks = patterns = []
    try:
        yield patterns
    finally:
        _local.kinks = previous


def _node(values, parents, backward_fn) -> Tensor:
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(values)


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# --- graph traversal ---------------------------------------------------------


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor]

    @property
    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and not n._parents]


def trace(root: Tensor) -> Graph:
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return Graph(order)


def backward(loss: Tensor) -> Graph:
    """Overwrite ``.grad`` of every node reachable from ``loss`` with d(loss)/d(node)."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = trace(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return graph


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")
    return _node(a.values + b.values, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "sub")
    return _node(a.values - b.values, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")
    return _node(
        a.values * b.values,
        (a, b),
        lambda g: (_reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)),
    )


def square(x) -> Tensor:
    x = _lift(x)
    return _node(x.values**2, (x,), lambda g: (2.0 * x.values * g,))


def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.values)
    return _node(out, (x,), lambda g: (g * out,))


def leaky_relu(x, slope=0.1) -> Tensor:
    x = _lift(x)
    positive = x.values > 0
    if getattr(_local, "kinks", None) is not None:
        _local.kinks.append(positive)
    scale = np.where(positive, 1.0, slope)
    return _node(x.values * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


# --- shape and reductions ----------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x) -> Tensor:  # noqa: A001
    x = _lift(x)
    return _node(np.asarray(x.values.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x) -> Tensor:
    x = _lift(x)
    n = x.size
    return _node(np.asarray(x.values.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _node(a.values @ b.values, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def bias_add(x, bias) -> Tensor:
    """Add a per-channel bias along the last axis."""
    x, bias = _lift(x), _lift(bias)
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match {x.shape}")
    axes = tuple(range(x.values.ndim - 1))
    return _node(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=axes)))


# --- convolution (NHWC, weights laid out kh x kw x cin x cout) ----------------


def pad2d(x, pad: int, mode="reflect") -> Tensor:
    x = _lift(x)
    if pad == 0:
        return x
    n, h, w, c = x.shape
    if mode == "reflect" and (h <= pad or w <= pad):
        mode = "edge"
    np_mode = {"reflect": "reflect", "edge": "edge", "zeros": "constant"}[mode]
    out = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode=np_mode)

    def back(g):
        if mode == "zeros":
            return (g[:, pad:-pad, pad:-pad, :].copy(),)
        rows = _fold_axis(g, pad, h, 1, mode)
        return (_fold_axis(rows, pad, w, 2, mode),)

    return _node(out, (x,), back)


def _fold_axis(g: np.ndarray, pad: int, n: int, axis: int, mode: str) -> np.ndarray:
    core = np.take(g, np.arange(pad, pad + n), axis=axis).copy()
    for i in range(pad):
        # padded index i maps to source pad - i (reflect) or 0 (edge)
        lo = pad - i if mode == "reflect" else 0
        hi = n - 1 - (pad - i) if mode == "reflect" else n - 1
        _slice_add(core, axis, lo, np.take(g, i, axis=axis))
        _slice_add(core, axis, hi, np.take(g, pad + n + (pad - 1 - i), axis=axis))
    return core


def _slice_add(arr, axis, index, values):
    idx = [slice(None)] * arr.ndim
    idx[axis] = index
    arr[tuple(idx)] += values


def _conv_windows(n_in, k, stride):
    return (n_in - k) // stride + 1


def conv2d(x, weight, stride=1, padding="same", pad_mode="reflect") -> Tensor:
    x, weight = _lift(x), _lift(weight)
    if x.values.ndim != 4 or weight.values.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} are incompatible")
    kh, kw, cin, cout = weight.shape
    if padding == "same":
        if kh != kw or kh % 2 == 0:
            raise ShapeError("same padding needs an odd square kernel")
        x = pad2d(x, kh // 2, pad_mode)
    elif padding != "valid":
        raise ShapeError(f"unknown padding {padding!r}")
    n, h, w, _ = x.shape
    ho, wo = _conv_windows(h, kh, stride), _conv_windows(w, kw, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    xv = x.values
    wv = weight.values
    taps = [
        (i, j, (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride)))
        for i in range(kh)
        for j in range(kw)
    ]
    if kh * kw * cin <= 32:
        # narrow input: one im2col matmul is cheapest
        cols = np.empty((n, ho, wo, kh, kw, cin))
        for i, j, sl in taps:
            cols[:, :, :, i, j, :] = xv[sl]
        cols = cols.reshape(n * ho * wo, kh * kw * cin)
        wmat = wv.reshape(kh * kw * cin, cout)
        out = (cols @ wmat).reshape(n, ho, wo, cout)

        def back(g):
            g2 = g.reshape(n * ho * wo, cout)
            dw = (cols.T @ g2).reshape(wv.shape)
            dx = None
            if x.requires_grad:
                dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
                dx = np.zeros_like(xv)
                for i, j, sl in taps:
                    dx[sl] += dcols[:, :, :, i, j, :]
            return dx, dw

    else:
        # wide input: accumulate one matmul per kernel tap, no im2col buffer
        out = np.zeros((n, ho, wo, cout))
        for i, j, sl in taps:
            out += xv[sl] @ wv[i, j]

        def back(g):
            g2 = g.reshape(-1, cout)
            dw = np.empty_like(wv)
            dx = np.zeros_like(xv) if x.requires_grad else None
            for i, j, sl in taps:
                dw[i, j] = np.ascontiguousarray(xv[sl]).reshape(-1, cin).T @ g2
                if dx is not None:
                    dx[sl] += g @ wv[i, j].T
            return dx, dw

    return _node(out, (x, weight), back)


def upsample_nearest(x, factor=2) -> Tensor:
    x = _lift(x)
    if x.values.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.values, factor, axis=1), factor, axis=2)
    return _node(out, (x,), lambda g: (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),))


# --- losses ------------------------------------------------------------------


def mse(prediction, target) -> Tensor:
    """Per-element mean of squared differences."""
    prediction, target = _lift(prediction), _lift(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"mse: shapes {prediction.shape} and {target.shape} differ")
    return mean(square(sub(prediction, target)))


def gaussian_kl(mu, logvar) -> Tensor:
    """Mean per-dimension KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu, logvar = _lift(mu), _lift(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl: shapes {mu.shape} and {logvar.shape} differ")
    inner = sub(sub(add(logvar, 1.0), square(mu)), exp(logvar))
    return mul(mean(inner), -0.5)
