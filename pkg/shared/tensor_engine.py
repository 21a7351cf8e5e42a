# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Minimal reverse-mode differentiation over numpy float64 arrays.

Only the layers the composition networks need: affine, conv2d (cross-correlation,
zero padding), max-pooling, ReLU, sigmoid, flatten and MSE loss, plus Adam/SGD.

Usage:
    tape = Tape()
    x = tape.constant(batch)
    h = relu(affine(x, tape.param(store['w']), tape.param(store['b'])))
    loss = mse_loss(h, y)
    backward(tape, loss)          # accumulates into store[...].grad
    Adam().step(store, lr=1e-4)   # updates trainable entries, zeroes all grads

An op is recorded only when one of its inputs requires a gradient, so frozen
sub-graphs cost nothing on the backward pass. Nodes built with tape=None (or from
plain arrays) give a pure forward evaluation.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

GROUPS = ('backbone', 'tc_head', 'cls_head')


class ShapeMismatch(ValueError):
    category = 'shape_mismatch'

    def __init__(self, what: str, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class InvalidGeometry(ValueError):
    category = 'invalid_geometry'


class GraphConsumed(RuntimeError):
    """backward() was already run on this tape"""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class Param:
    name: str
    value: np.ndarray
    group: str
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"Unknown parameter group {self.group!r}")
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeMismatch(f"gradient of {self.name}", self.value.shape, self.grad.shape)


class ParamStore:
    """Named parameters in insertion order, each tagged with a group"""

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, group: str, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValueError(f"Duplicate parameter name {name!r}")
        param = Param(name, value, group, trainable)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def in_groups(self, groups: Iterable[str]) -> List[Param]:
        groups = set(groups)
        return [p for p in self if p.group in groups]

    def set_trainable(self, groups: Iterable[str], trainable: bool) -> None:
        for param in self.in_groups(groups):
            param.trainable = trainable

    def zero_grad(self) -> None:
        for param in self:
            param.grad.fill(0.0)

    def size(self) -> int:
        """Total number of scalar parameters"""
        return int(sum(p.value.size for p in self))

    def checksum(self, groups: Iterable[str] = GROUPS) -> str:
        """sha-256 over names and raw little-endian values of the given groups"""
        digest = hashlib.sha256()
        for param in self.in_groups(groups):
            digest.update(param.name.encode('utf-8'))
            digest.update(param.value.astype('<f8').tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

class Node:
    """A value in the recorded graph; `grad` is filled by backward()"""

    __slots__ = ('value', 'requires_grad', 'grad', 'tape')

    def __init__(self, value: np.ndarray, requires_grad: bool = False, tape: Optional['Tape'] = None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


@dataclass
class _Op:
    output: Node
    inputs: Tuple[Node, ...]
    backward: Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records ops of one forward pass for a single backward traversal"""

    def __init__(self):
        self.ops: List[_Op] = []
        self._bound: List[Tuple[Node, Param]] = []
        self.consumed = False

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), requires_grad=False, tape=self)

    def leaf(self, value) -> Node:
        """An input we want d(loss)/d(input) for (gradient checks)"""
        return Node(np.asarray(value, dtype=np.float64), requires_grad=True, tape=self)

    def param(self, param: Param) -> Node:
        node = Node(param.value, requires_grad=param.trainable, tape=self)
        if param.trainable:
            self._bound.append((node, param))
        return node


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=np.float64))


def _record(value: np.ndarray, inputs: Tuple[Node, ...], backward_fn) -> Node:
    tape = next((n.tape for n in inputs if n.tape is not None), None)
    requires = tape is not None and any(n.requires_grad for n in inputs)
    out = Node(value, requires_grad=requires, tape=tape)
    if requires:
        if tape.consumed:
            raise GraphConsumed("Cannot record on a tape that already ran backward")
        tape.ops.append(_Op(out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Node) -> None:
    """Propagate d(loss) back through the tape into trainable Param.grad buffers."""
    if tape.consumed:
        raise GraphConsumed("backward() may run once per tape")
    if loss.value.size != 1:
        raise ShapeMismatch("loss", "a scalar", loss.value.shape)
    tape.consumed = True
    if not loss.requires_grad:
        return

    loss.grad = np.ones_like(loss.value)
    for op in reversed(tape.ops):
        if op.output.grad is None:
            continue
        needs = tuple(n.requires_grad for n in op.inputs)
        grads = op.backward(op.output.grad, needs)
        for node, grad, need in zip(op.inputs, grads, needs):
            if not need or grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad

    for node, param in tape._bound:
        if node.grad is not None and param.trainable:
            param.grad += node.grad


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def affine(x, w, b) -> Node:
    """out[n, o] = sum_i x[n, i] * w[i, o] + b[o]"""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    if x.value.ndim != 2 or w.value.ndim != 2:
        raise ShapeMismatch("affine operands", "2-D x and w", (x.shape, w.shape))
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch("affine inner dimension", w.shape[0], x.shape[1])
    if b.shape != (w.shape[1],):
        raise ShapeMismatch("affine bias", (w.shape[1],), b.shape)

    xv, wv = x.value, w.value

    def grad_fn(g, needs):
        return (g @ wv.T if needs[0] else None,
                xv.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _record(xv @ wv + b.value, (x, w, b), grad_fn)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if stride < 1 or padding < 0 or span < 0 or span % stride:
        raise InvalidGeometry(
            f"size={size}, kernel={kernel}, stride={stride}, padding={padding} "
            f"does not give a whole output extent")
    return span // stride + 1


def conv2d(x, k, b, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation: N x C x H x W with F x C x Kh x Kw -> N x F x H' x W'"""
    x, k, b = _as_node(x), _as_node(k), _as_node(b)
    if x.value.ndim != 4 or k.value.ndim != 4:
        raise ShapeMismatch("conv2d operands", "4-D x and kernel", (x.shape, k.shape))
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise ShapeMismatch("conv2d channels", c, kc)
    if b.shape != (f,):
        raise ShapeMismatch("conv2d bias", (f,), b.shape)
    out_h = conv_output_extent(h, kh, stride, padding)
    out_w = conv_output_extent(w, kw, stride, padding)

    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kv = k.value
    out = np.tensordot(windows, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + b.value[None, :, None, None]

    def grad_fn(g, needs):
        dx = dk = db = None
        if needs[0]:
            dwin = np.tensordot(g, kv, axes=([1], [0]))  # N, H', W', C, Kh, Kw
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                        j:j + stride * (out_w - 1) + 1:stride] += dwin[..., i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w].copy()
        if needs[1]:
            dk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if needs[2]:
            db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    return _record(out, (x, k, b), grad_fn)


def maxpool2d(x, window: int, stride: Optional[int] = None) -> Node:
    """Per-window maximum; ties go to the first cell in row-major order"""
    x = _as_node(x)
    stride = window if stride is None else stride
    if x.value.ndim != 4:
        raise ShapeMismatch("maxpool2d input", "4-D", x.shape)
    n, c, h, w = x.shape
    if window < 1 or h < window or w < window:
        raise InvalidGeometry(f"window {window} does not fit a {h}x{w} input")
    if stride < 1 or (h - window) % stride or (w - window) % stride:
        raise InvalidGeometry(f"window {window} / stride {stride} leaves a partial window on {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1

    windows = sliding_window_view(x.value, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, out_h, out_w, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g, needs):
        rows = np.arange(out_h)[:, None] * stride + arg // window
        cols = np.arange(out_w)[None, :] * stride + arg % window
        n_idx, c_idx, rows, cols = np.broadcast_arrays(
            np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], rows, cols)
        dx = np.zeros_like(x.value)
        np.add.at(dx, (n_idx, c_idx, rows, cols), g)
        return (dx,)

    return _record(out, (x,), grad_fn)


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), lambda g, needs: (g * mask,))


def sigmoid(x) -> Node:
    x = _as_node(x)
    out = np.exp(-np.logaddexp(0.0, -x.value))
    return _record(out, (x,), lambda g, needs: (g * out * (1.0 - out),))


def flatten(x) -> Node:
    """N x ... -> N x D"""
    x = _as_node(x)
    shape = x.shape
    return _record(x.value.reshape(shape[0], -1), (x,), lambda g, needs: (g.reshape(shape),))


def mse_loss(pred, target) -> Node:
    """Mean over all entries of (pred - target)^2"""
    pred = _as_node(pred)
    target = target.value if isinstance(target, Node) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch("mse_loss operands", pred.shape, target.shape)
    if pred.value.size == 0:
        raise ShapeMismatch("mse_loss operands", "non-empty", pred.shape)
    diff = pred.value - target
    n = diff.size
    return _record(np.array(np.mean(diff * diff)), (pred,), lambda g, needs: (g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adam:
    """Adam on trainable entries; gradients of every entry are zeroed afterwards"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, store: ParamStore, lr: float) -> None:
        for param in store:
            if not param.trainable:
                continue
            m, v, t = self._state.get(param.name) or (np.zeros_like(param.value), np.zeros_like(param.value), 0)
            t += 1
            g = param.grad
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            param.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._state[param.name] = (m, v, t)
        store.zero_grad()


class SGD:
    def step(self, store: ParamStore, lr: float) -> None:
        for param in store:
            if param.trainable:
                param.value -= lr * param.grad
        store.zero_grad()


OPTIMIZERS = {'adam': Adam, 'sgd': SGD}


def make_optimizer(name: str):
    try:
        return OPTIMIZERS[name]()
    except KeyError:
        raise ValueError(f"Unknown optimizer {name!r}, expected one of {sorted(OPTIMIZERS)}")


def optimizer_step(store: ParamStore, lr: float, optimizer=None) -> None:
    """One update of the trainable entries (a fresh Adam when none is given)."""
    if not lr > 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")
    (optimizer or Adam()).step(store, lr)
