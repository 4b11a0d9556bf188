"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps one ndarray plus the tape bookkeeping needed to replay
gradients backward. Primitives build the graph eagerly; ``backward()`` on
a scalar runs a topological sweep and accumulates ``grad`` on every
reachable tensor with ``requires_grad``.

Values are f32 by convention. The primitives are dtype-generic so the
finite-difference checker can run the same graph in f64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class ShapeError(ValueError):
    """Incompatible operand shapes; message names both."""


class NumericsError(ValueError):
    """Degenerate numeric input (empty reduction axis, bad labels)."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the reachable graph."""
        if self.data.size != 1:
            raise NumericsError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[Tensor], None] | None,
    op: str,
) -> Tensor:
    """Wrap an op result; ``backward`` receives the result tensor.

    When gradients are disabled or no parent needs them, the result is a
    detached leaf and the tape stores nothing.
    """
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.op = op
    if needs and backward is not None:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(out: Tensor) -> None:
        accumulate(a, _unbroadcast(out.grad, a.shape))
        accumulate(b, _unbroadcast(out.grad, b.shape))

    return make_op(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(out: Tensor) -> None:
        accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(out: Tensor) -> None:
        accumulate(a, out.grad * factor)

    return make_op(a.data * a.data.dtype.type(factor), (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either matching batch dims or a 2-D shared ``b``."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    shared_b = b.data.ndim == 2 and a.data.ndim > 2
    if a.shape[-1] != b.shape[-2] or (not shared_b and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(out: Tensor) -> None:
        accumulate(a, out.grad @ np.swapaxes(b.data, -1, -2))
        if shared_b:
            k, m = b.shape
            accumulate(b, a.data.reshape(-1, k).T @ out.grad.reshape(-1, m))
        else:
            accumulate(b, np.swapaxes(a.data, -1, -2) @ out.grad)

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(out: Tensor) -> None:
        accumulate(a, out.grad.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(out: Tensor) -> None:
        accumulate(a, np.transpose(out.grad, inverse))

    return make_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(out: Tensor) -> None:
        accumulate(a, out.grad * (1.0 - out.data * out.data))

    return make_op(y, (a,), backward, "tanh")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-function form, not the tanh approximation."""
    x = a.data
    y = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def backward(out: Tensor) -> None:
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        accumulate(a, out.grad * (cdf + x * pdf))

    return make_op(y.astype(x.dtype), (a,), backward, "gelu")


def layer_norms_raw(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered, inv_std


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    n = x.shape[-1]
    if n == 0:
        raise NumericsError("layer_norm over empty feature axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match feature size ({n},)"
        )
    centered, inv_std = layer_norms_raw(x.data, eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data

    def backward(out: Tensor) -> None:
        g = out.grad
        reduce_axes = tuple(range(g.ndim - 1))
        accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        accumulate(bias, g.sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return make_op(y.astype(x.dtype), (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise NumericsError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(out: Tensor) -> None:
        g = out.grad
        inner = (g * out.data).sum(axis=axis, keepdims=True)
        accumulate(x, out.data * (g - inner))

    return make_op(y.astype(x.dtype), (x,), backward, "softmax")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ids of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise NumericsError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )

    def backward(out: Tensor) -> None:
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, out.grad)

    return make_op(table.data[ids], (table,), backward, "embedding_lookup")


def tsum(x: Tensor) -> Tensor:
    def backward(out: Tensor) -> None:
        accumulate(x, np.broadcast_to(out.grad, x.shape).copy())

    return make_op(x.data.sum(dtype=x.dtype).reshape(()), (x,), backward, "sum")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity at p == 0."""
    if not 0.0 <= p < 1.0:
        raise NumericsError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    keep /= x.dtype.type(1.0 - p)

    def backward(out: Tensor) -> None:
        accumulate(x, out.grad * keep)

    return make_op(x.data * keep, (x,), backward, "dropout")


def log_softmax_raw(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


IGNORE_INDEX = -1


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose label != ignore_index."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if n == 0 or c == 0:
        raise NumericsError(f"cross_entropy over empty logits shape {logits.shape}")
    if labels.shape != (n,):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits rows ({n},)"
        )
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NumericsError("cross_entropy: every label is ignore_index")
    checked = labels[valid]
    if checked.min() < 0 or checked.max() >= c:
        raise NumericsError(f"cross_entropy label out of range [0, {c})")
    log_probs = log_softmax_raw(logits.data.astype(np.float64))
    nll = -log_probs[np.arange(n)[valid], checked]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(out: Tensor) -> None:
        probs = np.exp(log_probs)
        probs[np.arange(n)[valid], checked] -= 1.0
        probs[~valid] = 0.0
        accumulate(logits, (out.grad * probs / n_valid).astype(logits.dtype))

    return make_op(loss.reshape(()), (logits,), backward, "cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean element-wise binary cross-entropy on raw logits (stable form)."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(
            f"bce_with_logits: targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if logits.data.size == 0:
        raise NumericsError("bce_with_logits on empty logits")
    x = logits.data
    loss_elems = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(loss_elems.mean(), dtype=logits.dtype)

    def backward(out: Tensor) -> None:
        sig = 1.0 / (1.0 + np.exp(-x))
        accumulate(logits, (out.grad * (sig - targets) / x.size).astype(logits.dtype))

    return make_op(loss.reshape(()), (logits,), backward, "bce_with_logits")
