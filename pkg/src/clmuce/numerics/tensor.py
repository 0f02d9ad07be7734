"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Only the operations the channel-estimation networks need
are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# While a list, every LeakyReLU appends the sign pattern of its input (used by gradient checks).
SIGN_LOG: list[np.ndarray] | None = None


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """A layer or experiment configuration is invalid."""


class UsageError(RuntimeError):
    """An API was called in a way it does not support."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out axes that were introduced or stretched by broadcasting.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- backward pass --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            return [_unbroadcast(g, p.shape) for p in out._parents]

        out = Tensor._make(a.data + b.data, (a, b), back)
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: [-g])

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other
        if a is b:
            return a.square()

        def back(g):
            return [_unbroadcast(g * (b.data if p is a else a.data), p.shape) for p in out._parents]

        out = Tensor._make(a.data * b.data, (a, b), back)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / float(other))

    def reciprocal(self) -> "Tensor":
        val = 1.0 / self.data
        return Tensor._make(val, (self,), lambda g: [-g * val * val])

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: [2.0 * g * x])

    def sqrt(self) -> "Tensor":
        val = np.sqrt(self.data)
        return Tensor._make(val, (self,), lambda g: [0.5 * g / val])

    def exp(self) -> "Tensor":
        val = np.exp(self.data)
        return Tensor._make(val, (self,), lambda g: [g * val])

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: [g / x])

    def leaky_relu(self, slope: float = 0.01) -> "Tensor":
        x = self.data
        if SIGN_LOG is not None:
            SIGN_LOG.append(x > 0)
        mask = np.where(x > 0, 1.0, slope)
        return Tensor._make(x * mask, (self,), lambda g: [g * mask])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, shape)]

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other

        def back(g):
            res = []
            for p in out._parents:
                if p is a:
                    ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
                    res.append(_unbroadcast(ga, a.shape))
                else:
                    if a.ndim == 1:
                        gb = np.multiply.outer(a.data, g)
                    else:
                        gb = np.swapaxes(a.data, -1, -2) @ g
                    res.append(_unbroadcast(gb, b.shape))
            return res

        out = Tensor._make(a.data @ b.data, (a, b), back)
        return out

    __matmul__ = matmul

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: [g.reshape(old)])

    def transpose(self, *axes) -> "Tensor":
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: [g.transpose(inv)])

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return [full]

        return Tensor._make(self.data[index], (self,), back)

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather along ``axis``; repeated indices accumulate gradient."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 and axis != 0:
            raise UsageError("multi-dimensional take is only supported along axis 0")
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            if idx.ndim == 1:
                np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
            else:
                np.add.at(full, idx, g)
            return [full]

        return Tensor._make(np.take(self.data, idx, axis=axis), (self,), back)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, cuts, axis=axis)
        return [pieces[i] for i, p in enumerate(parts) if p.requires_grad]

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([p.reshape(p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts], axis=axis)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log(sum(exp(x))) along one axis."""
    shift = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    val = (np.log(s) + shift).squeeze(axis)

    def back(g):
        return [np.expand_dims(g, axis) * e / s]

    return Tensor._make(val, (x,), back)


def conv1d_output_length(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def conv1d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (batch, in_ch, n) with ``W`` (out_ch, in_ch, k)."""
    if x.ndim != 3 or W.ndim != 3:
        raise DimensionError(f"conv1d expects x (B, C, n) and W (O, C, k); got {x.shape} and {W.shape}")
    batch, in_ch, n = x.shape
    out_ch, w_in, k = W.shape
    if w_in != in_ch:
        raise DimensionError(f"conv1d: x has {in_ch} channels but W expects {w_in}")
    if b.shape != (out_ch,):
        raise DimensionError(f"conv1d: bias shape {b.shape} does not match {out_ch} output channels")
    n_out = conv1d_output_length(n, k, stride, pad)
    if n_out < 1:
        raise ConfigurationError(f"conv1d: n={n}, k={k}, s={stride}, p={pad} gives output length {n_out}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    # cols: (B, n_out, C*k)
    windows = sliding_window_view(xp, k, axis=2)[:, :, : stride * (n_out - 1) + 1 : stride, :]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch, n_out, in_ch * k)
    w2 = W.data.reshape(out_ch, in_ch * k)
    y = (cols @ w2.T).transpose(0, 2, 1) + b.data[None, :, None]

    def back(g):
        # g: (B, out_ch, n_out)
        gt = g.transpose(0, 2, 1)  # (B, n_out, O)
        res = []
        for p in out._parents:
            if p is x:
                dcols = (gt @ w2).reshape(batch, n_out, in_ch, k)
                dxp = np.zeros((batch, in_ch, n + 2 * pad))
                span = stride * (n_out - 1) + 1
                for j in range(k):
                    dxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
                res.append(dxp[:, :, pad : pad + n] if pad else dxp)
            elif p is W:
                dw = gt.reshape(-1, out_ch).T @ cols.reshape(-1, in_ch * k)
                res.append(dw.reshape(W.shape))
            else:
                res.append(g.sum(axis=(0, 2)))
        return res

    out = Tensor._make(y, (x, W, b), back)
    return out


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map y = W x + b applied along the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"dense: x {x.shape}, W {W.shape}, b {b.shape} do not conform (need x[..., n], W[out, n], b[out])"
        )
    return x @ W.transpose() + b


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
