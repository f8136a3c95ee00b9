"""Rank-4 tensor primitives with reverse-mode gradients.

Only the operations the three encoder-decoder networks need are provided.
Every primitive records a backward closure on its output; calling
:meth:`Tensor.backward` on the final node walks the graph in reverse
topological order and accumulates ``.grad`` on every leaf that requires it.

Activations are laid out as ``(batch, channels, height, width)``. All
primitives preserve the dtype of their input so that gradient checks can run
at 64-bit precision while training runs at 32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An ndarray plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate ``grad`` (default: ones) from this node."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient {grad.shape} does not match {self.shape}")

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward if needs else None, op)


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects (batch, channels, height, width), got {x.shape}")


# ---------------------------------------------------------------- convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)


def conv3x3(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 3x3 cross-correlation with zero padding 1 (size preserving)."""
    _check_rank4(x, "conv3x3")
    o, c, kh, kw = weights.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv3x3 weights must be (out, in, 3, 3), got {weights.shape}")
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"channel mismatch: input has {cx}, weights expect {c}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    cols = _im2col3(x.data)
    w2 = weights.data.reshape(o, c * 9)
    out = (cols @ w2.T).reshape(n, h, w, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, o)
        gw = (g2.T @ cols).reshape(o, c, 3, 3) if weights.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, h, w, c, 3, 3)
            gxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky : ky + h, kx : kx + w] += dcols[..., ky, kx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return _result(out, (x, weights, bias), backward, "conv3x3")


def conv1x1(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map across channels; ``weights`` is (out, in, 1, 1)."""
    _check_rank4(x, "conv1x1")
    o, c = weights.shape[:2]
    if weights.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 weights must be (out, in, 1, 1), got {weights.shape}")
    if x.shape[1] != c:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weights expect {c}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    w2 = weights.data.reshape(o, c)
    out = np.einsum("oc,nchw->nohw", w2, x.data, optimize=True) + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True) if x.requires_grad else None
        gw = (
            np.einsum("nohw,nchw->oc", g, x.data, optimize=True).reshape(o, c, 1, 1)
            if weights.requires_grad
            else None
        )
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weights, bias), backward, "conv1x1")


def transposed_conv2x2(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-2 transposed convolution; ``weights`` is (in, out, 2, 2)."""
    _check_rank4(x, "transposed_conv2x2")
    ci, co, kh, kw = weights.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed conv weights must be (in, out, 2, 2), got {weights.shape}")
    n, cx, h, w = x.shape
    if cx != ci:
        raise ShapeError(f"channel mismatch: input has {cx}, weights expect {ci}")
    xs = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, ci)
    w2 = weights.data.reshape(ci, co * 4)
    y = (xs @ w2).reshape(n, h, w, co, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(y).reshape(n, co, 2 * h, 2 * w)
    parents: tuple[Tensor, ...] = (x, weights)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"bias shape {bias.shape} != ({co},)")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def backward(g: np.ndarray):
        g2 = g.reshape(n, co, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, co * 4)
        gx = (g2 @ w2.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xs.T @ g2).reshape(ci, co, 2, 2) if weights.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _result(out, parents, backward, "transposed_conv2x2")


# -------------------------------------------------------------- normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    running: RunningStats,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    ``train`` normalizes with batch statistics and updates ``running`` in
    place; ``eval`` uses the running statistics.
    """
    _check_rank4(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    xd = x.data
    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        mom = running.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running.mean[...] = (1 - mom) * running.mean + mom * mean
        running.var[...] = (1 - mom) * running.var + mom * unbiased
    elif mode == "eval":
        mean = running.mean.astype(xd.dtype)
        var = running.var.astype(xd.dtype)
        centered = xd - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g: np.ndarray):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                gx = inv_std[None, :, None, None] * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batchnorm")


# ------------------------------------------------------------- pointwise ops


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * pos,), "relu")


def dropout(x: Tensor, p: float, mode: str, draw: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` in train mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if mode == "eval" or p == 0.0:
        return x
    if draw is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (draw.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank4(a, "concat_channels")
    _check_rank4(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


# ------------------------------------------------------------ pool / unpool


@dataclass(frozen=True)
class PoolIndices:
    """Argmax offset (0..3, row-major inside each 2x2 window) per pooled cell."""

    offsets: np.ndarray = field(repr=False)  # (n, c, h/2, w/2) uint8

    @property
    def shape(self) -> tuple[int, ...]:
        return self.offsets.shape

    def permuted(self, perm: Sequence[int]) -> "PoolIndices":
        """Remap every offset through ``perm`` (testing aid)."""
        table = np.asarray(perm, dtype=np.uint8)
        return PoolIndices(table[self.offsets])


def _windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )


def _unwindows(win: np.ndarray) -> np.ndarray:
    n, c, h2, w2, _ = win.shape
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def maxpool2x2(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """Max over disjoint 2x2 windows; ties go to the first cell in row-major order."""
    _check_rank4(x, "maxpool2x2")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape[2:]}")
    win = _windows(x.data)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    idx = PoolIndices(arg.astype(np.uint8))

    def backward(g: np.ndarray):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (_unwindows(gw),)

    return _result(np.ascontiguousarray(out), (x,), backward, "maxpool2x2"), idx


def unpool2x2(x: Tensor, idx: PoolIndices) -> Tensor:
    """Scatter each value to its recorded argmax cell of a 2x upsampled grid."""
    _check_rank4(x, "unpool2x2")
    if idx.shape != x.shape:
        raise ShapeError(f"pool indices {idx.shape} do not match input {x.shape}")
    arg = idx.offsets.astype(np.intp)[..., None]
    win = np.zeros(x.shape + (4,), dtype=x.dtype)
    np.put_along_axis(win, arg, x.data[..., None], axis=-1)
    out = _unwindows(win)

    def backward(g: np.ndarray):
        return (np.take_along_axis(_windows(g), arg, axis=-1)[..., 0],)

    return _result(out, (x,), backward, "unpool2x2")


# ------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    """Scalar sum (as a 0-d tensor); convenient for gradient checks."""
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a fixed weight array."""
    w = np.asarray(w, dtype=x.dtype)
    return _result(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,), "weighted_sum")
