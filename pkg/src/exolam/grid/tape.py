"""Minimal reverse-mode differentiation for the grid-world LAM.

A :class:`Tape` records :class:`Node` objects in creation order. Since every
node is created after its inputs, that order is topological and the reverse
pass simply walks it backwards. Each node owns exactly one adjoint buffer.

Images are NHWC. Only the handful of primitives the grid model needs are
provided.
"""
from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def reset(self):
        self.nodes.clear()

    def _record(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    # ------------------------------------------------------------ leaves

    def param(self, value: np.ndarray) -> Node:
        return self._record(Node(value, op="param", requires_grad=True))

    def const(self, value: np.ndarray) -> Node:
        return self._record(Node(value, op="const"))

    def stop_gradient(self, x: Node) -> Node:
        return self.const(x.value)

    # ------------------------------------------------------------ primitives

    def matmul(self, x: Node, w: Node) -> Node:
        out = x.value @ w.value

        def back(g):
            x.accumulate(g @ w.value.T)
            w.accumulate(x.value.T @ g)

        return self._record(Node(out, (x, w), back, "matmul"))

    def bias_add(self, x: Node, b: Node) -> Node:
        out = x.value + b.value
        axes = tuple(range(x.value.ndim - 1))

        def back(g):
            x.accumulate(g)
            b.accumulate(g.sum(axis=axes))

        return self._record(Node(out, (x, b), back, "bias_add"))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = x.value * mask

        def back(g):
            x.accumulate(g * mask)

        return self._record(Node(out, (x,), back, "relu"))

    def add(self, x: Node, y: Node) -> Node:
        def back(g):
            x.accumulate(g)
            y.accumulate(g)

        return self._record(Node(x.value + y.value, (x, y), back, "add"))

    def scale(self, x: Node, c: float) -> Node:
        def back(g):
            x.accumulate(g * c)

        return self._record(Node(x.value * x.value.dtype.type(c), (x,), back, "scale"))

    def reshape(self, x: Node, shape) -> Node:
        old = x.value.shape

        def back(g):
            x.accumulate(g.reshape(old))

        return self._record(Node(x.value.reshape(shape), (x,), back, "reshape"))

    def broadcast_spatial(self, z: Node, h: int, w: int) -> Node:
        """(N, C) -> (N, h, w, C)."""
        n, c = z.value.shape
        out = np.broadcast_to(z.value[:, None, None, :], (n, h, w, c)).copy()

        def back(g):
            z.accumulate(g.sum(axis=(1, 2)))

        return self._record(Node(out, (z,), back, "broadcast"))

    def concat(self, xs: list[Node], axis: int = -1) -> Node:
        sizes = [x.value.shape[axis] for x in xs]
        out = np.concatenate([x.value for x in xs], axis=axis)

        def back(g):
            splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            for x, gx in zip(xs, splits):
                x.accumulate(gx)

        return self._record(Node(out, tuple(xs), back, "concat"))

    def conv3x3(self, x: Node, w: Node) -> Node:
        """Stride-1, zero-padded 3x3 convolution. ``w`` is (9 * C_in, C_out)
        with rows ordered (dy, dx, c_in)."""
        n, h, wd, c = x.value.shape
        cols = im2col3x3(x.value)
        out = (cols.reshape(n * h * wd, 9 * c) @ w.value).reshape(n, h, wd, -1)

        def back(g):
            g2 = g.reshape(n * h * wd, -1)
            w.accumulate(cols.reshape(n * h * wd, 9 * c).T @ g2)
            if x.requires_grad:
                x.accumulate(col2im3x3((g2 @ w.value.T).reshape(n, h, wd, 9, c)))

        return self._record(Node(out, (x, w), back, "conv3x3"))

    def mse(self, pred: Node, target: Node) -> Node:
        """Mean over every element of (pred - target)^2."""
        diff = pred.value - target.value
        k = diff.dtype.type(2.0 / diff.size)

        def back(g):
            pred.accumulate(g * k * diff)
            target.accumulate(-g * k * diff)

        return self._record(Node(np.mean(diff * diff, dtype=np.float64).astype(diff.dtype),
                                 (pred, target), back, "mse"))

    def gather_rows(self, table: Node, idx: np.ndarray) -> Node:
        out = table.value[idx]

        def back(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, idx, g)
            table.accumulate(gt)

        return self._record(Node(out, (table,), back, "gather"))

    def straight_through(self, z_pre: Node, z_q: Node) -> Node:
        """Forward value of ``z_q``; the adjoint is handed to ``z_pre`` unchanged."""

        def back(g):
            z_pre.accumulate(g)

        return self._record(Node(z_q.value.copy(), (z_pre,), back, "straight_through"))

    # ------------------------------------------------------------ reverse pass

    def backward(self, loss: Node) -> None:
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(node.grad)


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, 9, C) neighbourhoods with zero padding."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, k] = xp[:, dy : dy + h, dx : dx + w]
            k += 1
    return cols


def col2im3x3(cols: np.ndarray) -> np.ndarray:
    n, h, w, _, c = cols.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, dy : dy + h, dx : dx + w] += cols[:, :, :, k]
            k += 1
    return xp[:, 1:-1, 1:-1]
