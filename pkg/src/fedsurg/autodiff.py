"""Minimal dense tensor core with reverse-mode automatic differentiation.

Everything is float64 and numpy-backed. A Tape records primitive ops in
execution order; one backward pass over the tape yields a gradient for
every leaf marked trainable. The op set is exactly what the risk network
needs: linear layers, embedding lookups, relu/sigmoid, concatenation and
binary cross-entropy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class GraphError(RuntimeError):
    """Tape misuse: non-scalar backward root, foreign node, etc."""


class KeyMismatchError(KeyError):
    """Parameter and gradient dictionaries are keyed differently."""


class Node:
    """One recorded value on a tape.

    ``backward`` maps the upstream gradient to a tuple of gradients, one
    per parent, in parent order. ``None`` for leaves.
    """

    __slots__ = ("value", "parents", "backward", "name", "trainable", "index")

    def __init__(self, value, parents, backward, name, trainable, index):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.name = name
        self.trainable = trainable
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"Node({kind}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive ops; rebuilt per batch."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None, trainable: bool = False) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(arr, (), None, name, trainable, len(self.nodes))
        self.nodes.append(node)
        return node

    def _record(self, value: np.ndarray, parents: tuple[Node, ...],
                backward: Callable) -> Node:
        node = Node(value, parents, backward, None, False, len(self.nodes))
        self.nodes.append(node)
        return node

    def gradients(self, root: Node) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar root.

        Returns gradients keyed by leaf name for every trainable leaf on
        the tape (zeros for trainable leaves the root does not depend on).
        Non-trainable leaves get no entry.
        """
        if root.value.ndim != 0 and root.value.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.value.shape}")
        if root.index >= len(self.nodes) or self.nodes[root.index] is not root:
            raise GraphError("root node does not belong to this tape")

        adjoint: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            grad = adjoint.get(node.index)
            if grad is None or node.backward is None:
                continue
            del adjoint[node.index]
            for parent, pgrad in zip(node.parents, node.backward(grad)):
                if pgrad is None:
                    continue
                acc = adjoint.get(parent.index)
                adjoint[parent.index] = pgrad if acc is None else acc + pgrad

        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.trainable:
                if node.name is None:
                    raise GraphError("trainable leaf without a name")
                out[node.name] = adjoint.get(node.index, np.zeros_like(node.value))
        return out


def linear(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for a 2-D batch."""
    if x.value.ndim != 2 or w.value.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: {x.value.shape} @ {w.value.shape}")
    if b.value.shape != (w.value.shape[1],):
        raise ShapeError(f"bias shape {b.value.shape} != ({w.value.shape[1]},)")
    out = x.value @ w.value + b.value

    def backward(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return tape._record(out, (x, w, b), backward)


def relu(tape: Tape, x: Node) -> Node:
    out = np.maximum(x.value, 0.0)
    mask = x.value > 0.0

    def backward(g):
        return (g * mask,)

    return tape._record(out, (x,), backward)


def sigmoid(tape: Tape, x: Node) -> Node:
    out = expit(x.value)

    def backward(g):
        return (g * out * (1.0 - out),)

    return tape._record(out, (x,), backward)


def embedding(tape: Tape, table: Node, indices) -> Node:
    """Row gather; backward scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError("embedding indices must be a flat list")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding indices must be integers")
    vocab = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(
            f"embedding index {bad} outside vocabulary [0, {vocab}) "
            "(vocabulary mismatch between sites?)")
    out = table.value[idx]

    def backward(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, idx, g)
        return (acc,)

    return tape._record(out, (table,), backward)


def concat(tape: Tape, parts: Sequence[Node], axis: int = 1) -> Node:
    if not parts:
        raise ShapeError("concat of nothing")
    out = np.concatenate([p.value for p in parts], axis=axis)
    splits = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record(out, tuple(parts), backward)


def bce_loss(tape: Tape, p: Node, y: np.ndarray) -> Node:
    """Mean binary cross-entropy; p is clamped to [eps, 1-eps] before the log."""
    y = np.asarray(y, dtype=np.float64)
    if p.value.shape != y.shape:
        raise ShapeError(f"prediction shape {p.value.shape} != label shape {y.shape}")
    clamped = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))
    out = np.asarray(losses.mean())
    inside = (p.value > BCE_EPS) & (p.value < 1.0 - BCE_EPS)

    def backward(g):
        d = (clamped - y) / (clamped * (1.0 - clamped)) / y.size
        return (g * d * inside,)

    return tape._record(out, (p,), backward)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """One plain gradient step: w <- w - lr * g, for every key."""
    if params.keys() != grads.keys():
        missing = set(params) ^ set(grads)
        raise KeyMismatchError(f"params/grads key mismatch: {sorted(missing)}")
    return {k: params[k] - lr * grads[k] for k in params}
