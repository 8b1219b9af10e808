"""A small array-level reverse-mode tape.

Only the operations the deformation network needs are provided. Each op
appends a node to the tape; ``Tape.backward`` walks the nodes in reverse
recording order, which is a valid topological order.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class TapeStateError(RuntimeError):
    """Backward on a tape that was already consumed or whose parameters changed."""


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, parents=(), vjp: Callable | None = None, requires_grad: bool = False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name


class Tape:
    def __init__(self, guard: Callable[[], bool] | None = None):
        self.nodes: list[Node] = []
        self.consumed = False
        self._guard = guard

    def _push(self, value, parents, vjp) -> Node:
        node = Node(value, parents, vjp, any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """A stop-gradient input: no gradient is ever propagated into it."""
        return Node(np.asarray(value, dtype=np.float64))

    def linear(self, x: Node, W: Node, b: Node) -> Node:
        def vjp(g):
            return (g @ W.value.T, x.value.T @ g, g.sum(axis=0))
        return self._push(x.value @ W.value + b.value, (x, W, b), vjp)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._push(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def concat(self, xs: list[Node]) -> Node:
        widths = np.cumsum([x.value.shape[1] for x in xs])[:-1]
        return self._push(np.concatenate([x.value for x in xs], axis=1), tuple(xs),
                          lambda g: tuple(np.split(g, widths, axis=1)))

    def softmax(self, x: Node) -> Node:
        z = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)
        return self._push(y, (x,), vjp)

    def backward(self, seeds: dict[Node, np.ndarray]) -> None:
        """Accumulate d(sum_k <seed_k, node_k>)/d(node) into ``node.grad``."""
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward pass")
        if self._guard is not None and not self._guard():
            raise TapeStateError("parameters changed since the forward pass; tape is stale")
        self.consumed = True
        for node in self.nodes:
            node.grad = None
        for node, g in seeds.items():
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(node.grad)):
                if not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
