"""Reverse-mode automatic differentiation over dense float32 storage.

A Tensor owns a contiguous float32 numpy buffer. Operations from
stackseg.tensor.ops link output tensors to their inputs through Node
records; backward() walks that graph once in reverse topological order
and accumulates gradients into the leaves that requested them.

Tensors are immutable after construction except for gradient
accumulation during a backward pass (and explicit optimizer updates on
leaf buffers between passes). Saved activations are whatever each op's
closure captured at forward time; nothing is recomputed.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .. import rng as _rng

__all__ = [
    "Tensor",
    "Node",
    "backward",
    "no_grad",
    "grad_enabled",
    "zeros",
    "full",
    "uniform",
    "gaussian",
    "leaf",
    "constant",
    "zero_grads",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph construction (inference and data plumbing paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_extents(shape: Sequence[int]) -> None:
    for n in shape:
        if int(n) < 1:
            raise ShapeError(f"extents must be >= 1, got shape {tuple(shape)}")


class Node:
    """Backward-graph record: op tag, parent tensors, local gradient rule.

    rule(output_grad) returns one gradient array (or None) per parent,
    each already shaped like the parent's data.
    """

    __slots__ = ("op", "parents", "rule")

    def __init__(
        self,
        op: str,
        parents: tuple["Tensor", ...],
        rule: Callable[[np.ndarray], tuple],
    ):
        self.op = op
        self.parents = parents
        self.rule = rule


class Tensor:
    """Dense float32 n-d value with an optional grad buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        arr = np.asarray(data, dtype=np.float32)
        _check_extents(arr.shape)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    # Thin sugar over the ops module; lazy import avoids a cycle.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other) -> "Tensor":
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.scale(self, -1.0)

    def __repr__(self) -> str:
        tag = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, {tag}, requires_grad={self.requires_grad})"


def tracked(t: Tensor) -> bool:
    """True when gradients must flow to or through this tensor."""
    return t.requires_grad or t.node is not None


def make_op(
    op: str,
    out_data: np.ndarray,
    parents: tuple[Tensor, ...],
    rule: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap an op result, attaching a graph node only when needed."""
    if _GRAD_ENABLED and any(tracked(p) for p in parents):
        return Tensor(out_data, node=Node(op, parents, rule))
    return Tensor(out_data)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder: every reachable tensor after its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each requires_grad leaf's .grad."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not tracked(loss):
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        parent_grads = t.node.rule(g)
        if len(parent_grads) != len(t.node.parents):
            raise ContractError(f"op {t.node.op} returned wrong gradient arity")
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not tracked(p):
                continue
            if pg.shape != p.data.shape:
                raise ContractError(
                    f"op {t.node.op} produced gradient shape {pg.shape} "
                    f"for parent shape {p.data.shape}"
                )
            key = id(p)
            if key in grads:
                # Fresh allocation: closure outputs may alias saved buffers.
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- Leaf factories ------------------------------------------------------


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    _check_extents(shape)
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    _check_extents(shape)
    return Tensor(
        np.full(tuple(shape), float(value), dtype=np.float32),
        requires_grad=requires_grad,
    )


def uniform(
    shape: Sequence[int],
    low: float,
    high: float,
    seed: int,
    tag: str = "uniform",
    requires_grad: bool = False,
) -> Tensor:
    _check_extents(shape)
    gen = _rng.stream(seed, tag)
    data = gen.uniform(low, high, size=tuple(shape)).astype(np.float32)
    return Tensor(data, requires_grad=requires_grad)


def gaussian(
    shape: Sequence[int],
    sigma: float,
    seed: int,
    tag: str = "gaussian",
    requires_grad: bool = False,
) -> Tensor:
    _check_extents(shape)
    gen = _rng.stream(seed, tag)
    data = (gen.standard_normal(size=tuple(shape)) * float(sigma)).astype(np.float32)
    return Tensor(data, requires_grad=requires_grad)


def leaf(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return leaf(data, requires_grad=False)
