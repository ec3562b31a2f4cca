"""Define-by-run reverse-mode differentiation on an append-only tape.

Differentiable primitives are plain functions ``op(*arrays, **kw)`` returning
``(value, vjp)`` where ``vjp(g, needs)`` maps the output cotangent to one
cotangent per input (``None`` where ``needs`` is false). :class:`Tape`
records calls to such primitives and :func:`backward` replays them in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DTYPE


class AutodiffError(RuntimeError):
    pass


class Variable:
    """A value with an accumulated gradient and a trainable flag."""

    def __init__(self, value, trainable: bool = True, name: str | None = None):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Variable({self.name or '?'}, shape={self.value.shape}{flag})"


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    needs_grad: bool
    vjp: Callable | None = None
    op: Callable | None = None
    kwargs: dict = field(default_factory=dict)
    var: Variable | None = None


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, **kw) -> Node:
        node = Node(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def watch(self, var: Variable) -> Node:
        """Leaf node reading ``var``; gradients flow back to it if trainable."""
        return self._append(kind="variable", inputs=(), value=var.value,
                            needs_grad=var.trainable, var=var)

    def constant(self, value) -> Node:
        return self._append(kind="constant", inputs=(), value=np.asarray(value), needs_grad=False)

    def apply(self, op: Callable, *inputs: Node, **kwargs) -> Node:
        for n in inputs:
            if n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise AutodiffError(f"input node {n.id} does not belong to this tape")
        value, vjp = op(*(n.value for n in inputs), **kwargs)
        needs = any(n.needs_grad for n in inputs)
        return self._append(kind=getattr(op, "__name__", "op"), inputs=tuple(n.id for n in inputs),
                            value=value, needs_grad=needs, vjp=vjp if needs else None,
                            op=op, kwargs=kwargs)

    def replay(self) -> bool:
        """Recompute every recorded node from its inputs; True if all match bit-exactly."""
        for node in self.nodes:
            if node.op is None:
                continue
            value, _ = node.op(*(self.nodes[i].value for i in node.inputs), **node.kwargs)
            if value.shape != node.value.shape or not np.array_equal(value, node.value):
                return False
        return True


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(value) into every trainable watched Variable."""
    if loss.id >= len(tape.nodes) or tape.nodes[loss.id] is not loss:
        raise AutodiffError(f"loss node {loss.id} is not recorded on this tape")
    if loss.value.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[:loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.needs_grad:
            continue
        if node.var is not None:
            node.var.grad += g.astype(node.var.grad.dtype, copy=False)
            continue
        if node.vjp is None:
            continue
        ins = [tape.nodes[i] for i in node.inputs]
        needs = tuple(n.needs_grad for n in ins)
        for n, gi in zip(ins, node.vjp(g, needs)):
            if gi is None or not n.needs_grad:
                continue
            if gi.shape != n.value.shape:
                raise AutodiffError(
                    f"gradient shape {gi.shape} != value shape {n.value.shape} at node {n.id} ({node.kind})")
            if n.id in grads:
                grads[n.id] = grads[n.id] + gi
            else:
                grads[n.id] = gi


def zero_grads(variables) -> None:
    for v in variables:
        v.grad[...] = 0


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def _relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def grad_check(f: Callable[[Tape], Node], x: Variable, step: float = 1e-3, tol: float = 1e-3,
               indices: Sequence[tuple[int, ...]] | None = None) -> GradCheckReport:
    """Compare the tape gradient of ``f`` w.r.t. ``x`` with central differences.

    ``f`` builds a fresh recording on the tape it is handed and returns the
    scalar loss node; it must read ``x`` through ``tape.watch``. The finite
    differences evaluate ``f`` with ``x`` promoted to float64 so the oracle is
    not dominated by float32 rounding. ``indices`` restricts the check to a
    subset of coordinates.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    was_trainable = x.trainable
    original = x.value
    old_grad = x.grad.copy()
    try:
        x.trainable = True
        x.grad = np.zeros_like(original)
        tape = Tape()
        loss = f(tape)
        again = f(Tape()).value
        if not np.array_equal(loss.value, again):
            raise AutodiffError("function is not deterministic: two forward passes disagree")
        backward(tape, loss)
        analytic_full = x.grad.astype(np.float64)

        if indices is None:
            indices = list(np.ndindex(*original.shape))
        indices = [tuple(int(i) for i in ix) for ix in indices]
        base = original.astype(np.float64)
        analytic = np.array([analytic_full[ix] for ix in indices])
        numeric = np.empty(len(indices))
        for k, ix in enumerate(indices):
            plus = base.copy()
            plus[ix] += step
            minus = base.copy()
            minus[ix] -= step
            x.value = plus
            fp = float(np.asarray(f(Tape()).value, dtype=np.float64).sum())
            x.value = minus
            fm = float(np.asarray(f(Tape()).value, dtype=np.float64).sum())
            numeric[k] = (fp - fm) / (2 * step)
    finally:
        x.value = original
        x.grad = old_grad
        x.trainable = was_trainable
    rel = _relative_error(analytic, numeric)
    worst = int(np.argmax(rel)) if rel.size else None
    max_err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tol, checked=len(indices),
                           worst_index=indices[worst] if worst is not None else None,
                           analytic=analytic, numeric=numeric)
