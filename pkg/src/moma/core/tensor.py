"""Dense float64 tensors and a tape for reverse-mode differentiation.

Operations (see :mod:`moma.core.ops`) record a node on the innermost active
:class:`GradTape` whenever one of their inputs has ``requires_grad`` set.
Outside any tape nothing is recorded, which is the inference fast path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from moma.errors import ContractError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A row-major float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from moma.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from moma.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from moma.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from moma.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from moma.core import ops
        return ops.div(self, other)

    def __neg__(self):
        from moma.core import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from moma.core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from moma.core import ops
        return ops.getitem(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is already in topological
    order; :meth:`backward` walks it once in reverse.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through the tape.

        Every leaf tensor with ``requires_grad`` that the loss depends on gets
        its ``.grad`` set; tensors without the flag are left untouched. The
        returned dict maps ``id(tensor)`` to its gradient for every tensor
        reached, leaves and intermediates alike.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64, copy=True)
                    owners[key] = t
        for key, t in owners.items():
            if key not in produced and t.requires_grad:
                t.grad = grads[key]
        return grads


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def make_output(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    """Wrap ``data`` as an op result and record it when a gradient is needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, bw)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class FlopMeter:
    """Counts multiply-accumulates performed by matmul-family ops while active."""

    def __init__(self):
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.macs += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs

    def __enter__(self) -> FlopMeter:
        meters = getattr(_state, "meters", None)
        if meters is None:
            meters = _state.meters = []
        meters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.meters.remove(self)


def count_macs(op: str, macs: int) -> None:
    for meter in getattr(_state, "meters", ()) or ():
        meter.add(op, macs)
