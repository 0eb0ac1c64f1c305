"""Reverse-mode gradient tape over a fixed primitive set.

A :class:`Tape` is activated with ``with Tape() as tape:``. While active, every
primitive applied to a tensor that requires gradients is appended to the tape
as a :class:`Record`. ``tape.gradient(loss, sources)`` walks the records in
reverse and returns exact gradients; ``tape.replay()`` re-executes the recorded
forward functions from the leaf values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError

_ACTIVE: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Immutable float64 array, optionally tracked by the active tape."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64).view()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these dispatch to recorded primitives
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        return ops.matmul(other, self)

    def __getitem__(self, index):
        return ops.getitem(self, index=index)

    @property
    def T(self):
        return ops.transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape=shape)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Record:
    primitive: "Primitive"
    inputs: tuple[Tensor, ...]
    attrs: dict
    output: Tensor


class Primitive:
    """A forward function with its vector-Jacobian product.

    ``backward(grad_out, out, *inputs, **attrs)`` returns one gradient (or
    ``None``) per input. Primitives without a backward block gradient flow.
    A ``selective`` backward also receives ``needs``, one flag per input, and
    may return ``None`` for inputs that need no gradient.
    """

    def __init__(self, name: str, forward: Callable, backward: Callable | None, selective: bool = False):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.selective = selective

    def __repr__(self) -> str:
        return f"Primitive({self.name})"

    def __call__(self, *inputs, **attrs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        with np.errstate(all="ignore"):  # non-finite results are reported just below
            raw = np.asarray(self.forward(*(t.value for t in tensors), **attrs), dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise NonFiniteError(f"{self.name} produced non-finite values")
        tracked = any(t.requires_grad for t in tensors)
        out = Tensor(raw, requires_grad=tracked and self.backward is not None)
        tape = current_tape()
        if tape is not None and tracked:
            tape.records.append(Record(self, tensors, attrs, out))
        return out


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.leaves.append(t)
        return t

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` w.r.t. each source (zeros if unused)."""
        if target.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None or rec.primitive.backward is None:
                continue
            attrs = rec.attrs
            if rec.primitive.selective:
                attrs = dict(attrs, needs=tuple(t.requires_grad for t in rec.inputs))
            in_grads = rec.primitive.backward(
                g, rec.output.value, *(t.value for t in rec.inputs), **attrs
            )
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return [
            np.array(grads[id(s)]) if id(s) in grads else np.zeros_like(s.value)
            for s in sources
        ]

    def depends_on(self, target: Tensor, source: Tensor) -> bool:
        """True when a differentiable path links ``source`` to ``target``."""
        live = {id(target)}
        for rec in reversed(self.records):
            if id(rec.output) not in live or rec.primitive.backward is None:
                continue
            for t in rec.inputs:
                if t is source:
                    return True
                if t.requires_grad:
                    live.add(id(t))
        return False

    def primitive_names(self) -> list[str]:
        return [rec.primitive.name for rec in self.records]

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every recorded output from leaf and constant values."""
        values: dict[int, np.ndarray] = {}
        for rec in self.records:
            args = [values.get(id(t), t.value) for t in rec.inputs]
            values[id(rec.output)] = np.asarray(
                rec.primitive.forward(*args, **rec.attrs), dtype=np.float64
            )
        return values


from . import ops  # noqa: E402  (operator methods dispatch here)
