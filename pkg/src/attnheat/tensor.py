"""Tensor type and the reverse-mode tape that records operations on it."""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_DTYPES = {"single": np.float32, "double": np.float64}
_node_ids = itertools.count(1)


class _State:
    dtype = np.float32
    recording = True
    tape: "Tape"


@dataclass
class Record:
    op: str
    inputs: tuple
    out_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered list of recorded operations.

    Records are appended in execution order, so every input node id precedes
    the node that consumes it. ``backward`` walks the list once in reverse.
    """

    records: list = field(default_factory=list)
    produced: set = field(default_factory=set)

    def append(self, rec: Record) -> None:
        self.records.append(rec)
        self.produced.add(rec.out_id)

    def clear(self) -> None:
        self.records.clear()
        self.produced.clear()

    def __len__(self) -> int:
        return len(self.records)


_State.tape = Tape()


def active_tape() -> Tape:
    return _State.tape


def default_dtype():
    return _State.dtype


@contextlib.contextmanager
def precision(mode: str):
    """Switch the dtype of newly created tensors and give them a fresh tape.

    ``"double"`` exists for gradient checking; training runs in ``"single"``.
    """
    if mode not in _DTYPES:
        raise UsageError(f"unknown precision mode {mode!r}; expected 'single' or 'double'")
    prev_dtype, prev_tape = _State.dtype, _State.tape
    _State.dtype, _State.tape = _DTYPES[mode], Tape()
    try:
        yield
    finally:
        _State.dtype, _State.tape = prev_dtype, prev_tape


@contextlib.contextmanager
def no_grad():
    prev = _State.recording
    _State.recording = False
    try:
        yield
    finally:
        _State.recording = prev


class Tensor:
    """Dense float array (NCHW for images) that can sit on the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _State.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = next(_node_ids)
        t.is_leaf = not requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        from . import ops
        return ops.elementwise("add", self, other)

    def __mul__(self, other):
        from . import ops
        return ops.elementwise("mul", self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops
        return ops.tensor_sum(self)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Wrap ``out`` as a tensor and record its backward closure if needed."""
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: inputs mix precisions {sorted(str(d) for d in dtypes)}")
    needs = _State.recording and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        _State.tape.append(Record(op, tuple(inputs), result.node_id, backward))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that requires it.

    Gradients add into existing ``.grad`` buffers. The tape is cleared
    afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _State.tape
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, seed)
        tape.clear()
        return
    if loss.node_id not in tape.produced:
        raise UsageError("loss was not produced on the active tape")

    pending = {loss.node_id: seed}
    for rec in reversed(tape.records):
        g = pending.pop(rec.out_id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.shape != gi.shape:
                raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.is_leaf:
                _accumulate(t, gi)
            elif t.node_id in pending:
                pending[t.node_id] = pending[t.node_id] + gi
            else:
                pending[t.node_id] = gi
    tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g
