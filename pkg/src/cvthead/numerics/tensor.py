"""Dense float tensors with an optional reverse-mode gradient tape.

Values are immutable numpy arrays (float32 by default, float64 in
verification mode). Ops are pure functions; they only record onto a tape
when one is active and at least one input is tracked on it, so inference
paths pay no bookkeeping cost.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import ShapeError, UsageError

FLOAT_DTYPES = (np.float32, np.float64)

# When True, every op output is checked for NaN/Inf. Off by default: the
# checks are cheap per-call but add up inside training loops.
_CHECKED = False


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def checked_enabled() -> bool:
    return _CHECKED


class Tensor:
    """Immutable n-d float array, optionally tracked on a GradTape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, dtype=np.float32, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional["GradTape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in op output")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _OpRecord:
    __slots__ = ("op", "out_id", "input_ids", "backward")

    def __init__(self, op, out_id, input_ids, backward):
        self.op = op
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward = backward


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Single-owner record of ops for one backward pass.

    Use as a context manager; ops executed inside record themselves when an
    input is tracked. Leaves are registered with watch() (tensors created
    with requires_grad=True are auto-watched on first use).
    """

    def __init__(self):
        self._records: list[_OpRecord] = []
        self._leaves: dict[int, Tensor] = {}
        self._ids = itertools.count()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()

    def watch(self, t: Tensor) -> int:
        """Register a leaf tensor; returns its node id on this tape."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = next(self._ids)
        t.node_id = nid
        t._tape = self
        self._leaves[nid] = t
        return nid

    def _track_output(self, t: Tensor) -> int:
        nid = next(self._ids)
        t.node_id = nid
        t._tape = self
        return nid

    def id_of(self, t: Tensor) -> Optional[int]:
        """Node id of t on this tape, auto-watching requires_grad leaves."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            return self.watch(t)
        return None

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of a scalar loss for the given source tensors."""
        grads = backward(loss, tape=self)
        out = []
        for s in sources:
            nid = s.node_id if s._tape is self else None
            if nid is None or nid not in grads:
                out.append(Tensor._wrap(np.zeros(s.shape, dtype=s.dtype)))
            else:
                out.append(grads[nid])
        return out


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


ArrayGrad = Optional[np.ndarray]
BackwardFn = Callable[[np.ndarray], Sequence[ArrayGrad]]


def apply_op(
    op: str,
    inputs: Sequence[Union[Tensor, None]],
    out_array: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap an op result, recording it when a tape is active.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    entry of `inputs`, in order. Entries of `inputs` that are None are
    non-differentiable slots and always receive None.
    """
    tape = active_tape()
    track = False
    input_ids: tuple = ()
    if tape is not None:
        input_ids = tuple(
            tape.id_of(t) if isinstance(t, Tensor) else None for t in inputs
        )
        track = any(i is not None for i in input_ids)
    out = Tensor._wrap(out_array, requires_grad=track)
    if track:
        out_id = tape._track_output(out)
        tape._records.append(_OpRecord(op, out_id, input_ids, backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> dict[int, Tensor]:
    """Reverse-replay the tape from a scalar loss.

    Returns {node_id: gradient} for every watched leaf; leaves the loss does
    not depend on get zero gradients. Accumulation order is fixed by tape
    order, so results are bitwise deterministic.
    """
    if loss.size != 1:
        raise UsageError("backward() requires a scalar loss")
    if tape is None:
        tape = loss._tape if loss._tape is not None else active_tape()
    if tape is None or loss._tape is not tape or loss.node_id is None:
        raise UsageError("loss is not recorded on a live tape")

    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for rec in reversed(tape._records):
        g_out = grads.pop(rec.out_id, None)
        if g_out is None:
            continue
        g_inputs = rec.backward(g_out)
        for nid, g in zip(rec.input_ids, g_inputs):
            if nid is None or g is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = g

    result: dict[int, Tensor] = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        result[nid] = Tensor._wrap(np.asarray(g, dtype=leaf.dtype))
    return result


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt
