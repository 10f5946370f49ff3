"""Dense tensors and the reverse-mode gradient tape.

The engine computes on plain numpy arrays wrapped in :class:`Tensor`.
Recording happens on an explicit :class:`Tape`: operations executed with a
tape argument append one record each, and :func:`backward` replays the
records in reverse, accumulating gradients additively whenever a value
feeds several consumers.  Running an operation without a tape is a plain
forward evaluation (inference mode).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array with an optional gradient slot.

    Feature maps are rank-4 ``(batch, channels, height, width)``; weights,
    biases and scalar losses use whatever rank suits them.  ``data`` is
    always contiguous.  ``float32`` is the training precision; ``float64``
    exists for gradient checking.
    """

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and arr.dtype in FLOAT_DTYPES):
            arr = arr.astype(np.float32)  # float32 is the training default
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


# A backward rule receives the gradient at the record's output and returns
# one gradient array (or None) per recorded input, in order.
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations for one forward pass.

    Topological by construction: an operation's inputs always carry node
    ids assigned before its output.  A tape is consumed by one backward
    pass and cannot be reused.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], BackwardFn]] = []
        self._tensors: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._next_id = 0
        self.consumed = False

    def _node(self, t: Tensor) -> int:
        # A tensor may carry a stale id from an earlier tape; re-register.
        nid = t.node_id
        if nid is None or self._tensors.get(nid) is not t:
            nid = self._next_id
            self._next_id += 1
            t.node_id = nid
            self._tensors[nid] = t
        return nid

    def record(self, inputs: Iterable[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise InvalidArgument("tape already consumed by a backward pass")
        in_ids = tuple(self._node(t) for t in inputs)
        out_id = self._node(output)
        self._produced.add(out_id)
        self._records.append((out_id, in_ids, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


def backward(tape: Tape, loss: Tensor, params=None) -> None:
    """Propagate gradients from a scalar loss through the tape.

    Populates ``grad`` on every leaf tensor (inputs and parameters) that
    the loss reaches; intermediate gradients are freed as soon as their
    producing record has been processed.  When ``params`` (an iterable of
    tensors, e.g. a ParamStore) is given, entries the loss does not reach
    get an explicit zero gradient.  The tape is consumed.
    """
    if loss.data.size != 1:
        raise InvalidArgument(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    if tape.consumed:
        raise InvalidArgument("tape already consumed by a backward pass")
    if loss.node_id is None or tape._tensors.get(loss.node_id) is not loss:
        raise InvalidArgument("loss tensor was not recorded on this tape")

    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for out_id, in_ids, fn in reversed(tape._records):
        g_out = grads.pop(out_id, None)
        if g_out is None:
            continue  # branch not reached by the loss
        for in_id, g in zip(in_ids, fn(g_out)):
            if g is None:
                continue
            acc = grads.get(in_id)
            if acc is None:
                grads[in_id] = g
            else:
                acc += g

    # Only leaves remain: assign their grad slots.
    for nid, g in grads.items():
        tape._tensors[nid].grad = g

    if params is not None:
        reached = {id(tape._tensors[nid]) for nid in grads}
        for t in params:
            if id(t) not in reached:
                t.grad = np.zeros_like(t.data)

    tape.consumed = True
    tape._records.clear()
    tape._tensors.clear()
    tape._produced.clear()
