"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records operations define-by-run while a `recording(tape)` context is
active. Outside the context every op runs as plain numpy, producing
bit-identical values. backward() walks the tape once, in reverse recording
order, and returns gradients for the leaf tensors that requested them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """Dense n-dimensional float64 value, optionally tracked on a tape.

    `node_id` is only meaningful for the tape stored in `_tape`; a tensor may
    be reused across tapes and is re-registered lazily as a leaf.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Value-sharing copy that never receives gradients."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops.py (bound at import time)
    def __add__(self, other):
        return _OPS["add"](self, other)

    def __radd__(self, other):
        return _OPS["add"](other, self)

    def __sub__(self, other):
        return _OPS["sub"](self, other)

    def __rsub__(self, other):
        return _OPS["sub"](other, self)

    def __mul__(self, other):
        return _OPS["mul"](self, other)

    def __rmul__(self, other):
        return _OPS["mul"](other, self)

    def __truediv__(self, other):
        return _OPS["div"](self, other)

    def __rtruediv__(self, other):
        return _OPS["div"](other, self)

    def __matmul__(self, other):
        return _OPS["matmul"](self, other)

    def __neg__(self):
        return _OPS["neg"](self)

    def __getitem__(self, key):
        return _OPS["getitem"](self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _OPS["reshape"](self, shape)

    def sum(self, axis=None, keepdims=False):
        return _OPS["tsum"](self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _OPS["tmean"](self, axis, keepdims)


_OPS = {}  # filled by ops.py to avoid a circular import


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("parents", "backward_fn", "leaf")

    def __init__(self, parents, backward_fn, leaf=None):
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        """Discard all recorded nodes; the tape may record and run again."""
        self._nodes = []
        self._consumed = False

    def _register_leaf(self, tensor):
        node_id = len(self._nodes)
        self._nodes.append(_Node((), None, leaf=tensor))
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def node_of(self, tensor):
        """Node id of `tensor` on this tape, registering trainable leaves."""
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        if tensor.requires_grad:
            return self._register_leaf(tensor)
        return None

    def record(self, out, parent_ids, backward_fn):
        node_id = len(self._nodes)
        self._nodes.append(_Node(tuple(parent_ids), backward_fn))
        out.node_id = node_id
        out._tape = self
        return out

    def backward(self, loss):
        """Gradients of scalar `loss` w.r.t. every trainable leaf.

        Each node is visited exactly once; a second backward on the same
        recording is rejected until reset().
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if not self._nodes:
            raise RuntimeError("backward on an empty tape")
        if self._consumed:
            raise RuntimeError("tape already consumed; call reset() first")
        if loss._tape is not self or loss.node_id is None:
            raise RuntimeError("loss was not recorded on this tape")
        self._consumed = True

        adjoints = [None] * len(self._nodes)
        owned = [False] * len(self._nodes)
        adjoints[loss.node_id] = np.ones_like(loss.data)
        owned[loss.node_id] = True
        grads = {}
        for node_id in range(len(self._nodes) - 1, -1, -1):
            g = adjoints[node_id]
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.leaf is not None:
                grads[node.leaf] = g if owned[node_id] else g.copy()
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if adjoints[pid] is None:
                    # may alias a forward value or another adjoint; do not
                    # mutate until we own a fresh buffer
                    adjoints[pid] = pg
                elif owned[pid]:
                    adjoints[pid] += pg
                else:
                    adjoints[pid] = adjoints[pid] + pg
                    owned[pid] = True
            adjoints[node_id] = None
        return grads


_state = threading.local()


def active_tape():
    return getattr(_state, "tape", None)


@contextmanager
def recording(tape):
    """Record ops onto `tape` within the block. Tapes do not nest."""
    prev = getattr(_state, "tape", None)
    if prev is not None:
        raise RuntimeError("a tape is already recording on this thread")
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def paused():
    """Suspend recording within the block; values stay bit-identical."""
    prev = getattr(_state, "tape", None)
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def backward(loss):
    """backward() on the tape that recorded `loss`."""
    if loss._tape is None:
        raise RuntimeError("loss is not attached to any tape")
    return loss._tape.backward(loss)
