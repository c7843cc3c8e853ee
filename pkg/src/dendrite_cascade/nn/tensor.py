"""Tensor container and the reverse-mode tape.

Operations only record onto a tape while one is active (``with Tape() as
tape:``).  Outside a tape every op is a plain numpy computation, which is
what inference uses, so a trained model can be shared between threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Float64 array that can take part in automatic differentiation.

    Images are ``N x 3 x H x W`` and heatmaps ``N x 1 x H x W``; losses are
    0-d tensors and the classifier head produces ``N x K`` matrices.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    name: str
    inputs: tuple
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence]
    tape: "Tape" = field(repr=False, default=None)


class Tape:
    """Ordered record of the operations executed while it is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, name, inputs, output, backward):
        node = Node(name, tuple(inputs), output, backward, self)
        output._node = node
        self.nodes.append(node)
        return node

    def reset(self):
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self._consumed = False

    def _owns(self, t):
        return t._node is not None and t._node.tape is self

    def backward(self, loss: Tensor, visit_log=None):
        """Propagate d(loss)/d(x) into ``.grad`` of every tensor that requires it.

        Leaf gradients accumulate, so callers zero them between steps.
        ``visit_log``, if given, receives each node as it is processed.
        """
        if self._consumed:
            raise UsageError("backward already ran on this tape; call reset() first")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise UsageError("backward needs a scalar loss tensor")
        if not self._owns(loss):
            raise UsageError("loss was not produced on this tape (detached scalar)")
        self._consumed = True

        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            if visit_log is not None:
                visit_log.append(node)
            node.output.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if self._owns(t):
                    key = id(t)
                    pending[key] = gi if key not in pending else pending[key] + gi
                else:
                    t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
        # drop the back-references so the graph is freed without the cycle collector
        for node in self.nodes:
            node.output._node = None
            node.tape = None


def record(name, inputs, out_data, backward):
    """Wrap ``out_data`` in a Tensor, recording it if a tape is active."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, backward)
    return out
