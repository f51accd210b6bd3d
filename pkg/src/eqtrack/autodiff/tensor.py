"""Immutable float64 tensors and a reverse-mode tape."""

from __future__ import annotations

import threading

import numpy as np


class NonFiniteError(ValueError):
    """Raised when NaN or Inf values reach a tensor creation boundary."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    The payload is read-only; operations always return new tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            label = f" {name!r}" if name else ""
            raise NonFiniteError(f"tensor{label} contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    # operator sugar; the ops module owns the semantics
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "outputs", "vjp")

    def __init__(self, op, inputs, outputs, vjp):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager; ops that touch a tensor with ``requires_grad``
    append a node. Node order is topological by construction.

        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []
        self._producer = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, op, inputs, outputs, vjp):
        idx = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), tuple(outputs), vjp))
        for out in outputs:
            out.requires_grad = True
            self._producer[id(out)] = idx

    def backward(self, loss, wrt=None):
        """Gradients of scalar ``loss`` with respect to leaf tensors.

        Returns a dict keyed by leaf tensor; also sets ``leaf.grad``. When
        ``wrt`` is given only those tensors are reported (zeros if unreached).
        Calling backward twice gives identical results.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._producer:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones(loss.shape)}
        leaves = {}
        for node in reversed(self.nodes[: self._producer[id(loss)] + 1]):
            out_grads = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros(o.shape) if g is None else g for o, g in zip(node.outputs, out_grads)]
            in_grads = node.vjp(*out_grads)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in self._producer:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float64)
        result = {}
        targets = list(leaves.values()) if wrt is None else list(wrt)
        for t in targets:
            g = grads.get(id(t))
            g = np.zeros(t.shape) if g is None else g.reshape(t.shape)
            t.grad = g
            result[t] = g
        return result
