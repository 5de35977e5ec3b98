"""Dense float64 tensors with a define-by-run reverse-mode tape.

A `Tape` is opened per forward pass (``with Tape() as tape: ...``); every op executed while it
is active appends a node holding its input node ids and a backward rule. Tensors created with
``requires_grad=True`` (parameters) become leaf nodes the first time an active tape sees them.
Outside of a tape ops run eagerly and record nothing.
"""
import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from src.utils.errors import ContractError, NonFiniteError


_active_tape = contextvars.ContextVar('pladapt_tape', default=None)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'name', '_tape', '_node')

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

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
    def node(self):
        """Node id on the active tape, or None for constants and untracked tensors."""
        tape = _active_tape.get()
        if tape is None:
            return None
        return tape.lookup(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f', name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}{label})'

    def __add__(self, other):
        from src import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from src import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from src import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from src import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from src import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from src import ops
        return ops.div(self, other)

    def __neg__(self):
        from src import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from src import ops
        return ops.matmul(self, other)


@dataclass
class Node:
    inputs: Tuple[Optional[int], ...]
    backward: Optional[Callable]
    shape: tuple
    op: str


class Gradients:
    """Read access to the gradients produced by one backward sweep."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor):
        index = self._tape.lookup(tensor)
        if index is None or self._grads[index] is None:
            return np.zeros(tensor.shape)
        return self._grads[index]

    def __contains__(self, tensor):
        index = self._tape.lookup(tensor)
        return index is not None and self._grads[index] is not None


class Tape:
    def __init__(self):
        self.nodes = []
        self._leaves = {}
        # leaf tensors stay referenced so their ids cannot be recycled while the tape lives
        self._pinned = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def lookup(self, tensor):
        if tensor._tape is self:
            return tensor._node
        return self._leaves.get(id(tensor))

    def _index(self, tensor):
        if tensor._tape is self:
            return tensor._node
        if not tensor.requires_grad:
            return None
        key = id(tensor)
        if key not in self._leaves:
            self._leaves[key] = len(self.nodes)
            self.nodes.append(Node(inputs=(), backward=None, shape=tensor.shape, op='leaf'))
            self._pinned.append(tensor)
        return self._leaves[key]

    def record(self, out, inputs, backward, op):
        indices = tuple(self._index(t) for t in inputs)
        result = Tensor(out)
        if all(i is None for i in indices):
            return result
        result._tape = self
        result._node = len(self.nodes)
        self.nodes.append(Node(inputs=indices, backward=backward, shape=out.shape, op=op))
        return result

    def backward(self, root):
        if root.shape != ():
            raise ContractError(f'backward needs a scalar root, got shape {root.shape}')
        if root._tape is not self:
            raise ContractError('backward root was not recorded on this tape')

        grads = [None] * len(self.nodes)
        grads[root._node] = np.ones(())
        for index in range(root._node, -1, -1):
            g = grads[index]
            node = self.nodes[index]
            if g is None or node.backward is None:
                continue
            input_grads = node.backward(g)
            for source, grad in zip(node.inputs, input_grads):
                if source is None or grad is None:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f'non-finite gradient flowing out of {node.op!r}')
                grads[source] = grad if grads[source] is None else grads[source] + grad

        return Gradients(self, grads)


class no_tape:
    """Suspend recording, e.g. for inference or finite-difference probes."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        return False


def active_tape():
    return _active_tape.get()


def record(out, inputs, backward, op):
    """Wrap a forward result, checking finiteness and registering it on the active tape."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f'{op}: non-finite values in forward output')
    tape = _active_tape.get()
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, backward, op)


def backward(root):
    if root._tape is None:
        raise ContractError('backward root carries no tape node; run the forward pass inside a Tape')
    return root._tape.backward(root)
