"""Reverse-mode tensor engine: Tensor values and the gradient tape.

All arithmetic runs in float64. Operations (see ``ops``) execute eagerly on
numpy arrays and, while a :class:`Tape` is active, append a record with a
backward rule. ``Tape.backward`` replays those records in reverse and
accumulates gradients additively into every tensor that requires them.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError

# Guards every op output against NaN/Inf when enabled (slow-ish; meant for
# tests and debugging, not the inner training loop).
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Dense n-dimensional float64 array with an attached gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking. Shares the underlying buffer."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, rng=None, shape=None) -> Tensor:
    """A trainable leaf tensor."""
    if data is None:
        data = rng.standard_normal(shape)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class _TapeNode:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Execution-ordered record of operations for one forward pass.

    The record order is a topological order by construction: an operation can
    only run after the operations that produced its inputs. A tape drives a
    single backward pass; replaying it again without a fresh forward pass
    raises.
    """

    def __init__(self):
        self._nodes: list[_TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, inputs, output, backward_fn) -> None:
        self._nodes.append(_TapeNode(inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tracked tensor."""
        if self._consumed:
            raise RuntimeError(
                "tape already replayed; re-running backward without a new forward pass is an error"
            )
        self._consumed = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        # The first contribution to a tensor borrows the rule's output array;
        # a second one replaces it with a fresh sum. Rules may hand the same
        # array to several inputs, so borrowed buffers are never mutated.
        owned: set[int] = set()
        for node in reversed(self._nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            input_grads = node.backward_fn(out_grad)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.data.shape:
                    raise ShapeError(
                        f"backward rule produced grad shape {grad.shape} "
                        f"for tensor shape {tensor.data.shape}"
                    )
                if tensor.grad is None:
                    tensor.grad = grad
                elif id(tensor) in owned:
                    tensor.grad += grad
                else:
                    tensor.grad = tensor.grad + grad
                    owned.add(id(tensor))


def record_op(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    """Create the output tensor of an op and register it on the active tape.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order. It must not mutate any forward value.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericalError("operation produced non-finite values from finite inputs")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward_fn)
    return out
