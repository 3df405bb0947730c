"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer.
Differentiable operations (see :mod:`attnreid.ops`) record a backward
closure on the :class:`Tape` their inputs participate in; tensors whose
``tape`` is ``None`` are constants and receive no gradient.

``Tape.backward`` walks the recorded nodes in exact reverse construction
order, which is a valid reverse topological order because an operation's
inputs always exist before its output.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, TapeError


class Tensor:
    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, dtype=None, tape=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.tape = tape

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of the same values (no tape participation)."""
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Add ``g`` into the gradient buffer.

        ``own=True`` promises ``g`` is freshly allocated and writable, so
        the first accumulation can take it without copying.
        """
        if self.tape is None:
            return
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            if own and g.dtype == self.data.dtype and g.flags.writeable:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, tape={self.tape is not None})"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended at construction time; ``backward`` replays them in
    reverse. A tape can run backward once; ``reset`` clears it for reuse.
    """

    def __init__(self):
        self._nodes = []
        self._tensors = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def watch(self, *tensors: Tensor) -> None:
        """Mark leaf tensors (parameters, inputs) as gradient targets."""
        for t in tensors:
            if t.tape is not None and t.tape is not self:
                raise TapeError("tensor already belongs to a different tape")
            t.tape = self
            t.grad = None
            self._tensors.append(t)

    def record(self, out: Tensor, backward) -> None:
        out.tape = self
        self._nodes.append(backward)
        self._tensors.append(out)

    def backward(self, out: Tensor, seed=None) -> None:
        """Populate ``grad`` on every participating tensor reachable from ``out``."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; reset() first")
        if out.tape is not self:
            raise TapeError("output tensor does not belong to this tape")
        if seed is None:
            if out.data.size != 1:
                raise TapeError("backward without a seed requires a scalar output")
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=out.data.dtype)
            if seed.shape != out.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} does not match output shape {out.data.shape}"
                )
        self._consumed = True
        out.grad = seed.copy()
        for node in reversed(self._nodes):
            node()

    def release(self) -> None:
        """Detach every tensor that participated; keeps their grads."""
        for t in self._tensors:
            t.tape = None
        self._nodes.clear()
        self._tensors.clear()

    def reset(self) -> None:
        self.release()
        self._consumed = False


def active_tape(*tensors) -> Tape | None:
    """The single tape the given tensors participate in, or None.

    Mixing tensors from two live tapes is rejected; constants pass through.
    """
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operation inputs belong to different tapes")
    return tape
