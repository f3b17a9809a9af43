"""Weight tensor with an attached gradient slot.

Activations travel through the network as plain float64 ndarrays; Tensor is
the carrier for learnable parameters (and for reporting input gradients),
pairing values with a same-shaped gradient accumulator.
"""

from __future__ import annotations

import numpy as np

from ..errors import shape_error


class Tensor:
    """Float64 value array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if grad is not None:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise shape_error(
                    "nn", f"grad shape {grad.shape} != value shape {self.data.shape}"
                )
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"
