"""Dense matrix helpers shared by the rest of the package.

Matrices and vectors are plain float32 numpy arrays (2-D and 1-D).
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when array dimensions are incompatible or empty."""


class DataError(ValueError):
    """Raised for out-of-range or non-finite data."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    Every output entry is accumulated over the inner dimension from left to
    right in float32, so the result is bit-identical to a naive triple loop
    performing the same float32 operations.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def softmax_row(x) -> np.ndarray:
    x = as_vector(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise DataError("softmax input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()
