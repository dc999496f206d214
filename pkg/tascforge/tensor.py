"""
Dense float64 arrays and the linear-algebra kernels the surrogate and the networks share.

A `Tensor` is a plain C-ordered `numpy.ndarray` of float64; the helpers here only add the
shape checks and failure modes the rest of the package relies on.
"""

from typing import Any

import numpy as np
import numpy.typing as npt
import scipy.linalg
from loguru import logger

from tascforge.errors import NotPositiveDefinite, ShapeMismatch, SingularMatrix

type Tensor = npt.NDArray[np.float64]

JITTER_START = 1e-8
JITTER_CEILING = 1e-2
JITTER_FACTOR = 10.0
SYMMETRY_RTOL = 1e-10


def as_tensor(data: Any, shape: tuple[int, ...] | None = None) -> Tensor:
    """
    Build a tensor from nested sequences or a flat buffer.

    :param data: Values, nested or flat.
    :param shape: Optional target shape; the flat length must equal its product.
    :return: A C-ordered float64 array.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ShapeMismatch(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ShapeMismatch(f"tensor shape must be non-empty with positive dims, got {arr.shape}")
    return arr


def _require_square(a: Tensor, name: str):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {a.shape}")


def cholesky_with_jitter(a: Tensor) -> tuple[Tensor, float]:
    """
    Lower Cholesky factor of a symmetric matrix, escalating diagonal jitter on failure.

    The unmodified matrix is tried first, then `a + λI` for λ = 1e-8, 1e-7, ... up to 1e-2.

    :return: (L, λ) with L·Lᵀ = a + λI.
    """
    a = np.asarray(a, dtype=np.float64)
    _require_square(a, "cholesky input")

    scale = max(float(np.max(np.abs(a))), 1.0)
    if not np.allclose(a, a.T, rtol=SYMMETRY_RTOL, atol=SYMMETRY_RTOL * scale):
        raise NotPositiveDefinite("matrix is not symmetric")

    eye = np.eye(a.shape[0])
    jitter = 0.0
    while True:
        try:
            return scipy.linalg.cholesky(a + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * JITTER_FACTOR
            if jitter > JITTER_CEILING * (1 + 1e-9):
                raise NotPositiveDefinite(f"factorization failed up to jitter {JITTER_CEILING:g}") from None
            logger.debug(f"cholesky failed, retrying with jitter {jitter:g}")


def cholesky(a: Tensor) -> Tensor:
    return cholesky_with_jitter(a)[0]


def triangular_solve(l: Tensor, b: Tensor, *, transposed: bool = False) -> Tensor:  # noqa: E741
    """Solve L·x = b, or Lᵀ·x = b when `transposed`, for lower-triangular L."""
    l = np.asarray(l, dtype=np.float64)  # noqa: E741
    b = np.asarray(b, dtype=np.float64)
    _require_square(l, "triangular factor")
    if b.shape[0] != l.shape[0]:
        raise ShapeMismatch(f"right-hand side has {b.shape[0]} rows, factor has {l.shape[0]}")
    if np.any(np.diag(l) == 0.0):
        raise SingularMatrix("triangular factor has a zero on its diagonal")

    return scipy.linalg.solve_triangular(l, b, lower=True, trans="T" if transposed else "N")


def cho_solve(l: Tensor, b: Tensor) -> Tensor:  # noqa: E741
    """Solve (L·Lᵀ)·x = b given the lower factor."""
    return triangular_solve(l, triangular_solve(l, b), transposed=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _require_vector_pair(u: Tensor, v: Tensor):
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatch(f"vectors must be 1-D and equal length, got {u.shape} and {v.shape}")


def dot(u: Tensor, v: Tensor) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    _require_vector_pair(u, v)
    return float(u @ v)


def _require_nonempty(u: Tensor):
    if u.size == 0:
        raise ShapeMismatch("norm of an empty vector")


def l2_norm(u: Tensor) -> float:
    u = np.asarray(u, dtype=np.float64)
    _require_nonempty(u)
    return float(np.linalg.norm(u.ravel()))


def l1_norm(u: Tensor) -> float:
    u = np.asarray(u, dtype=np.float64)
    _require_nonempty(u)
    return float(np.sum(np.abs(u)))
