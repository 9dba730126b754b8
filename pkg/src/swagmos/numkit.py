"""Dense linear algebra and a counter-based Gaussian RNG.

Matrices are plain 2-D ``float64`` numpy arrays. Factorisations go through
LAPACK ``dpotrf``/``dpotrs`` so that a failing leading minor can be reported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .errors import DecompositionError, EmptyRequestError, ShapeError, SingularityError

SYMMETRY_TOL = 1e-8
# pivot^2 relative to the largest diagonal entry below this is treated as singular
_PIVOT_RTOL = 1e-14


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("matrix has non-finite entries")
    return m


def check_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol * scale:
        raise ShapeError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`DecompositionError` naming the first leading minor that is
    not positive definite (1-based, LAPACK convention).
    """
    a = as_matrix(a)
    check_symmetric(a)
    if a.shape[0] == 0:
        return a.copy()
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DecompositionError(
            f"matrix is not positive definite: leading minor of order {info} failed"
        )
    if info < 0:
        raise DecompositionError(f"dpotrf rejected argument {-info}")
    return np.tril(c)


def solve_damped(a, b, damping: float = 0.0) -> np.ndarray:
    """Solve ``(a + damping * I) x = b`` for symmetric ``a`` via Cholesky."""
    a = as_matrix(a)
    check_symmetric(a)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape[:1] != (n,):
        raise ShapeError(f"right-hand side has length {b.shape[:1]}, matrix is {n}x{n}")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    if n == 0:
        return b.copy()
    m = a + damping * np.eye(n)
    c, info = lapack.dpotrf(m, lower=1, clean=1)
    if info != 0:
        raise SingularityError(
            f"(A + {damping:g} I) is singular or indefinite: "
            f"pivot {info} of {n} is non-positive"
        )
    piv = np.diag(c) ** 2
    k = int(np.argmin(piv))
    if piv[k] <= _PIVOT_RTOL * float(np.max(np.abs(np.diag(m)))):
        raise SingularityError(
            f"(A + {damping:g} I) is numerically singular: smallest pivot {piv[k]:.3e} at index {k}"
        )
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise SingularityError(f"dpotrs failed with info={info}")
    return x


@dataclass(frozen=True)
class RngState:
    """Position in a counter-based Gaussian stream.

    Draw ``i`` of the stream for a given seed is a pure function of
    ``(seed, i)``: it uses Philox-4x64 block ``i`` (key = seed) and a
    Box-Muller transform of the first two 64-bit words. Streams therefore
    reproduce bit-for-bit across platforms and can be split or resumed.
    """

    seed: int
    position: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.position < 0:
            raise ValueError("position must be non-negative")


def _uniform_open(words: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted off zero: values in (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normal(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Draw ``n`` i.i.d. N(0, 1) values; returns the draws and the advanced state."""
    if n < 1:
        raise EmptyRequestError("standard_normal needs n >= 1")
    bg = np.random.Philox(key=rng.seed)
    if rng.position:
        bg.advance(rng.position)
    words = bg.random_raw(4 * n).reshape(n, 4)
    u1 = _uniform_open(words[:, 0])
    u2 = _uniform_open(words[:, 1])
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z, RngState(rng.seed, rng.position + n)
