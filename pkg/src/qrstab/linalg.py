"""Small dense linear algebra: positive-diagonal QR, LU solves, symmetric extremes.

Everything here works on plain ``numpy`` arrays of modest size (d up to ~50).
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

SINGULAR_RTOL = 1e-14


class SingularMatrixError(ArithmeticError):
    """Raised when a factorization meets a pivot below the singularity threshold."""


def _as_square(m) -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def qr_positive(m) -> tuple[np.ndarray, np.ndarray]:
    """Householder QR of a square matrix with the diagonal of ``r`` made positive.

    The positive-diagonal convention makes the factorization unique, which is
    what the discrete QR iteration relies on.
    """
    r = _as_square(m)
    n = r.shape[0]
    scale = np.max(np.abs(r))
    if n == 2:
        return _qr_positive_2x2(r, scale)
    q = np.eye(n)
    for k in range(n - 1):
        x = r[k:, k]
        alpha = np.sqrt(x @ x)
        if alpha == 0.0:
            continue
        v = x.copy()
        # reflect onto -sign(x0)*alpha*e1 to avoid cancellation
        v[0] += alpha if x[0] >= 0.0 else -alpha
        vnorm2 = v @ v
        if vnorm2 == 0.0:
            continue
        beta = 2.0 / vnorm2
        r[k:, k:] -= beta * np.outer(v, v @ r[k:, k:])
        q[:, k:] -= beta * np.outer(q[:, k:] @ v, v)
        r[k + 1 :, k] = 0.0
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    r *= signs[:, None]
    q *= signs[None, :]
    if scale == 0.0 or np.min(np.diag(r)) <= SINGULAR_RTOL * scale:
        raise SingularMatrixError("QR pivot below singularity threshold")
    return q, np.triu(r)


def _qr_positive_2x2(m: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    # one Givens rotation; hot path of long discrete QR runs in the plane
    a, c = m[0, 0], m[1, 0]
    r11 = float(np.hypot(a, c))
    if r11 <= SINGULAR_RTOL * scale or scale == 0.0:
        raise SingularMatrixError("QR pivot below singularity threshold")
    co, si = a / r11, c / r11
    r12 = co * m[0, 1] + si * m[1, 1]
    r22 = co * m[1, 1] - si * m[0, 1]
    sgn = 1.0 if r22 >= 0.0 else -1.0
    if sgn * r22 <= SINGULAR_RTOL * scale:
        raise SingularMatrixError("QR pivot below singularity threshold")
    return np.array([[co, -sgn * si], [si, sgn * co]]), np.array([[r11, r12], [0.0, sgn * r22]])


class LinearSolveCounter:
    """Mutable tally of linear solves; pass one to :func:`solve` to be charged."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


def lu_factor(m) -> tuple[np.ndarray, np.ndarray]:
    """LU with partial pivoting; raises :class:`SingularMatrixError` on tiny pivots."""
    a = _as_square(m)
    with warnings.catch_warnings():
        # exact singularity is reported below with our own threshold
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    scale = np.max(np.abs(a))
    if scale == 0.0 or np.min(np.abs(np.diag(lu))) <= SINGULAR_RTOL * scale:
        raise SingularMatrixError("LU pivot below singularity threshold")
    return lu, piv


def lu_solve(factors: tuple[np.ndarray, np.ndarray], b, counter: LinearSolveCounter | None = None) -> np.ndarray:
    x = scipy.linalg.lu_solve(factors, np.asarray(b, dtype=float), check_finite=False)
    if counter is not None:
        counter.count += 1
    return x


def solve(m, b, counter: LinearSolveCounter | None = None) -> np.ndarray:
    """Solve ``m x = b``, charging one linear solve to ``counter`` if given."""
    return lu_solve(lu_factor(m), b, counter)


def sym_eig_extremes(s) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix.

    The input is symmetrized first, so slightly asymmetric round-off is harmless.
    """
    a = _as_square(s)
    a = 0.5 * (a + a.T)
    if a.shape[0] == 1:
        v = float(a[0, 0])
        return v, v
    if a.shape[0] == 2:
        # closed form avoids LAPACK overhead on the hot path
        mean = 0.5 * (a[0, 0] + a[1, 1])
        rad = float(np.hypot(0.5 * (a[0, 0] - a[1, 1]), a[0, 1]))
        return float(mean - rad), float(mean + rad)
    w = np.linalg.eigvalsh(a)
    return float(w[0]), float(w[-1])
