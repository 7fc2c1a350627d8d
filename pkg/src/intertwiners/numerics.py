"""Dense float64 kernels and the seeded random source.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
routines here are the small-matrix primitives the rest of the package leans
on: a fixed-order matrix product, LU inversion, Gram-Schmidt, and a
one-sided Jacobi SVD.

All randomness flows through :func:`make_rng`, which wraps numpy's Philox
counter-based bit generator. Philox output depends only on (key, counter), so
a given seed yields the same stream on every platform.
"""
from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DimensionError, SingularMatrixError

__all__ = [
    "make_rng",
    "spawn",
    "as_matrix",
    "matmul",
    "transpose",
    "frobenius_norm",
    "lu_factor",
    "lu_inverse",
    "qr_orthonormalize",
    "random_orthogonal",
    "singular_values",
    "nuclear_norm",
    "gaussian_fill",
    "lognormal_fill",
]

PIVOT_RTOL = 1e-12
DEFAULT_MAX_CONDITION = 1e12


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for a non-negative 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``."""
    seeds = rng.integers(0, 2**63, size=n)
    return [make_rng(int(s)) for s in seeds]


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order over k.

    Each entry is accumulated as ``((a[i,0]b[0,j] + a[i,1]b[1,j]) + ...)``,
    so results are bit-identical to the naive triple loop.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def lu_factor(a):
    """LU decomposition with partial pivoting.

    Returns ``(lu, perm, sign)`` where ``lu`` packs the unit-lower factor
    below the diagonal and the upper factor on and above it, ``perm`` is the
    row order, and ``sign`` is the permutation parity.

    Raises:
        SingularMatrixError: if a pivot falls below ``1e-12 * max|a|``.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionError(f"LU needs a square matrix, got {a.shape}")
    lu = a.copy()
    perm = np.arange(n)
    sign = 1.0
    scale = np.max(np.abs(a)) if a.size else 0.0
    tol = PIVOT_RTOL * scale
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if scale == 0.0 or abs(lu[p, k]) <= tol:
            raise SingularMatrixError(
                f"matrix is singular to tolerance (pivot {abs(lu[p, k]):.3e} at column {k})"
            )
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm, sign


def lu_inverse(a, max_condition: float = DEFAULT_MAX_CONDITION) -> np.ndarray:
    """Invert a square matrix through its pivoted LU factorization.

    The infinity-norm condition number ``|a| |a^-1|`` is checked against
    ``max_condition`` after inversion.
    """
    a = as_matrix(a)
    lu, perm, _ = lu_factor(a)
    n = a.shape[0]
    # forward substitution on the permuted identity, then back substitution
    y = np.eye(n)[perm]
    for i in range(n):
        y[i] -= lu[i, :i] @ y[:i]
    x = y
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lu[i, i + 1:] @ x[i + 1:]) / lu[i, i]
    cond = np.max(np.sum(np.abs(a), axis=1)) * np.max(np.sum(np.abs(x), axis=1))
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularMatrixError(f"condition estimate {cond:.3e} exceeds {max_condition:.1e}")
    return x


def _gram_schmidt(a: np.ndarray) -> np.ndarray | None:
    q = a.copy()
    n = q.shape[1]
    for j in range(n):
        norm0 = np.linalg.norm(q[:, j])
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        # second pass keeps orthogonality at ~1e-15 for ill-conditioned input
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm0 == 0.0 or norm <= 1e-10 * norm0:
            return None
        q[:, j] /= norm
    return q


def qr_orthonormalize(a, rng: np.random.Generator, max_retries: int = 8) -> np.ndarray:
    """Orthonormalize the columns of a square matrix into a rotation.

    Modified Gram-Schmidt with re-orthogonalization. If the input is rank
    deficient a fresh Gaussian matrix is drawn from ``rng`` (at most
    ``max_retries`` times). The first column is negated when needed so the
    result has determinant +1.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    for _ in range(max_retries + 1):
        q = _gram_schmidt(a)
        if q is not None:
            if np.linalg.slogdet(q)[0] < 0:
                q[:, 0] = -q[:, 0]
            return q
        a = gaussian_fill(rng, n, n)
    raise ConvergenceError(f"rank-deficient input after {max_retries} redraws")


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    return qr_orthonormalize(gaussian_fill(rng, n, n), rng)


def singular_values(a, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Singular values in descending order via one-sided Jacobi rotations.

    Raises:
        ConvergenceError: if columns are still not mutually orthogonal after
            ``max_sweeps`` sweeps.
    """
    u = as_matrix(a).copy()
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    if u.size == 0:
        return np.zeros(0)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        if not rotated:
            return np.sort(np.linalg.norm(u, axis=0))[::-1]
    raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def nuclear_norm(a) -> float:
    """Sum of singular values."""
    return float(np.sum(singular_values(a)))


def gaussian_fill(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.standard_normal((rows, cols))


def lognormal_fill(rng: np.random.Generator, n: int, sigma: float = 1.0) -> np.ndarray:
    """Positive lognormal draws rescaled so their arithmetic mean is 1."""
    x = np.exp(sigma * rng.standard_normal(n))
    return x / np.mean(x)
