"""Complex linear algebra kernels for small per-frequency demixing problems.

Everything here operates on matrices of size I x I where I is the channel
count (2-8 typical), optionally stacked along a leading frequency axis.
"""

import numpy as np

VAR_FLOOR = 1e-10
RCOND_MIN = 1e-13


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a solve target is singular or numerically unusable.

    Attributes:
        rcond: reciprocal condition estimate of the offending matrix, if known.
        frequency: frequency-bin index the failure occurred at, if applicable.
    """

    def __init__(self, message, rcond=None, frequency=None):
        super().__init__(message)
        self.rcond = rcond
        self.frequency = frequency


def weighted_cov(x, weights, floor=VAR_FLOOR):
    """Weighted covariance (1/N) sum_n x(:,n) x(:,n)^H / w(n).

    Args:
        x: complex observations, shape (I, N).
        weights: positive reals of length N; floored at ``floor`` before the
            division.
        floor: lower bound applied to the weights.

    Returns:
        Hermitian (I, I) matrix (symmetrized to kill rounding skew).
    """
    x = np.asarray(x)
    n = x.shape[1]
    if n == 0:
        raise ValueError("weighted covariance of zero frames is undefined")
    w = np.maximum(np.asarray(weights, dtype=np.float64), floor)
    cov = (x / w) @ x.conj().T / n
    return 0.5 * (cov + cov.conj().T)


def weighted_cov_stack(x, weights, floor=VAR_FLOOR):
    """Per-frequency :func:`weighted_cov` for x of shape (F, I, N).

    ``weights`` has shape (F, N); returns (F, I, I).
    """
    n = x.shape[2]
    if n == 0:
        raise ValueError("weighted covariance of zero frames is undefined")
    w = np.maximum(np.asarray(weights, dtype=np.float64), floor)
    cov = np.einsum("fin,fn,fjn->fij", x, 1.0 / w, x.conj()) / n
    return 0.5 * (cov + cov.conj().transpose(0, 2, 1))


def regularized(mat):
    """Add the retry regularizer 1e-10 * trace/I to the diagonal."""
    size = mat.shape[-1]
    bump = 1e-10 * np.abs(np.trace(mat).real) / size
    return mat + max(bump, VAR_FLOOR) * np.eye(size)


def rcond_estimate(mat):
    """Reciprocal 2-norm condition number via SVD (cheap for small I)."""
    if not np.all(np.isfinite(mat)):
        return 0.0
    s = np.linalg.svd(mat, compute_uv=False)
    if not np.all(np.isfinite(s)) or s[0] == 0.0:
        return 0.0
    return float(s[-1] / s[0])


def solve(mat, rhs):
    """Solve mat @ w = rhs with a conditioning guard.

    Args:
        mat: square complex matrix.
        rhs: right-hand side vector, or an integer j meaning the canonical
            basis vector e_j.

    Returns:
        Solution vector with residual below 1e-10 * ||rhs|| for
        well-conditioned inputs.

    Raises:
        SingularMatrixError: if the reciprocal condition estimate falls below
            1e-13. Callers are expected to regularize (see :func:`regularized`)
            and retry once.
    """
    mat = np.asarray(mat)
    if isinstance(rhs, (int, np.integer)):
        e = np.zeros(mat.shape[0], dtype=mat.dtype)
        e[rhs] = 1.0
        rhs = e
    rcond = rcond_estimate(mat)
    if rcond < RCOND_MIN:
        raise SingularMatrixError(
            f"matrix is singular to working precision (rcond={rcond:.3e})",
            rcond=rcond,
        )
    return np.linalg.solve(mat, rhs)


def logdet_abs(mat):
    """log |det mat| via pivoted LU, stable for any nonsingular I <= 64."""
    sign, value = np.linalg.slogdet(mat)
    if sign == 0 or not np.isfinite(value):
        raise SingularMatrixError("determinant is zero; matrix is singular")
    return float(value)


def logdet_abs_stack(mats):
    """Stacked :func:`logdet_abs` for (F, I, I); returns (F,)."""
    signs, values = np.linalg.slogdet(mats)
    if np.any(signs == 0) or not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero((signs == 0) | ~np.isfinite(values))[0])
        raise SingularMatrixError(
            f"singular demixing matrix at frequency bin {bad}", frequency=bad
        )
    return values
