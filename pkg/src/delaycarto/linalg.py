"""Dense symmetric-PSD kernels shared by the filter, the estimators and the
path-selection routines.

Everything works in float64. Factorization failures raise
:class:`FactorizationError` carrying the *role* of the offending matrix (e.g.
``"innovation covariance"``) so callers can tell which model quantity broke.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg as sla

__all__ = [
    "FactorizationError",
    "SymmetricPSD",
    "symmetrize",
    "is_psd",
    "check_psd",
    "chol_factor",
    "chol_solve",
    "logdet",
    "rank_one_extend_inverse",
    "block_extend_inverse",
    "project_psd",
]


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization failed for a named matrix role."""

    def __init__(self, role: str, detail: str = ""):
        self.role = role
        msg = f"{role}: matrix is not positive definite"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def is_psd(a, rel_tol=1e-10) -> bool:
    """True when ``a`` is symmetric and its smallest eigenvalue is at least
    ``-rel_tol * scale`` where scale is the trace (or 1 for a zero matrix)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if a.size == 0:
        return True
    norm = np.abs(a).max()
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(norm, 1.0)):
        return False
    scale = max(abs(np.trace(a)), norm, np.finfo(float).tiny)
    return bool(np.linalg.eigvalsh(symmetrize(a)).min() >= -rel_tol * scale)


def check_psd(a, role: str, rel_tol=1e-10):
    """Return ``a`` as a symmetric float array or raise ``ValueError``."""
    a = np.asarray(a, dtype=float)
    if not is_psd(a, rel_tol):
        raise ValueError(f"{role} must be a symmetric positive semidefinite matrix")
    return symmetrize(a)


def chol_factor(a, role="matrix", shift=False):
    """Lower Cholesky factor of ``a``.

    With ``shift=True`` a single diagonal jitter of ``1e-9 * trace / n`` is
    tried after the first failure; a second failure is an error.
    """
    a = symmetrize(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if not shift or a.shape[0] == 0:
            raise FactorizationError(role) from None
    n = a.shape[0]
    jitter = 1e-9 * max(np.trace(a), 0.0) / n
    if jitter == 0.0:
        jitter = 1e-12
    try:
        return np.linalg.cholesky(a + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        raise FactorizationError(role, f"after diagonal shift {jitter:.3g}") from None


class SymmetricPSD:
    """A symmetric positive-definite matrix with a cached Cholesky factor.

    Args:
        a (ndarray(n, n)): The matrix. Symmetrized on construction.
        role (str): Name used in error messages.
    """

    def __init__(self, a, role="matrix"):
        self.a = symmetrize(a)
        self.role = role
        self._chol = None

    @property
    def chol(self):
        if self._chol is None:
            self._chol = chol_factor(self.a, self.role)
        return self._chol

    def solve(self, rhs):
        return sla.cho_solve((self.chol, True), rhs)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def inv(self):
        return symmetrize(self.solve(np.eye(self.a.shape[0])))


def chol_solve(a, rhs, role="matrix"):
    """Solve ``a x = rhs`` for symmetric positive-definite ``a``."""
    if isinstance(a, SymmetricPSD):
        return a.solve(rhs)
    return SymmetricPSD(a, role).solve(rhs)


def logdet(a, role="matrix") -> float:
    """Log-determinant of a symmetric positive-definite matrix.

    The empty matrix has log-determinant 0.
    """
    if isinstance(a, SymmetricPSD):
        return a.logdet()
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    return SymmetricPSD(a, role).logdet()


def rank_one_extend_inverse(v, w, d):
    """Grow an inverse by one row and column.

    If ``v = inv(A)`` and ``B = [[A, w], [w^T, c]]`` with Schur complement
    ``d = c - w^T v w > 0``, returns ``inv(B)`` as
    ``[[v + u u^T / d, u / d], [u^T / d, 1 / d]]`` with ``u = -v w``.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float).reshape(-1)
    if not d > 0:
        raise FactorizationError("Schur complement", f"d = {d!r}")
    u = -v @ w
    k = v.shape[0]
    out = np.empty((k + 1, k + 1))
    out[:k, :k] = v + np.outer(u, u) / d
    out[:k, k] = u / d
    out[k, :k] = u / d
    out[k, k] = 1.0 / d
    return out


def project_psd(a, floor=0.0):
    """Clip the eigenvalues of symmetric ``a`` from below at ``floor``."""
    a = symmetrize(a)
    if a.size == 0:
        return a
    vals, vecs = np.linalg.eigh(a)
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)


def block_extend_inverse(v, w, c):
    """Grow an inverse by a block.

    With ``v = inv(A)`` returns ``inv([[A, w], [w^T, c]])`` for an
    ``n x k`` block ``w`` and ``k x k`` block ``c``, via the Schur complement
    ``d = c - w^T v w``. Raises :class:`FactorizationError` if ``d`` is not
    positive definite.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    c = np.asarray(c, dtype=float)
    n, k = w.shape
    u = -v @ w
    d = symmetrize(c + w.T @ u)
    d_inv = SymmetricPSD(d, "Schur complement").inv()
    ud = u @ d_inv
    out = np.empty((n + k, n + k))
    out[:n, :n] = v + ud @ u.T
    out[:n, n:] = ud
    out[n:, :n] = ud.T
    out[n:, n:] = d_inv
    return out
