"""Memoryless network-kriging predictor.

Each slot is handled on its own: a generalized-least-squares fit of a
low-dimensional trend to the measured paths, then the kriging correction of
the residual onto the unmeasured ones. No state carries across slots, which
is what separates it from the KKF.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SymmetricPSD, check_psd

__all__ = ["KrigingConfig", "KrigingResult", "network_kriging_predict"]


@dataclass(eq=False)
class KrigingConfig:
    """Inputs to the per-slot GLS + kriging predictor.

    Attributes:
        c_nu (ndarray(P, P)): Spatial residual covariance.
        sigma2 (float): Measurement noise variance.
        trend_basis (ndarray(P, K)): Columns spanning the trend. Defaults to
            one all-ones column, i.e. a single shared level per slot.
    """

    c_nu: np.ndarray
    sigma2: float
    trend_basis: np.ndarray = field(default=None)

    def __post_init__(self):
        self.c_nu = check_psd(self.c_nu, "c_nu")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        p = self.c_nu.shape[0]
        if self.trend_basis is None:
            self.trend_basis = np.ones((p, 1))
        basis = np.asarray(self.trend_basis, dtype=float)
        if basis.ndim == 1:
            basis = basis[:, None]
        if basis.shape[0] != p:
            raise ValueError(f"trend_basis has {basis.shape[0]} rows, expected {p}")
        self.trend_basis = basis

    @property
    def n_paths(self) -> int:
        return self.c_nu.shape[0]


@dataclass(frozen=True, eq=False)
class KrigingResult:
    measured: np.ndarray
    unmeasured: np.ndarray
    predicted: np.ndarray
    trend_coef: np.ndarray


def network_kriging_predict(config: KrigingConfig, selection, y_s) -> KrigingResult:
    """Predict the unmeasured paths of one slot.

    Args:
        config (KrigingConfig): Covariance, noise level and trend basis.
        selection (array of int): Measured path ids; sorted internally, and
            ``y_s`` must follow the same sorted order.
        y_s (ndarray(|S|)): Measurements on ``selection``.

    Returns:
        KrigingResult: predictions on the sorted complement of ``selection``.

    Raises:
        ValueError: If fewer paths are measured than there are trend
            columns, or the measured rows of the basis are rank deficient.
    """
    p = config.n_paths
    ids = np.unique(np.asarray(selection, dtype=int))
    y_s = np.asarray(y_s, dtype=float).reshape(-1)
    if y_s.shape[0] != ids.size:
        raise ValueError(f"{y_s.shape[0]} measurements for {ids.size} selected paths")
    rest = np.setdiff1d(np.arange(p), ids)
    basis = config.trend_basis
    k = basis.shape[1]
    b_s = basis[ids]
    if ids.size < k or np.linalg.matrix_rank(b_s) < k:
        raise ValueError(
            f"trend basis is rank deficient on the {ids.size} measured paths (needs rank {k})")

    sigma = SymmetricPSD(config.c_nu[np.ix_(ids, ids)] + config.sigma2 * np.eye(ids.size),
                         "measured residual covariance")
    w_b = sigma.solve(b_s)
    normal = b_s.T @ w_b
    coef = np.linalg.solve(normal, w_b.T @ y_s)
    resid = y_s - b_s @ coef
    pred = basis[rest] @ coef
    cross = config.c_nu[np.ix_(rest, ids)]
    if rest.size and np.any(cross):
        pred = pred + cross @ sigma.solve(resid)
    return KrigingResult(ids, rest, pred, coef)
