r"""Kriged Kalman filter (KKF) for network-wide path delays.

The trend :math:`\chi(t)` is tracked with a Kalman filter whose measurement
noise is the spatially-correlated residual :math:`\nu_s(t) + \epsilon_s(t)`;
the residual on unmeasured paths is then kriged from the measured ones::

    y_hat_sbar = Sbar chi_hat + Sbar C_nu S^T (S C_nu S^T + sigma2 I)^-1 (y_s - S chi_hat)

With ``damping_b < 1`` the trend recursion becomes ``chi(t) = b chi(t-1) + eta``
and the one-step covariance ``M(t-1) + C_eta`` becomes ``b^2 M(t-1) + C_eta``;
``b = 1`` is the plain random walk.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .covmodel import DelayTrace, ModelParams
from .linalg import FactorizationError, chol_factor, symmetrize

__all__ = [
    "FilterState",
    "PredictionResult",
    "initial_state",
    "kf_step",
    "predict_only",
    "kkf_predict",
    "error_covariance",
    "step",
    "run_filter",
]

PSD_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FilterState:
    """Posterior of the trend after ``slot`` slots.

    ``chi_prior`` and ``m_prior`` hold the one-step prediction used by the
    update that produced this state (``b chi_hat(t-1)`` and
    ``b^2 M(t-1) + C_eta``); kriging and the error covariance need them.
    """

    chi_hat: np.ndarray
    m: np.ndarray
    slot: int = 0
    chi_prior: np.ndarray | None = None
    m_prior: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.chi_hat.shape[0]


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """KKF output for one slot.

    Attributes:
        slot (int): 1-based slot index.
        measured (ndarray): Sorted ids in S(t).
        unmeasured (ndarray): Sorted ids in the complement of S(t).
        predicted (ndarray): Predictions for ``unmeasured`` (ms).
        error_cov (ndarray): Prediction error covariance over ``unmeasured``.
        kalman_gain (ndarray(P, |S|)): Gain used by the trend update.
        chi_hat (ndarray(P)): Trend estimate after the update.
    """

    slot: int
    measured: np.ndarray
    unmeasured: np.ndarray
    predicted: np.ndarray
    error_cov: np.ndarray
    kalman_gain: np.ndarray
    chi_hat: np.ndarray

    def full_prediction(self, y_s=None) -> np.ndarray:
        """P-vector with predictions on unmeasured paths and, if given,
        the measurements on measured ones (NaN otherwise)."""
        out = np.full(self.chi_hat.shape[0], np.nan)
        out[self.unmeasured] = self.predicted
        if y_s is not None:
            out[self.measured] = y_s
        return out


def _check_state_psd(m, where):
    scale = max(float(np.trace(m)), np.finfo(float).tiny)
    lo = float(np.linalg.eigvalsh(m).min()) if m.size else 0.0
    if lo < -PSD_TOL * scale:
        raise FactorizationError(f"error covariance M after {where}",
                                 f"min eigenvalue {lo:.3g}")


def _ids(selection, n):
    ids = np.unique(np.asarray(selection, dtype=int).reshape(-1))
    if ids.size and (ids[0] < 0 or ids[-1] >= n):
        raise ValueError(f"selection references a path outside 0..{n - 1}")
    return ids


def _complement(ids, n):
    keep = np.ones(n, dtype=bool)
    keep[ids] = False
    return np.flatnonzero(keep)


def _innovation_chol(cov, sigma2):
    try:
        return chol_factor(cov, "innovation covariance S(C_nu + C_eta + M)S^T + sigma2 I")
    except FactorizationError as exc:
        if sigma2 == 0:
            raise FactorizationError(
                "innovation covariance", "singular with sigma2 = 0; use sigma2 > 0"
            ) from exc
        raise


def initial_state(params: ModelParams, chi0=None, m0=None, first_measurements=None):
    """Starting point for the filter.

    Defaults: ``chi_hat(0)`` is the mean of ``first_measurements`` replicated
    across paths (0 if none), and ``M(0) = 10 trace(C_nu) / P * I`` (identity
    when C_nu is zero).
    """
    p = params.n_paths
    if chi0 is None:
        vals = np.asarray([] if first_measurements is None else first_measurements, float)
        chi0 = np.full(p, float(vals.mean()) if vals.size else 0.0)
    chi0 = np.broadcast_to(np.asarray(chi0, dtype=float), (p,)).copy()
    if m0 is None:
        scale = 10.0 * np.trace(params.c_nu) / p
        m0 = (scale if scale > 0 else 1.0) * np.eye(p)
    elif np.ndim(m0) == 0:
        m0 = float(m0) * np.eye(p)
    return FilterState(chi0, symmetrize(m0), 0)


def kf_step(state: FilterState, params: ModelParams, selection, y_s,
            check=True) -> FilterState:
    """Kalman update of the trend with the measurements of one slot.

    Args:
        state (FilterState): Posterior at t-1.
        params (ModelParams): Model covariances.
        selection: Ids of measured paths; must be non-empty.
        y_s: Measured delays, aligned with ``sorted(selection)``.
        check (bool): Assert the updated covariance is PSD.

    Returns:
        FilterState: Posterior at t.
    """
    p = state.n_paths
    ids = _ids(selection, p)
    if ids.size == 0:
        raise ValueError("kf_step needs a non-empty selection; use predict_only")
    y_s = np.asarray(y_s, dtype=float).reshape(-1)
    if y_s.shape != ids.shape:
        raise ValueError(f"expected {ids.size} measurements, got {y_s.size}")
    b = params.damping_b
    chi_pred = b * state.chi_hat
    m_pred = params.prior_cov(state.m)
    innov_cov = (m_pred + params.c_nu)[np.ix_(ids, ids)] + params.sigma2 * np.eye(ids.size)
    chol = _innovation_chol(innov_cov, params.sigma2)
    # K = m_pred[:, S] innov_cov^-1
    gain = sla.cho_solve((chol, True), m_pred[ids, :]).T
    chi_new = chi_pred + gain @ (y_s - chi_pred[ids])
    m_new = symmetrize(m_pred - gain @ m_pred[ids, :])
    if check:
        _check_state_psd(m_new, f"slot {state.slot + 1}")
    return FilterState(chi_new, m_new, state.slot + 1, chi_pred, m_pred)


def predict_only(state: FilterState, params: ModelParams) -> FilterState:
    """Time update for a slot without measurements."""
    chi_pred = params.damping_b * state.chi_hat
    m_pred = symmetrize(params.prior_cov(state.m))
    return FilterState(chi_pred, m_pred, state.slot + 1, chi_pred, m_pred)


def kalman_gain(m_prior, params: ModelParams, selection):
    """``m_prior S^T [S (m_prior + C_nu) S^T + sigma2 I]^-1`` (P x |S|)."""
    ids = _ids(selection, params.n_paths)
    m_prior = np.asarray(m_prior, dtype=float)
    if ids.size == 0:
        return np.zeros((params.n_paths, 0))
    innov_cov = (m_prior + params.c_nu)[np.ix_(ids, ids)] + params.sigma2 * np.eye(ids.size)
    chol = _innovation_chol(innov_cov, params.sigma2)
    return sla.cho_solve((chol, True), m_prior[ids, :]).T


def error_covariance(m_prev, params: ModelParams, selection, prior=False):
    """Covariance of the KKF prediction error on the unmeasured paths.

    Equal to ``sigma2 I + Sbar [A^-1 + S^T S / sigma2]^-1 Sbar^T`` with
    ``A = b^2 M(t-1) + C_eta + C_nu``; evaluated in the equivalent
    equivalent covariance form ``Sbar (A - A S^T (S A S^T + sigma2 I)^-1 S A)
    Sbar^T + sigma2 I``, which stays defined when A is singular.

    Args:
        m_prev: ``M(t-1)``, or the predicted covariance when ``prior`` is set.
        params (ModelParams): Model covariances.
        selection: Ids of measured paths.
        prior (bool): ``m_prev`` is already ``b^2 M(t-1) + C_eta``.
    """
    p = params.n_paths
    ids = _ids(selection, p)
    rest = _complement(ids, p)
    m_prior = np.asarray(m_prev, float) if prior else params.prior_cov(m_prev)
    a = m_prior + params.c_nu
    out = a[np.ix_(rest, rest)]
    if ids.size:
        innov_cov = a[np.ix_(ids, ids)] + params.sigma2 * np.eye(ids.size)
        chol = _innovation_chol(innov_cov, params.sigma2)
        cross = a[np.ix_(ids, rest)]
        out = out - cross.T @ sla.cho_solve((chol, True), cross)
    return symmetrize(out + params.sigma2 * np.eye(rest.size))


def kkf_predict(state: FilterState, params: ModelParams, selection, y_s):
    """Kriged prediction of the unmeasured paths for the slot just filtered.

    ``state`` must be the output of :func:`kf_step` (or :func:`predict_only`
    for an empty selection) for this very slot.
    """
    if state.m_prior is None:
        raise ValueError("state carries no one-step prediction; run kf_step first")
    p = state.n_paths
    ids = _ids(selection, p)
    rest = _complement(ids, p)
    y_s = np.asarray(y_s, dtype=float).reshape(-1)
    if y_s.shape != ids.shape:
        raise ValueError(f"expected {ids.size} measurements, got {y_s.size}")
    predicted = state.chi_hat[rest].copy()
    if ids.size and rest.size:
        cross = params.c_nu[np.ix_(rest, ids)]
        if cross.any():
            krig_cov = params.c_nu[np.ix_(ids, ids)] + params.sigma2 * np.eye(ids.size)
            chol = chol_factor(krig_cov, "kriging covariance S C_nu S^T + sigma2 I")
            resid = y_s - state.chi_hat[ids]
            predicted += cross @ sla.cho_solve((chol, True), resid)
    return PredictionResult(
        slot=state.slot,
        measured=ids,
        unmeasured=rest,
        predicted=predicted,
        error_cov=error_covariance(state.m_prior, params, ids, prior=True),
        kalman_gain=kalman_gain(state.m_prior, params, ids),
        chi_hat=state.chi_hat,
    )


def step(state: FilterState, params: ModelParams, selection, y_s, check=True):
    """Filter one slot and predict its unmeasured paths.

    Returns ``(new_state, PredictionResult)``; an empty selection runs the
    time update only.
    """
    ids = _ids(selection, state.n_paths)
    if ids.size:
        new = kf_step(state, params, ids, y_s, check=check)
    else:
        new = predict_only(state, params)
    return new, kkf_predict(new, params, ids, y_s)


def run_filter(params: ModelParams, trace: DelayTrace, chi0=None, m0=None,
               offset=None, check=True):
    """Run the KKF over a whole trace using its recorded selections.

    Args:
        params (ModelParams): Model covariances.
        trace (DelayTrace): Delays and per-slot measurement masks.
        chi0, m0: Initial trend estimate and covariance (see
            :func:`initial_state` for defaults).
        offset (ndarray(P) | None): Per-path mean subtracted from measurements
            and added back to predictions (damped model).
        check (bool): PSD assertion on every covariance update.

    Returns:
        (list[PredictionResult], FilterState): Per-slot results (predictions
        include ``offset``) and the final state.
    """
    if trace.n_paths != params.n_paths:
        raise ValueError(
            f"trace has {trace.n_paths} paths but the model has {params.n_paths}"
        )
    offset = np.zeros(params.n_paths) if offset is None else np.asarray(offset, float)
    first = next((t for t in range(trace.horizon) if trace.mask[t].any()), None)
    first_vals = [] if first is None else (
        trace.true_delays[first, trace.mask[first]] - offset[trace.mask[first]])
    state = initial_state(params, chi0, m0, first_vals)
    results = []
    for t in range(trace.horizon):
        ids = trace.selection(t)
        y_s = trace.true_delays[t, ids] - offset[ids]
        state, res = step(state, params, ids, y_s, check=check)
        if offset.any():
            res = PredictionResult(res.slot, res.measured, res.unmeasured,
                                   res.predicted + offset[res.unmeasured],
                                   res.error_cov, res.kalman_gain, res.chi_hat)
        results.append(res)
    return results, state
