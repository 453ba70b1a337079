"""Training-phase estimation of C_eta, the innovation-based C_nu entries and
the Gramian scale gamma.

C_eta comes from the trend increments ``q(t) = chi_hat(t) - b chi_hat(t-1)``,
whose covariance is ``b^2 M(t-1) + C_eta - M(t)``; adding back the average
``M(t) - b^2 M(t-1)`` removes that bias (for b = 1 it telescopes to
``(M(t_L) - M(1)) / (t_L - 1)``).

C_nu comes from the innovations ``iota_p(t) = y_p(t) - b chi_hat_p(t-1)``, with
``E[iota_p iota_q] = [b^2 M(t-1) + C_eta + C_nu]_pq + sigma2 [p = q]``, averaged
over the slots T_pq where both p and q were measured. gamma is the
least-squares fit of that matrix to ``gamma G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kkf
from .covmodel import DelayTrace, ModelParams, build_c_nu
from .linalg import project_psd, symmetrize

__all__ = [
    "TrainingAccumulator",
    "EstimatedParams",
    "TrainingConfig",
    "q_statistics",
    "estimate_c_eta",
    "update_innovation_cov",
    "finalize_c_nu",
    "fit_gamma",
    "training_phase",
]


def q_statistics(q_samples):
    """Sample mean and covariance of the trend increments.

    The mean divides by the sample count (``t_L - 1``) and the covariance by
    one less (``t_L - 2``), centring on the final mean.

    Args:
        q_samples (array-like (n, P)): ``q(2), ..., q(t_L)``; ``n >= 3``.

    Returns:
        (ndarray(P), ndarray(P, P))
    """
    q = np.asarray(q_samples, dtype=float)
    if q.ndim != 2 or q.shape[0] < 3:
        raise ValueError("need at least 3 increment samples (t_L >= 4)")
    mean = q.mean(axis=0)
    centred = q - mean
    return mean, symmetrize(centred.T @ centred / (q.shape[0] - 1))


def estimate_c_eta(c_q, m_history, damping_b=1.0):
    """``C_q + mean_t (M(t) - b^2 M(t-1))`` over ``m_history = [M(1), ..., M(t_L)]``."""
    m = np.asarray(m_history, dtype=float)
    if m.ndim != 3 or m.shape[0] < 2:
        raise ValueError("m_history needs at least two covariance matrices")
    diffs = m[1:] - damping_b ** 2 * m[:-1]
    return symmetrize(np.asarray(c_q, float) + diffs.mean(axis=0))


@dataclass
class TrainingAccumulator:
    """Running sums for the online estimators (no sample storage).

    ``q_*`` hold a Welford mean / scatter of the increments; ``m_first`` and
    ``m_last`` with ``m_drift_sum`` carry the covariance-bias correction;
    ``iota_sum``, ``m_sum`` and ``counts`` accumulate, per path pair, the
    innovation products, the matching ``b^2 M(t-1)`` entries and ``|T_pq|``.
    """

    n_paths: int
    damping_b: float = 1.0
    q_count: int = 0
    q_mean: np.ndarray = None
    q_scatter: np.ndarray = None
    m_drift_sum: np.ndarray = None
    m_first: np.ndarray = None
    m_last: np.ndarray = None
    iota_sum: np.ndarray = None
    m_sum: np.ndarray = None
    counts: np.ndarray = None
    slots: int = 0

    def __post_init__(self):
        p = self.n_paths
        z = lambda: np.zeros((p, p))
        self.q_mean = np.zeros(p) if self.q_mean is None else self.q_mean
        self.q_scatter = z() if self.q_scatter is None else self.q_scatter
        self.m_drift_sum = z() if self.m_drift_sum is None else self.m_drift_sum
        self.iota_sum = z() if self.iota_sum is None else self.iota_sum
        self.m_sum = z() if self.m_sum is None else self.m_sum
        self.counts = np.zeros((p, p), dtype=np.int64) if self.counts is None else self.counts

    def add_increment(self, q, m_prev, m_new):
        """Fold in ``q(t)`` together with ``M(t-1)`` and ``M(t)``."""
        q = np.asarray(q, dtype=float)
        self.q_count += 1
        delta = q - self.q_mean
        self.q_mean = self.q_mean + delta / self.q_count
        self.q_scatter = self.q_scatter + np.outer(delta, q - self.q_mean)
        if self.m_first is None:
            self.m_first = np.asarray(m_prev, float).copy()
        self.m_last = np.asarray(m_new, float).copy()
        self.m_drift_sum = self.m_drift_sum + (m_new - self.damping_b ** 2 * m_prev)

    def q_stats(self):
        if self.q_count < 3:
            raise ValueError("need at least 3 increment samples (t_L >= 4)")
        return self.q_mean.copy(), symmetrize(self.q_scatter / (self.q_count - 1))

    def c_eta_hat(self):
        _, c_q = self.q_stats()
        return symmetrize(c_q + self.m_drift_sum / self.q_count)


def update_innovation_cov(acc: TrainingAccumulator, ids, iota, m_prev_scaled):
    """Add one slot's innovations on the measured paths ``ids``.

    Args:
        acc (TrainingAccumulator): Updated in place and returned.
        ids (array of int): Measured paths S(t).
        iota (ndarray(|S|)): ``y_s(t) - b chi_hat_s(t-1)``.
        m_prev_scaled (ndarray(P, P)): ``b^2 M(t-1)``.
    """
    ids = np.asarray(ids, dtype=int)
    if ids.size == 0:
        return acc
    iota = np.asarray(iota, dtype=float)
    block = np.ix_(ids, ids)
    acc.iota_sum[block] += np.outer(iota, iota)
    acc.m_sum[block] += np.asarray(m_prev_scaled, float)[block]
    acc.counts[block] += 1
    acc.slots += 1
    return acc


def finalize_c_nu(acc: TrainingAccumulator, c_eta_hat, sigma2, prior=None):
    """Innovation-based C_nu estimate.

    ``[C_nu]_pq = mean_{T_pq}(iota_p iota_q - [b^2 M(t-1)]_pq) - [C_eta]_pq
    - sigma2 [p = q]``. Pairs never measured together keep ``prior`` (zero
    when no prior is given).
    """
    p = acc.n_paths
    out = np.zeros((p, p)) if prior is None else np.array(prior, dtype=float)
    seen = acc.counts > 0
    n = np.where(seen, acc.counts, 1)
    est = (acc.iota_sum - acc.m_sum) / n - np.asarray(c_eta_hat, float)
    est -= sigma2 * np.eye(p)
    out[seen] = est[seen]
    return symmetrize(out)


def fit_gamma(c_nu_hat, gram) -> float:
    """Least-squares ``gamma`` for ``C_nu ~ gamma G``, clamped at 0."""
    gram = np.asarray(gram, dtype=float)
    denom = float(np.sum(gram * gram))
    if denom == 0:
        raise ValueError("cannot fit gamma to an all-zero Gramian")
    return max(0.0, float(np.sum(gram * np.asarray(c_nu_hat, float))) / denom)


@dataclass
class EstimatedParams:
    c_eta_hat: np.ndarray
    c_nu_hat: np.ndarray
    gamma_hat: float
    history: list = field(default_factory=list)

    def to_model(self, gram, sigma2, damping_b=1.0) -> ModelParams:
        """Filter-ready parameters: ``gamma_hat G`` and a PSD-projected C_eta."""
        return ModelParams(build_c_nu(self.gamma_hat, gram), project_psd(self.c_eta_hat),
                           sigma2, damping_b, self.gamma_hat)


@dataclass
class TrainingConfig:
    """Training-phase settings.

    ``refresh_every`` sets how often (in slots, after burn-in) the running
    estimates are swapped into the filter; 0 keeps the initial model for the
    whole phase. ``passes`` reruns the whole prefix starting from the previous
    pass's estimates.
    """

    t_l: int = 1000
    burn_in: int = 500
    gamma0: float = 1.0
    c_eta0: object = None
    sigma2: float = 1e-3
    damping_b: float = 1.0
    refresh_every: int = 0
    passes: int = 1


def _snapshot(acc, gram, sigma2, prior_c_nu):
    c_eta = acc.c_eta_hat()
    c_nu = finalize_c_nu(acc, c_eta, sigma2, prior_c_nu)
    return EstimatedParams(c_eta, c_nu, fit_gamma(c_nu, gram))


def _one_pass(trace, gram, cfg, params, offset):
    p = gram.shape[0]
    acc = TrainingAccumulator(p, cfg.damping_b)
    first = next((t for t in range(cfg.t_l) if trace.mask[t].any()), None)
    first_vals = [] if first is None else (
        trace.true_delays[first, trace.mask[first]] - offset[trace.mask[first]])
    state = kkf.initial_state(params, first_measurements=first_vals)
    est = None
    b = cfg.damping_b
    for t in range(cfg.t_l):
        ids = trace.selection(t)
        y_s = trace.true_delays[t, ids] - offset[ids]
        if ids.size:
            new = kkf.kf_step(state, params, ids, y_s, check=False)
        else:
            new = kkf.predict_only(state, params)
        if t >= cfg.burn_in:
            acc.add_increment(new.chi_hat - b * state.chi_hat, state.m, new.m)
            update_innovation_cov(acc, ids, y_s - b * state.chi_hat[ids], b * b * state.m)
            done = t + 1 - cfg.burn_in
            if cfg.refresh_every and done >= 3 and done % cfg.refresh_every == 0:
                est = _snapshot(acc, gram, cfg.sigma2, params.c_nu)
                params = est.to_model(gram, cfg.sigma2, b)
        state = new
    return _snapshot(acc, gram, cfg.sigma2, params.c_nu)


def training_phase(trace: DelayTrace, gram, config: TrainingConfig | None = None,
                   offset=None) -> EstimatedParams:
    """Estimate gamma and C_eta from the first ``t_l`` slots of ``trace``.

    The KKF starts from ``C_nu = gamma0 G`` and ``C_eta = c_eta0`` (default:
    equal to that C_nu), runs ``burn_in`` slots, then accumulates increments
    and innovations until ``t_l``, refreshing the filter's parameters with
    the running estimates every ``refresh_every`` slots.
    """
    cfg = config or TrainingConfig()
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    if trace.n_paths != p:
        raise ValueError(f"trace has {trace.n_paths} paths, topology has {p}")
    if cfg.t_l > trace.horizon:
        raise ValueError(f"trace too short: t_L = {cfg.t_l} > {trace.horizon} slots")
    if cfg.t_l - cfg.burn_in < 4:
        raise ValueError("need at least 4 training slots after burn-in")
    offset = np.zeros(p) if offset is None else np.asarray(offset, float)
    c_nu0 = build_c_nu(cfg.gamma0, gram)
    if cfg.c_eta0 is None:
        c_eta0 = c_nu0
    elif np.ndim(cfg.c_eta0) == 0:
        c_eta0 = float(cfg.c_eta0) * np.eye(p)
    else:
        c_eta0 = np.asarray(cfg.c_eta0, float)
    params = ModelParams(c_nu0, c_eta0, cfg.sigma2, cfg.damping_b, cfg.gamma0)
    history = []
    for _ in range(max(1, cfg.passes)):
        est = _one_pass(trace, gram, cfg, params, offset)
        history.append((est.gamma_hat, np.diag(est.c_eta_hat).mean()))
        params = est.to_model(gram, cfg.sigma2, cfg.damping_b)
    est.history = history
    return est
