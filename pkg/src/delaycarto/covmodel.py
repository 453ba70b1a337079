"""State-space model parameters, synthetic delay traces, and their file formats.

Model (per time slot t, P paths)::

    chi(t) = b * chi(t-1) + eta(t)          eta ~ (0, C_eta)
    y(t)   = chi(t) + nu(t) + eps(t)        nu ~ (0, C_nu), eps ~ (0, sigma2 I)

``nu`` and ``eps`` are temporally white; ``C_nu = gamma * G`` when built from
the path Gramian. Only the paths in S(t) are observed in slot t.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .linalg import chol_factor, is_psd, symmetrize

__all__ = [
    "ModelParams",
    "DelayTrace",
    "build_c_nu",
    "simulate_trace",
    "make_selector",
    "save_params",
    "load_params",
    "params_to_dict",
    "params_from_dict",
    "write_trace_csv",
    "read_trace_csv",
]


def build_c_nu(gamma: float, gram) -> np.ndarray:
    """``gamma * G``; gamma must be non-negative."""
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma!r}")
    return float(gamma) * np.asarray(gram, dtype=float)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Second-order description of the delay model.

    Attributes:
        c_nu (ndarray(P, P)): Covariance of the white spatial component (ms^2).
        c_eta (ndarray(P, P)): Covariance of the trend increments (ms^2).
        sigma2 (float): Measurement-error variance (ms^2).
        damping_b (float): Trend autoregression coefficient in (0, 1].
        gamma (float | None): Gramian scale when ``c_nu = gamma * G``.
    """

    c_nu: np.ndarray
    c_eta: np.ndarray
    sigma2: float
    damping_b: float = 1.0
    gamma: float | None = None

    def __post_init__(self):
        c_nu = np.asarray(self.c_nu, dtype=float)
        c_eta = np.asarray(self.c_eta, dtype=float)
        if c_nu.ndim != 2 or c_nu.shape[0] != c_nu.shape[1] or c_eta.shape != c_nu.shape:
            raise ValueError("c_nu and c_eta must be square matrices of equal size")
        for name, mat in (("c_nu", c_nu), ("c_eta", c_eta)):
            if not is_psd(mat, 1e-10):
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be >= 0")
        if not 0 < self.damping_b <= 1:
            raise ValueError("damping_b must lie in (0, 1]")
        if self.gamma is not None and not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        object.__setattr__(self, "c_nu", symmetrize(c_nu))
        object.__setattr__(self, "c_eta", symmetrize(c_eta))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "damping_b", float(self.damping_b))

    @classmethod
    def from_gramian(cls, gamma, gram, c_eta, sigma2, damping_b=1.0):
        gram = np.asarray(gram, dtype=float)
        c_eta = np.asarray(c_eta, dtype=float)
        if c_eta.ndim == 0:
            c_eta = float(c_eta) * np.eye(gram.shape[0])
        return cls(build_c_nu(gamma, gram), c_eta, sigma2, damping_b, float(gamma))

    @property
    def n_paths(self) -> int:
        return self.c_nu.shape[0]

    def prior_cov(self, m):
        """One-step predicted trend covariance ``b^2 M + C_eta``."""
        return self.damping_b ** 2 * np.asarray(m, dtype=float) + self.c_eta

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(eq=False)
class DelayTrace:
    """Time-indexed path delays plus the per-slot measurement masks.

    Attributes:
        true_delays (ndarray(T, P)): Delay of every path in every slot (ms).
        mask (ndarray(T, P) of bool): ``mask[t, p]`` iff path p measured in slot t.
        timestamps (list): Label per slot; defaults to 1..T.
    """

    true_delays: np.ndarray
    mask: np.ndarray
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        self.true_delays = np.asarray(self.true_delays, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.true_delays.ndim != 2 or self.mask.shape != self.true_delays.shape:
            raise ValueError("true_delays and mask must be T x P arrays of equal shape")
        if not self.timestamps:
            self.timestamps = list(range(1, self.horizon + 1))
        if len(self.timestamps) != self.horizon:
            raise ValueError("one timestamp per slot is required")

    @property
    def horizon(self) -> int:
        return self.true_delays.shape[0]

    @property
    def n_paths(self) -> int:
        return self.true_delays.shape[1]

    def selection(self, t: int) -> np.ndarray:
        """Sorted ids of the paths measured in slot ``t`` (0-based row)."""
        return np.flatnonzero(self.mask[t])

    def measurements(self, t: int) -> dict[int, float]:
        ids = self.selection(t)
        return {int(p): float(self.true_delays[t, p]) for p in ids}

    def with_mask(self, mask) -> "DelayTrace":
        return DelayTrace(self.true_delays, mask, list(self.timestamps))

    def window(self, start: int, stop: int) -> "DelayTrace":
        return DelayTrace(self.true_delays[start:stop], self.mask[start:stop],
                          list(self.timestamps[start:stop]))


# --- simulation -------------------------------------------------------------


def make_selector(rule, n_paths: int):
    """Normalise a selection rule into ``f(t, rng) -> path ids``.

    ``None`` selects every path, an int ``k`` draws k paths uniformly per slot,
    a sequence is a fixed set, and a callable is used as is.
    """
    if rule is None:
        everything = np.arange(n_paths)
        return lambda t, rng: everything
    if callable(rule):
        return rule
    if isinstance(rule, (int, np.integer)):
        k = int(rule)
        if not 0 <= k <= n_paths:
            raise ValueError(f"cannot select {k} of {n_paths} paths")
        return lambda t, rng: np.sort(rng.choice(n_paths, k, replace=False))
    fixed = np.unique(np.asarray(list(rule), dtype=int))
    if fixed.size and (fixed.min() < 0 or fixed.max() >= n_paths):
        raise ValueError("fixed selection references an unknown path")
    return lambda t, rng: fixed


def _root(a, role):
    a = np.asarray(a, dtype=float)
    if not a.any():
        return np.zeros_like(a)
    return chol_factor(a, role, shift=True)


def _draw(rng, chol, size, noise, dof):
    z = rng.standard_normal((size, chol.shape[0]))
    if noise == "student":
        if not dof > 2:
            raise ValueError("student-t noise needs dof > 2 for finite variance")
        w = rng.chisquare(dof, size=(size, 1))
        z = z * np.sqrt((dof - 2) / w)
    elif noise != "gaussian":
        raise ValueError(f"unknown noise family {noise!r}")
    return z @ chol.T


def simulate_trace(params: ModelParams, horizon: int, selector=None, seed=0,
                   mu0=None, m0=None, noise="gaussian", dof=5.0,
                   return_state=False):
    """Draw a delay trace from the state-space model.

    Args:
        params (ModelParams): Model covariances and damping.
        horizon (int): Number of slots T >= 1.
        selector: Per-slot selection rule, see :func:`make_selector`.
        seed (int): Seed for every random draw.
        mu0 (ndarray(P) | float): Mean of chi(0); default 0.
        m0 (ndarray(P, P) | float): Covariance of chi(0); default identity.
        noise (str): ``"gaussian"`` or ``"student"`` (unit-variance scaled t).
        dof (float): Degrees of freedom for Student-t noise.
        return_state (bool): Also return the latent chi(1..T) (T x P).

    Returns:
        DelayTrace, or ``(DelayTrace, chi)`` with ``return_state``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = params.n_paths
    rng = np.random.default_rng(seed)
    mu0 = np.zeros(p) if mu0 is None else np.broadcast_to(np.asarray(mu0, float), (p,))
    if m0 is None:
        m0 = np.eye(p)
    elif np.ndim(m0) == 0:
        m0 = float(m0) * np.eye(p)
    l_eta = _root(params.c_eta, "C_eta")
    l_nu = _root(params.c_nu, "C_nu")
    l_m0 = _root(m0, "M0")
    chi0 = mu0 + (l_m0 @ rng.standard_normal(p))
    eta = _draw(rng, l_eta, horizon, noise, dof)
    nu = _draw(rng, l_nu, horizon, noise, dof)
    eps = np.sqrt(params.sigma2) * _draw(rng, np.eye(p), horizon, noise, dof)
    chi = np.empty((horizon, p))
    prev = chi0
    for t in range(horizon):
        prev = params.damping_b * prev + eta[t]
        chi[t] = prev
    y = chi + nu + eps
    select = make_selector(selector, p)
    mask = np.zeros((horizon, p), dtype=bool)
    for t in range(horizon):
        mask[t, np.asarray(select(t, rng), dtype=int)] = True
    trace = DelayTrace(y, mask)
    if return_state:
        return trace, chi
    return trace


# --- file formats -----------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    doc = {
        "gamma": params.gamma,
        "sigma2": params.sigma2,
        "damping_b": params.damping_b,
    }
    c_eta = params.c_eta
    d = c_eta[0, 0]
    if np.array_equal(c_eta, d * np.eye(c_eta.shape[0])):
        doc["c_eta"] = float(d)
    else:
        doc["c_eta"] = c_eta.tolist()
    doc["c_nu"] = params.c_nu.tolist()
    return doc


def params_from_dict(doc: dict, gram=None) -> ModelParams:
    """Parse a params document; ``c_nu`` falls back to ``gamma * gram``."""
    try:
        sigma2 = float(doc["sigma2"])
    except (KeyError, TypeError, ValueError):
        raise ValueError("params: missing or invalid 'sigma2'") from None
    gamma = doc.get("gamma")
    gamma = None if gamma is None else float(gamma)
    b = float(doc.get("damping_b", 1.0))
    if doc.get("c_nu") is not None:
        c_nu = np.asarray(doc["c_nu"], dtype=float)
    else:
        if gamma is None or gram is None:
            raise ValueError("params: need 'c_nu', or 'gamma' together with a topology")
        c_nu = build_c_nu(gamma, gram)
    p = c_nu.shape[0]
    if gram is not None and np.shape(gram)[0] != p:
        raise ValueError(f"params: matrix size {p} does not match topology ({np.shape(gram)[0]} paths)")
    if "c_eta" not in doc:
        raise ValueError("params: missing 'c_eta'")
    c_eta = np.asarray(doc["c_eta"], dtype=float)
    if c_eta.ndim == 0:
        c_eta = float(c_eta) * np.eye(p)
    return ModelParams(c_nu, c_eta, sigma2, b, gamma)


def save_params(params: ModelParams, path):
    Path(path).write_text(json.dumps(params_to_dict(params), indent=2) + "\n")


def load_params(path, gram=None) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()), gram)


TRACE_HEADER = ("t", "path_id", "value", "measured")


def write_trace_csv(trace: DelayTrace, path=None) -> str:
    """Write ``t,path_id,value,measured``; one row per (slot, path).

    Returns the CSV text; also writes it to ``path`` when given.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for t, label in enumerate(trace.timestamps):
        row = trace.true_delays[t]
        for p in range(trace.n_paths):
            w.writerow((label, p, repr(float(row[p])), int(trace.mask[t, p])))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_trace_csv(path, n_paths=None) -> DelayTrace:
    """Read a trace CSV. Slots appear in first-seen order of ``t``.

    Missing (slot, path) rows are treated as unmeasured with value NaN.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(TRACE_HEADER) <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        slots: dict[str, int] = {}
        rows = []
        max_p = -1
        for lineno, rec in enumerate(reader, start=2):
            try:
                t = rec["t"]
                pid = int(rec["path_id"])
                value = float(rec["value"]) if rec["value"] not in ("", None) else np.nan
                measured = int(rec["measured"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed row") from None
            if measured not in (0, 1) or pid < 0:
                raise ValueError(f"{path}:{lineno}: malformed row")
            slots.setdefault(t, len(slots))
            rows.append((slots[t], pid, value, measured))
            max_p = max(max_p, pid)
    p = max_p + 1 if n_paths is None else int(n_paths)
    if max_p >= p:
        raise ValueError(f"{path}: path id {max_p} exceeds topology size {p}")
    y = np.full((len(slots), p), np.nan)
    mask = np.zeros((len(slots), p), dtype=bool)
    for t, pid, value, measured in rows:
        y[t, pid] = value
        mask[t, pid] = bool(measured)
    if np.isnan(y[mask]).any():
        raise ValueError(f"{path}: measured entries must carry a value")
    labels = [int(k) if k.lstrip("-").isdigit() else k for k in slots]
    return DelayTrace(y, mask, labels)
