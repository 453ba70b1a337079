"""Experiment pipelines: train on a trace prefix, then track and predict the
unmeasured paths slot by slot under a path-selection policy.

Slot ``t`` (1-based) is row ``t - 1`` of the trace. Training uses slots
``1..t_L`` and evaluation slots ``t_L + 1..t_P``. Every random draw is seeded
from the config seed through separate streams, so a run is reproducible bit
for bit.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kkf
from .baseline import KrigingConfig, network_kriging_predict
from .covmodel import DelayTrace, ModelParams, load_params, params_from_dict, read_trace_csv, simulate_trace
from .estimation import TrainingConfig, training_phase
from .selection import (
    Cardinality,
    NodeBudget,
    PartitionMatroid,
    SelectionProblem,
    greedy_select,
    selection_matrix,
)
from .topology import Network, load_network

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "EvaluationReport",
    "ExperimentError",
    "run_experiment",
    "nmspe",
    "sweep_s",
    "export_delay_map",
    "write_predictions_csv",
    "read_predictions_csv",
    "random_selections",
    "PREDICTORS",
    "POLICIES",
]

PREDICTORS = ("kkf", "network-kriging")
POLICIES = ("random", "greedy", "node-budget", "matroid", "fixed")
PREDICTION_HEADER = ("t", "path_id", "predicted", "true", "measured_flag")

# Independent seed streams derived from the config seed.
_SIM_STREAM, _POLICY_STREAM, _TRAIN_STREAM = 0, 1, 2


class ExperimentError(ValueError):
    """Configuration or data problem; ``slot`` is set when tied to a slot."""

    def __init__(self, msg, slot=None):
        self.slot = slot
        super().__init__(msg if slot is None else f"slot {slot}: {msg}")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    Either ``trace`` (CSV path or :class:`DelayTrace`) or ``simulate`` (model
    params used as ground truth, with ``horizon`` slots) supplies the data.
    When ``params`` is given the filter uses it and training is skipped.

    Attributes:
        topology: JSON path, JSON text, dict or :class:`Network`.
        t_l (int): Last training slot.
        t_p (int | None): Last evaluation slot; defaults to the trace length.
        s (int): Paths measured per evaluation slot (random, greedy).
        nodes (int): End-node budget for ``node-budget``.
        caps (dict | None): Per-origin caps for ``matroid``.
        fixed (list | None): Path ids for ``fixed``.
        train_paths (int): Random paths measured per training slot.
        retrain_every (int): Re-estimate the covariances every this many
            evaluation slots from the latest ``t_l`` slots (0: never).
    """

    topology: object
    trace: object = None
    simulate: object = None
    horizon: int = 2000
    params: object = None
    t_l: int = 1000
    burn_in: int = 500
    t_p: int | None = None
    predictor: str = "kkf"
    policy: str = "random"
    s: int = 10
    nodes: int = 1
    caps: dict | None = None
    fixed: list | None = None
    train_paths: int = 50
    sigma2: float = 1e-3
    damping_b: float = 1.0
    retrain_every: int = 0
    seed: int = 0


@dataclass(eq=False)
class EvaluationReport:
    """Outcome of one run.

    ``slot_sq_errors[i]`` is the squared prediction error summed over the
    unmeasured paths of evaluation slot ``t_l + 1 + i``; ``scatter`` holds
    (true, predicted) pairs for every unmeasured prediction.
    """

    nmspe: float
    slot_sq_errors: np.ndarray
    scatter: np.ndarray
    t_l: int
    t_p: int
    n_paths: int
    s: int | None
    predictor: str
    policy: str
    params: ModelParams
    selections: list = field(default_factory=list)
    predictions: np.ndarray = None
    truth: np.ndarray = None
    masks: np.ndarray = None
    labels: list = field(default_factory=list)

    def to_dict(self, scatter=True) -> dict:
        doc = {
            "nmspe": self.nmspe,
            "t_l": self.t_l,
            "t_p": self.t_p,
            "n_paths": self.n_paths,
            "s": self.s,
            "predictor": self.predictor,
            "policy": self.policy,
            "gamma": self.params.gamma,
            "slot_sq_errors": self.slot_sq_errors.tolist(),
        }
        if scatter:
            doc["scatter"] = self.scatter.tolist()
        return doc


def nmspe(errors, t_p, t_l, n_paths, s) -> float:
    """Squared prediction errors summed, over ``(t_p - t_l)(n_paths - s)``."""
    denom = (t_p - t_l) * (n_paths - s)
    if denom <= 0:
        raise ExperimentError(
            f"NMSPE undefined: (t_P - t_L)(P - S) = ({t_p} - {t_l})({n_paths} - {s}) = {denom}")
    e = np.asarray(errors, dtype=float)
    return float(np.sum(e * e)) / denom


def random_selections(n_paths, s, n_slots, seed):
    """The random policy's selections, drawn once so that every predictor
    sees the same paths."""
    if not 0 <= s <= n_paths:
        raise ExperimentError(f"cannot select {s} of {n_paths} paths")
    rng = np.random.default_rng([seed, _POLICY_STREAM])
    return [np.sort(rng.choice(n_paths, s, replace=False)) for _ in range(n_slots)]


# --- data preparation --------------------------------------------------------


def _network(cfg) -> Network:
    return cfg.topology if isinstance(cfg.topology, Network) else load_network(cfg.topology)


def _as_params(obj, gram):
    if obj is None or isinstance(obj, ModelParams):
        return obj
    if isinstance(obj, dict):
        return params_from_dict(obj, gram)
    return load_params(obj, gram)


def _trace(cfg, net) -> DelayTrace:
    if cfg.trace is not None and cfg.simulate is not None:
        raise ExperimentError("give either a trace or a simulation params, not both")
    if isinstance(cfg.trace, DelayTrace):
        trace = cfg.trace
    elif cfg.trace is not None:
        trace = read_trace_csv(cfg.trace, net.n_paths)
    elif cfg.simulate is not None:
        truth = _as_params(cfg.simulate, net.gram)
        trace = simulate_trace(truth, cfg.horizon, seed=[cfg.seed, _SIM_STREAM])
    else:
        raise ExperimentError("no trace source: give a trace file or a simulation params")
    if trace.n_paths != net.n_paths:
        raise ExperimentError(f"trace has {trace.n_paths} paths, topology has {net.n_paths}")
    return trace


def _training_mask(trace, stop, k, seed):
    """Trace availability restricted to ``k`` random paths per slot."""
    mask = np.zeros_like(trace.mask[:stop])
    rng = np.random.default_rng([seed, _TRAIN_STREAM])
    for t in range(stop):
        avail = np.flatnonzero(trace.mask[t])
        if avail.size > k:
            avail = np.sort(rng.choice(avail, k, replace=False))
        mask[t, avail] = True
    return mask


def _offset(trace, mask, damping_b):
    """Per-path training mean, subtracted when the trend is damped."""
    p = trace.n_paths
    if damping_b >= 1.0:
        return np.zeros(p)
    vals = np.where(mask, trace.true_delays[: mask.shape[0]], np.nan)
    with np.errstate(invalid="ignore"):
        counts = mask.sum(axis=0)
        means = np.where(counts > 0, np.nansum(vals, axis=0) / np.maximum(counts, 1), np.nan)
    overall = np.nanmean(vals) if mask.any() else 0.0
    return np.where(np.isnan(means), overall, means)


def _train(trace, mask, gram, cfg, offset, start=0):
    stop = start + mask.shape[0]
    window = DelayTrace(trace.true_delays[start:stop], mask)
    tc = TrainingConfig(t_l=mask.shape[0], burn_in=min(cfg.burn_in, mask.shape[0] - 4),
                        sigma2=cfg.sigma2, damping_b=cfg.damping_b)
    est = training_phase(window, gram, tc, offset)
    return est.to_model(gram, cfg.sigma2, cfg.damping_b)


# --- policies ---------------------------------------------------------------


def _policy(cfg, net, n_eval):
    p = net.n_paths
    if cfg.policy == "random":
        draws = random_selections(p, cfg.s, n_eval, cfg.seed)
        return lambda i, state, params: draws[i]
    if cfg.policy == "fixed":
        if not cfg.fixed:
            raise ExperimentError("fixed policy needs a list of path ids")
        ids = np.unique(np.asarray(cfg.fixed, dtype=int))
        if ids.min() < 0 or ids.max() >= p:
            raise ExperimentError("fixed policy references an unknown path")
        return lambda i, state, params: ids
    groups = {v: sorted(ids) for v, ids in net.origin_map.items()}
    if cfg.policy == "greedy":
        if not 0 <= cfg.s <= p:
            raise ExperimentError(f"cannot select {cfg.s} of {p} paths")
        con = Cardinality(cfg.s)
    elif cfg.policy == "node-budget":
        con = NodeBudget(cfg.nodes, groups)
    elif cfg.policy == "matroid":
        if not cfg.caps:
            raise ExperimentError("matroid policy needs per-node caps")
        unknown = set(cfg.caps) - set(groups)
        if unknown:
            raise ExperimentError(f"caps name unknown end-nodes: {sorted(unknown)}")
        con = PartitionMatroid(dict(cfg.caps), groups)
    else:
        raise ExperimentError(f"unknown policy {cfg.policy!r}; choose from {', '.join(POLICIES)}")

    def choose(i, state, params):
        phi = selection_matrix(state.m, params)
        res = greedy_select(SelectionProblem(phi, con, params.sigma2), lazy=True)
        return np.sort(np.asarray(res.chosen, dtype=int))

    return choose


# --- main pipeline ------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> EvaluationReport:
    """Train (unless params are given), then evaluate slots ``t_l+1..t_p``."""
    if cfg.predictor not in PREDICTORS:
        raise ExperimentError(f"unknown predictor {cfg.predictor!r}; choose from {', '.join(PREDICTORS)}")
    net = _network(cfg)
    gram = net.gram
    trace = _trace(cfg, net)
    p = net.n_paths
    t_p = trace.horizon if cfg.t_p is None else cfg.t_p
    if not 4 <= cfg.t_l < t_p <= trace.horizon:
        raise ExperimentError(
            f"need 4 <= t_L < t_P <= trace length, got t_L={cfg.t_l}, t_P={t_p}, length {trace.horizon}")
    if cfg.policy in ("random", "greedy") and cfg.s >= p:
        raise ExperimentError(
            f"NMSPE undefined: S = {cfg.s} leaves no unmeasured path out of {p}")
    missing = ~np.isfinite(trace.true_delays[cfg.t_l:t_p])
    if missing.any():
        bad = cfg.t_l + int(np.flatnonzero(missing.any(axis=1))[0]) + 1
        raise ExperimentError("evaluation needs the true delay of every path", slot=bad)

    params = _as_params(cfg.params, gram)
    b = params.damping_b if params is not None else cfg.damping_b
    train_mask = _training_mask(trace, cfg.t_l, min(cfg.train_paths, p), cfg.seed)
    offset = _offset(trace, train_mask, b)
    if params is None:
        params = _train(trace, train_mask, gram, cfg, offset)

    # warm the filter up on the training slots
    first = next((t for t in range(cfg.t_l) if train_mask[t].any()), None)
    first_vals = [] if first is None else (
        trace.true_delays[first, train_mask[first]] - offset[train_mask[first]])
    state = kkf.initial_state(params, first_measurements=first_vals)
    for t in range(cfg.t_l):
        ids = np.flatnonzero(train_mask[t])
        if ids.size:
            y = trace.true_delays[t, ids] - offset[ids]
            state = kkf.kf_step(state, params, ids, y, check=False)
        else:
            state = kkf.predict_only(state, params)

    n_eval = t_p - cfg.t_l
    choose = _policy(cfg, net, n_eval)
    sq = np.zeros(n_eval)
    preds = np.empty((n_eval, p))
    masks = np.zeros((n_eval, p), dtype=bool)
    scatter = []
    selections = []
    total_unmeasured = 0
    krig = KrigingConfig(params.c_nu, params.sigma2)
    for i in range(n_eval):
        t = cfg.t_l + i
        if cfg.retrain_every and i and i % cfg.retrain_every == 0:
            start = t - cfg.t_l
            mask = np.zeros((cfg.t_l, p), dtype=bool)
            mask[: cfg.t_l - i] = train_mask[start:]
            mask[cfg.t_l - i:] = masks[:i]
            try:
                params = _train(trace, mask, gram, cfg, offset, start=start)
            except ValueError as exc:
                raise ExperimentError(f"retraining failed: {exc}", slot=t + 1) from exc
            krig = KrigingConfig(params.c_nu, params.sigma2)
        try:
            ids = choose(i, state, params)
            y = trace.true_delays[t] - offset
            state, res = kkf.step(state, params, ids, y[ids], check=False)
            if cfg.predictor == "kkf":
                rest, pred = res.unmeasured, res.predicted
            else:
                kr = network_kriging_predict(krig, ids, y[ids])
                rest, pred = kr.unmeasured, kr.predicted
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ExperimentError(str(exc), slot=t + 1) from exc
        truth = trace.true_delays[t]
        row = truth.copy()
        row[rest] = pred + offset[rest]
        err = row[rest] - truth[rest]
        sq[i] = float(err @ err)
        preds[i] = row
        masks[i, ids] = True
        total_unmeasured += rest.size
        scatter.extend(zip(truth[rest], row[rest]))
        selections.append(ids)

    scatter = np.asarray(scatter).reshape(-1, 2)
    sizes = {len(ids) for ids in selections}
    s_const = sizes.pop() if len(sizes) == 1 else None
    if s_const is not None:
        value = nmspe(scatter[:, 1] - scatter[:, 0], t_p, cfg.t_l, p, s_const)
    elif total_unmeasured == 0:
        raise ExperimentError("NMSPE undefined: every path was measured in every slot")
    else:
        value = float(sq.sum()) / total_unmeasured
    return EvaluationReport(
        nmspe=value, slot_sq_errors=sq, scatter=scatter,
        t_l=cfg.t_l, t_p=t_p, n_paths=p, s=s_const, predictor=cfg.predictor,
        policy=cfg.policy, params=params, selections=selections, predictions=preds,
        truth=trace.true_delays[cfg.t_l:t_p].copy(), masks=masks,
        labels=list(trace.timestamps[cfg.t_l:t_p]),
    )


def sweep_s(cfg: ExperimentConfig, s_values) -> list[dict]:
    """One run per S with the same seed; failures are recorded, not raised."""
    table = []
    for s in s_values:
        run_cfg = ExperimentConfig(**{**cfg.__dict__, "s": int(s)})
        try:
            rep = run_experiment(run_cfg)
            table.append({"s": int(s), "nmspe": rep.nmspe})
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("sweep S=%s failed: %s", s, exc)
            table.append({"s": int(s), "error": str(exc)})
    return table


# --- files --------------------------------------------------------------------


def write_predictions_csv(report: EvaluationReport, path=None) -> str:
    """``t,path_id,predicted,true,measured_flag``; measured paths carry the
    measurement as their prediction."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for i, label in enumerate(report.labels):
        for p in range(report.n_paths):
            w.writerow((label, p, repr(float(report.predictions[i, p])),
                        repr(float(report.truth[i, p])), int(report.masks[i, p])))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_predictions_csv(path):
    """Parse a predictions CSV into ``(labels, predicted, true, measured)``
    arrays of shape (slots, paths)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        recs = list(reader)
    labels = list(dict.fromkeys(r["t"] for r in recs))
    n_paths = 1 + max((int(r["path_id"]) for r in recs), default=-1)
    row_of = {lab: i for i, lab in enumerate(labels)}
    pred = np.full((len(labels), n_paths), np.nan)
    true = np.full_like(pred, np.nan)
    meas = np.zeros(pred.shape, dtype=bool)
    for r in recs:
        i, p = row_of[r["t"]], int(r["path_id"])
        pred[i, p] = float(r["predicted"])
        true[i, p] = float(r["true"])
        meas[i, p] = r["measured_flag"] == "1"
    return labels, pred, true, meas


def export_delay_map(source, path=None, value="predicted", start=0, stop=None):
    """Paths x slots delay matrix, rows ordered by true delay in the first
    slot of the window (ties by path id).

    Args:
        source: :class:`EvaluationReport` or a predictions CSV path.
        path: Optional output CSV (header ``path_id`` then slot labels).
        value (str): ``"predicted"`` or ``"true"``.
        start, stop (int): Window of evaluation slots.

    Returns:
        (ndarray order, ndarray matrix, str csv_text)
    """
    if isinstance(source, EvaluationReport):
        labels, pred, true = source.labels, source.predictions, source.truth
    else:
        labels, pred, true, _ = read_predictions_csv(source)
    if value not in ("predicted", "true"):
        raise ValueError("value must be 'predicted' or 'true'")
    stop = len(labels) if stop is None else stop
    labels = labels[start:stop]
    if not labels:
        raise ValueError("empty window")
    data = (pred if value == "predicted" else true)[start:stop]
    first = true[start]
    order = np.lexsort((np.arange(first.size), first))
    matrix = data[:, order].T
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path_id", *labels])
    for pid, row in zip(order, matrix):
        w.writerow([int(pid), *(repr(float(x)) for x in row)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return order, matrix, text


def dump_json(doc, path=None) -> str:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
