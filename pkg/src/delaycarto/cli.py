"""Command-line entry point.

Reports go to stdout (or ``--out``) as JSON, data files are CSV. Failures
exit nonzero with ``{"error": {...}}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, kkf
from .covmodel import load_params, read_trace_csv, save_params, simulate_trace, write_trace_csv
from .estimation import TrainingConfig, training_phase
from .selection import (
    Cardinality,
    NodeBudget,
    PartitionMatroid,
    SelectionProblem,
    greedy_select,
    selection_matrix,
)
from .topology import load_network


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _caps(text):
    caps = {}
    for item in text.split(","):
        node, sep, cap = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected node=cap pairs, got {item!r}")
        try:
            caps[node.strip()] = int(cap)
        except ValueError:
            raise argparse.ArgumentTypeError(f"cap for {node!r} is not an integer")
    return caps


def _emit(doc, out=None):
    text = harness.dump_json(doc)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args, **extra) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        topology=args.topology,
        trace=args.trace,
        simulate=args.simulate,
        horizon=args.horizon,
        params=args.params,
        t_l=args.t_l,
        burn_in=args.burn_in,
        t_p=args.t_p,
        predictor=args.predictor,
        policy=args.policy,
        s=args.s if isinstance(args.s, int) else 10,
        nodes=args.nodes,
        caps=args.caps,
        fixed=args.fixed,
        train_paths=args.train_paths,
        sigma2=args.sigma2,
        damping_b=args.damping_b,
        retrain_every=args.retrain_every,
        seed=args.seed,
        **extra,
    )


# --- subcommands ------------------------------------------------------------


def cmd_simulate(args):
    net = load_network(args.topology)
    if not args.params:
        raise UsageError("simulate needs --params")
    params = load_params(args.params, net.gram)
    trace = simulate_trace(params, args.horizon, selector=args.s, seed=args.seed)
    text = write_trace_csv(trace, args.out)
    if not args.out:
        sys.stdout.write(text)


def cmd_train(args):
    net = load_network(args.topology)
    if not args.trace:
        raise UsageError("train needs --trace")
    trace = read_trace_csv(args.trace, net.n_paths)
    cfg = TrainingConfig(t_l=args.t_l, burn_in=args.burn_in, sigma2=args.sigma2,
                         damping_b=args.damping_b)
    est = training_phase(trace, net.gram, cfg)
    params = est.to_model(net.gram, args.sigma2, args.damping_b)
    if args.out:
        save_params(params, args.out)
    else:
        from .covmodel import params_to_dict
        _emit(params_to_dict(params))


def cmd_track(args):
    net = load_network(args.topology)
    if not args.trace or not args.params:
        raise UsageError("track needs --trace and --params")
    trace = read_trace_csv(args.trace, net.n_paths)
    params = load_params(args.params, net.gram)
    results, _ = kkf.run_filter(params, trace, check=True)
    rows = ["t,path_id,predicted,measured_flag"]
    for t, res in enumerate(results):
        label = trace.timestamps[t]
        full = res.full_prediction(trace.true_delays[t, res.measured])
        for p in range(trace.n_paths):
            rows.append(f"{label},{p},{float(full[p])!r},{int(trace.mask[t, p])}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_select(args):
    net = load_network(args.topology)
    if not args.params:
        raise UsageError("select needs --params")
    params = load_params(args.params, net.gram)
    state = kkf.initial_state(params)
    if args.trace:
        trace = read_trace_csv(args.trace, net.n_paths)
        stop = min(args.t_l, trace.horizon)
        _, state = kkf.run_filter(params, trace.window(0, stop), check=True)
    groups = {v: sorted(ids) for v, ids in net.origin_map.items()}
    if args.policy == "greedy":
        con = Cardinality(args.s)
    elif args.policy == "node-budget":
        con = NodeBudget(args.nodes, groups)
    elif args.policy == "matroid":
        if not args.caps:
            raise UsageError("matroid policy needs --caps")
        con = PartitionMatroid(args.caps, groups)
    else:
        raise UsageError("select supports --policy greedy, node-budget or matroid")
    res = greedy_select(SelectionProblem(selection_matrix(state.m, params), con, params.sigma2),
                        lazy=True)
    _emit({
        "chosen": [int(p) for p in res.chosen],
        "nodes": list(res.nodes),
        "increments": [float(x) for x in res.objective_trace],
        "after_slot": int(state.slot),
    }, args.out)


def cmd_evaluate(args):
    rep = harness.run_experiment(_config(args))
    doc = rep.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        harness.dump_json(doc, out / "report.json")
        harness.write_predictions_csv(rep, out / "predictions.csv")
        _emit({"nmspe": rep.nmspe, "report": str(out / "report.json"),
               "predictions": str(out / "predictions.csv")})
    else:
        _emit(doc)


def cmd_sweep(args):
    s_values = args.s if isinstance(args.s, list) else [args.s]
    table = harness.sweep_s(_config(args), s_values)
    _emit({"predictor": args.predictor, "policy": args.policy, "seed": args.seed,
           "sweep": table}, args.out)


def cmd_export_map(args):
    if not args.trace:
        raise UsageError("export-map needs --trace pointing at a predictions CSV")
    stop = None if args.window is None else args.window
    _, _, text = harness.export_delay_map(args.trace, args.out, value=args.value, stop=stop)
    if not args.out:
        sys.stdout.write(text)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "track": cmd_track,
    "select": cmd_select,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-map": cmd_export_map,
}


def build_parser():
    ap = _Parser(prog="delaycarto", description="Network-wide path delay tracking and prediction.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--topology", help="topology JSON file")
        p.add_argument("--trace", help="trace CSV (predictions CSV for export-map)")
        p.add_argument("--params", help="model params JSON")
        p.add_argument("--simulate", help="params JSON to simulate the trace from")
        p.add_argument("--horizon", type=int, default=2000)
        p.add_argument("--predictor", default="kkf", choices=harness.PREDICTORS)
        p.add_argument("--policy", default="random", choices=harness.POLICIES)
        if name == "sweep":
            p.add_argument("--s", type=_int_list, default=[5, 10, 20],
                           help="comma-separated S values")
        else:
            p.add_argument("--s", type=int, default=None if name == "simulate" else 10)
        p.add_argument("--nodes", type=int, default=1)
        p.add_argument("--caps", type=_caps, default=None, help="node=cap,...")
        p.add_argument("--fixed", type=_int_list, default=None, help="path ids for --policy fixed")
        p.add_argument("--t-l", dest="t_l", type=int, default=1000)
        p.add_argument("--t-p", dest="t_p", type=int, default=None)
        p.add_argument("--burn-in", dest="burn_in", type=int, default=500)
        p.add_argument("--train-paths", dest="train_paths", type=int, default=50)
        p.add_argument("--sigma2", type=float, default=1e-3)
        p.add_argument("--damping-b", dest="damping_b", type=float, default=1.0)
        p.add_argument("--retrain-every", dest="retrain_every", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--value", default="predicted", choices=("predicted", "true"))
        p.add_argument("--window", type=int, default=None, help="slots in the delay map")
        p.add_argument("--out")
    return ap


def _fail(kind, exc, code):
    doc = {"error": {"type": kind, "message": str(exc)}}
    slot = getattr(exc, "slot", None)
    if slot is not None:
        doc["error"]["slot"] = slot
    role = getattr(exc, "role", None)
    if role is not None:
        doc["error"]["matrix"] = role
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command not in ("export-map",) and not args.topology:
            raise UsageError(f"{args.command} needs --topology")
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        return _fail("input", exc, 3)
    except np.linalg.LinAlgError as exc:
        return _fail("numerical", exc, 4)
    except ValueError as exc:
        return _fail("invalid", exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
