"""Batch command line.

Exit codes: 0 success, 1 I/O failure, 2 validation failure, 3 numerical
failure.  Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from collections.abc import Sequence

from . import __version__
from .allocation import AllocationPlan, AllocationProblem, solve_allocation, solve_group_maximin
from .allocation.model import EngagementCurve
from .allocation.profiles import demo_profiles
from .bkt import dump_params, fit_parameters, load_params, skill_sequences, trace_student
from .config import RunConfig
from .data_io import (
    dumps_json,
    events_by_student,
    generate_synthetic,
    ingest_oj,
    load_events,
    preprocess_kt1,
    read_canonical,
    save_events,
    SyntheticConfig,
    write_hidden,
    write_trajectory,
)
from .errors import IngestError, LearnLoopError, SolverError, ValidationError
from .flywheel import initial_state, step
from .metrics import evaluate_model, render_table
from .signals import SmootherState

log = logging.getLogger("learnloop")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _metadata(command: str, cfg: RunConfig, **inputs) -> dict:
    return {"command": command, "version": __version__, "inputs": inputs, "config": cfg.to_dict()}


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ------------------------------------------------------------ commands


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    qmatrix = None
    with open(args.input, newline="", encoding="utf-8") as fh:
        if args.source == "oj":
            events, report = ingest_oj(fh, max_errors=cfg.max_errors)
        elif args.source == "canonical":
            events, report = read_canonical(fh, max_errors=cfg.max_errors)
        else:
            if not args.metadata:
                raise ValidationError("--metadata is required for kt1 input")
            with open(args.metadata, newline="", encoding="utf-8") as meta:
                events, qmatrix, report = preprocess_kt1(fh, meta, cfg.min_interactions)
    save_events(events, os.path.join(out, "events.csv"))
    doc = report.to_dict()
    doc["metadata"] = _metadata("ingest", cfg, input=args.input, source=args.source, metadata=args.metadata)
    _write(os.path.join(out, "report.json"), dumps_json(doc))
    if qmatrix is not None:
        with open(os.path.join(out, "qmatrix.csv"), "w", encoding="utf-8", newline="") as fh:
            qmatrix.write_csv(fh)
    print(json.dumps({"rows_in": report.rows_in, "rows_out": report.rows_out, "rows_rejected": report.rows_rejected}))
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    events, hidden = generate_synthetic(SyntheticConfig(cfg.truth(), cfg.students, cfg.steps, cfg.seed))
    save_events(events, os.path.join(out, "events.csv"))
    with open(os.path.join(out, "hidden.csv"), "w", encoding="utf-8", newline="") as fh:
        write_hidden(hidden, fh)
    _write(os.path.join(out, "metadata.json"), dumps_json(_metadata("simulate", cfg)))
    return EXIT_OK


def cmd_fit(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    events = load_events(args.events)
    seqs = skill_sequences(events)
    if not seqs:
        raise ValidationError("no skill-tagged events to fit")
    params, lls = {}, {}
    for i, (skill, s) in enumerate(seqs.items()):
        res = fit_parameters(s, restarts=cfg.em_restarts, seed=cfg.seed + i, max_iter=cfg.em_max_iter, tol=cfg.em_tol)
        params[skill] = res.params
        lls[skill] = {"log_likelihood": res.log_likelihood, "iterations": res.iterations, "sequences": res.n_sequences}
    doc = {
        "params": json.loads(dump_params(params)),
        "fit": lls,
        "metadata": _metadata("fit", cfg, events=args.events),
    }
    _write(os.path.join(out, "params.json"), dumps_json(doc))
    return EXIT_OK


def _read_params(path: str):
    with open(path, encoding="utf-8") as fh:
        return load_params(fh.read())


def cmd_trace(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    events = load_events(args.events)
    params = _read_params(args.params)
    chunks = []
    for sid, evs in events_by_student(events).items():
        buf = io.StringIO()
        write_trajectory(trace_student(evs, params), buf, sid)
        lines = buf.getvalue().splitlines(keepends=True)
        chunks.extend(lines if not chunks else lines[1:])
    _write(os.path.join(out, "trajectory.csv"), "".join(chunks))
    _write(os.path.join(out, "metadata.json"), dumps_json(_metadata("trace", cfg, events=args.events, params=args.params)))
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    events = load_events(args.events)
    params = _read_params(args.params) if args.params else None
    rep = evaluate_model(
        events, params, train_fraction=cfg.train_fraction, seed=cfg.seed, restarts=cfg.em_restarts, threshold=cfg.threshold
    )
    doc = rep.to_dict()
    doc["metadata"] = _metadata("evaluate", cfg, events=args.events, params=args.params)
    _write(os.path.join(out, "metrics.json"), dumps_json(doc))
    table = render_table({args.label: rep})
    _write(os.path.join(out, "table.txt"), table)
    print(table, end="")
    return EXIT_OK


def _plan_csv(plan: AllocationPlan) -> str:
    lines = ["session,resource,amount,sentiment"]
    m, n = plan.allocation.shape
    for t in range(n):
        for j in range(m):
            lines.append(f"{t + 1},{j},{float(plan.allocation[j, t])!r},{float(plan.trajectory[t])!r}")
    return "\n".join(lines) + "\n"


def _load_problems(path: str) -> tuple[list[AllocationProblem], bool]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from None
    if isinstance(doc, dict) and "problems" in doc:
        return [AllocationProblem.from_dict(d) for d in doc["problems"]], True
    return [AllocationProblem.from_dict(doc)], False


def cmd_allocate(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    if args.demo:
        problems = demo_profiles(cfg.influence, cfg.exponent, cfg.objective_mode)
        group = False
    elif args.problem:
        problems, group = _load_problems(args.problem)
    else:
        raise ValidationError("allocate needs --problem or --demo")
    summary = {"metadata": _metadata("allocate", cfg, problem=args.problem, demo=bool(args.demo)), "plans": []}
    if group:
        gp = solve_group_maximin(problems, tol=cfg.solver_tol, threads=cfg.threads)
        summary["group_value"] = gp.value
        summary["kkt"] = gp.kkt.to_dict()
        plans = gp.plans
    else:
        plans = [solve_allocation(p, tol=cfg.solver_tol, threads=cfg.threads) for p in problems]
    for i, (p, plan) in enumerate(zip(problems, plans)):
        name = p.name or f"problem{i}"
        _write(os.path.join(out, f"plan_{name}.csv"), _plan_csv(plan))
        _write(os.path.join(out, f"plan_{name}.json"), dumps_json({"problem": p.to_dict(), "plan": plan.to_dict()}))
        summary["plans"].append({"name": name, "objective": plan.objective, "kkt": plan.kkt.to_dict(), "activation": list(plan.activation)})
        if not plan.kkt.ok:
            raise SolverError(f"plan {name!r} failed KKT certification: {plan.kkt.to_dict()}")
    _write(os.path.join(out, "summary.json"), dumps_json(summary))
    return EXIT_OK


def cmd_flywheel(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    events = load_events(args.events)
    params = _read_params(args.params)
    curve = EngagementCurve(cfg.curve_sharpness, cfg.curve_peak, cfg.curve_target)
    recs, states = [], {}
    for sid, evs in events_by_student(events).items():
        state = initial_state(
            sid,
            params,
            smoother=SmootherState(cfg.alpha, cfg.window),
            bands=(cfg.band_low, cfg.band_high),
            curve=curve,
            eta=cfg.eta,
            lam=cfg.lam,
        )
        for ev in evs:
            state, rec = step(state, ev)
            recs.append({"timestamp_ms": ev.timestamp, **rec.to_dict()})
        states[sid] = state.to_dict()
    _write(os.path.join(out, "recommendations.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs))
    _write(os.path.join(out, "states.json"), dumps_json({"states": states, "metadata": _metadata("flywheel", cfg, events=args.events, params=args.params)}))
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="learnloop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="convert logs to canonical events")
    p.add_argument("input")
    p.add_argument("--source", choices=("oj", "kt1", "canonical"), required=True)
    p.add_argument("--metadata", help="item metadata CSV (kt1 only)")
    p.add_argument("--max-errors", dest="max_errors", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", parents=[common], help="generate synthetic BKT data")
    p.add_argument("--students", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit per-skill parameters by EM")
    p.add_argument("events")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("trace", parents=[common], help="per-event mastery trajectories")
    p.add_argument("events")
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("evaluate", parents=[common], help="chronological split metrics")
    p.add_argument("events")
    p.add_argument("--params")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--label", default="BKT")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("allocate", parents=[common], help="solve allocation problems")
    p.add_argument("--problem", help="problem JSON (an object, or {'problems': [...]} for group maximin)")
    p.add_argument("--demo", action="store_true", help="solve the five reference profiles")
    p.add_argument("--objective", choices=("sum", "terminal"))
    p.add_argument("--influence", choices=("linear", "power"))
    p.add_argument("--exponent", type=float)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("flywheel", parents=[common], help="replay events through the closed loop")
    p.add_argument("events")
    p.add_argument("--params", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_flywheel)
    return parser


_OVERRIDABLE = ("seed", "threads", "max_errors", "students", "steps", "train_fraction", "objective", "influence", "exponent", "alpha", "window")


def _error(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}, sort_keys=True) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDABLE}
        if overrides.get("exponent") is not None and overrides.get("influence") is None:
            overrides["influence"] = "power"
        cfg = RunConfig.load(args.config, **overrides)
        return args.func(args, cfg)
    except IngestError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_VALIDATION, errors=exc.errors)
    except ValidationError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_VALIDATION)
    except SolverError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_NUMERICAL)
    except OSError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_IO)
    except LearnLoopError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
