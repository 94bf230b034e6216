"""Command-line front end: ``cranempc validate | run | report | list-scenarios``.

Exit codes: 0 success, 2 usage error, 3 invalid scenario or missing input,
4 solver failure, 5 collision (min continuous signed distance <= 0 in a
scenario that does not declare collisions as expected).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_SOLVER = 4
EXIT_COLLISION = 5

REPORT_COLUMNS = ("run", "scenario", "status", "controller", "collision_enabled", "flow_enabled",
                  "settle_time", "pendulum_period", "min_sd", "max_flow", "Q_max", "tracking_rmse",
                  "final_goal_error", "final_qdA_norm", "tau_dot_mean_last_second", "mean_solve_ms",
                  "p95_solve_ms", "max_solve_ms")
PAIRED = ("min_sd", "max_flow", "settle_time", "tracking_rmse", "final_goal_error")


def _load(target):
    from .scenario import load_scenario, resolve

    return load_scenario(resolve(target))


def cmd_validate(args) -> int:
    from .scenario import ScenarioError, validate

    status = EXIT_OK
    for target in args.scenarios:
        try:
            scenario = _load(target)
            if args.seed is not None:
                scenario.seed = args.seed
            problems = validate(scenario)
        except ScenarioError as exc:
            problems = exc.diagnostics
        if problems:
            status = EXIT_INVALID
            for line in problems:
                print(line, file=sys.stderr)
        else:
            print(f"{target}: ok")
    return status


def cmd_run(args) -> int:
    from .scenario import ScenarioError, validate
    from .sim import run_closed_loop, write_outputs

    try:
        scenario = _load(args.scenario)
        if args.seed is not None:
            scenario.seed = args.seed
        problems = validate(scenario)
    except ScenarioError as exc:
        problems = exc.diagnostics
    if problems:
        for line in problems:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    spec = scenario.spec
    if args.iteration_cap is not None:
        if args.iteration_cap < 1:
            print("--iteration-cap must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        spec.mpc = spec.mpc.replace(max_iterations=args.iteration_cap, time_budget_ms=None)
    out = Path(args.out) if args.out else Path("runs") / spec.name
    log = run_closed_loop(spec)
    if len(log) == 0:
        print(f"{spec.name}: solver failed at the first step: {log.message}", file=sys.stderr)
        return EXIT_SOLVER
    summary = write_outputs(log, spec, out)
    summary.update(seed=scenario.seed, iteration_cap=args.iteration_cap,
                   runtime_ok=spec.runtime_budget_s is None or log.wall_time <= spec.runtime_budget_s)
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=False)
    print(f"{spec.name}: status={summary['status']} min_sd={summary['min_sd']:.4f} "
          f"goal_error={summary['final_goal_error']:.4f} p95_solve_ms={summary['p95_solve_ms']:.1f} -> {out}")
    if log.status != "ok":
        print(log.message, file=sys.stderr)
        return EXIT_SOLVER
    if summary["collision"] and not spec.expect_collision:
        return EXIT_COLLISION
    return EXIT_OK


def _stem(name: str) -> str:
    for suffix in ("_on", "_off"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def build_report(run_dirs) -> list[dict]:
    """One row per run directory with paired on/off differences.

    Runs whose scenario names differ only by an ``_on``/``_off`` suffix are
    paired; the ``on`` row receives ``delta_<metric> = on - off``.
    """
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.is_file():
            raise FileNotFoundError(f"{path}: metrics file not found")
        with open(path) as fh:
            metrics = json.load(fh)
        row = {"run": str(d)}
        row.update({k: metrics.get(k) for k in REPORT_COLUMNS if k != "run"})
        rows.append(row)
    by_name = {row["scenario"]: row for row in rows}
    for row in rows:
        name = row["scenario"] or ""
        if name.endswith("_on") and _stem(name) + "_off" in by_name:
            off = by_name[_stem(name) + "_off"]
            for key in PAIRED:
                a, b = row.get(key), off.get(key)
                row[f"delta_{key}"] = None if a is None or b is None else a - b
    return rows


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return str(value)


def cmd_report(args) -> int:
    if not args.runs:
        print("report needs at least one run directory", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows = build_report(args.runs)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    columns = list(REPORT_COLUMNS)
    for row in rows:
        columns += [k for k in row if k not in columns]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    text = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".csv").write_text(text)
        out.with_suffix(".json").write_text(json.dumps(rows, indent=2))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_list(args) -> int:
    from .scenario import bundled_scenarios, load_scenario

    for name, path in bundled_scenarios().items():
        print(f"{name}: {load_scenario(path).spec.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cranempc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check scenario files (names of bundled scenarios work too)")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--seed", type=int, help="seed of the workspace coverage sampling")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run one scenario and write log.csv, timing.csv and metrics.json")
    p.add_argument("scenario")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.add_argument("--iteration-cap", type=int,
                   help="fixed solver iteration count instead of the wall-clock budget (deterministic)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tabulate metrics of finished runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out", help="also write <out>.csv and <out>.json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("list-scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
