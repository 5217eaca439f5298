"""Batch front end: sample, plan, run, compare, simulate, report.

Exit codes: 0 on success, 2 for configuration problems, 3 for execution
failures.  ``REUSE_SWEEP_OUT`` and ``REUSE_SWEEP_WORKERS`` override the
output directory and worker count from the environment; explicit flags
beat both.  Everything is written inside the configured output
directory: machine-readable JSON, an aligned text rendering, and figures
for the report-like paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import figures, study
from .errors import ConfigError, ExecutionError
from .params import format_sample
from .study import (
    StudyConfig,
    compare_modes,
    execute_study,
    load_study_config,
    load_study_inputs,
    report_json,
    report_text,
    simulate_scaling,
    study_report,
    write_report_files,
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reuse-sweep",
        description="Reuse-aware execution of parameter sensitivity studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="study config JSON")
        p.add_argument("--mode", choices=study.MODES)
        p.add_argument("--max-bucket-size", type=int, dest="max_bucket_size")
        p.add_argument("--active-paths", type=int, dest="active_paths")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("sample", help="draw the parameter sets only"))
    common(sub.add_parser("plan", help="compose and dump the reuse plan"))
    common(sub.add_parser("run", help="full study: execute and report"))
    p_compare = sub.add_parser("compare", help="run several reuse modes side by side")
    common(p_compare)
    p_compare.add_argument("--modes", help="comma-separated mode list")
    p_simulate = sub.add_parser("simulate", help="simulated multi-node scaling")
    common(p_simulate)
    p_simulate.add_argument("--nodes", help="comma-separated node counts")
    p_report = sub.add_parser("report", help="re-render an existing report.json")
    p_report.add_argument("--dir", required=True, help="directory with report.json")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "mode": getattr(args, "mode", None),
        "max_bucket_size": getattr(args, "max_bucket_size", None),
        "active_paths": getattr(args, "active_paths", None),
        "workers": getattr(args, "workers", None),
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
    }


def _cmd_sample(cfg: StudyConfig) -> None:
    inputs = load_study_inputs(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "sets.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_sample(inputs.space, inputs.sets))
    print(f"wrote {len(inputs.sets)} parameter sets to {path}")


def _cmd_plan(cfg: StudyConfig) -> None:
    inputs = load_study_inputs(cfg)
    composed = study.compose_study(cfg, inputs.space, inputs.template, inputs.sets)
    dump = {
        "mode": cfg.mode,
        "max_bucket_size": cfg.max_bucket_size,
        "sets": len(inputs.sets),
        "replica_tasks": composed.replica_tasks,
        "executed_tasks": composed.executed_tasks,
        "reuse_fraction": composed.reuse_fraction,
        "buckets": [
            {
                "members": list(s.members),
                "tasks": s.task_count(),
                "terminal_keys": {m: k.hex() for m, k in s.terminals.items()},
            }
            for s in composed.stages
        ],
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    json_path = os.path.join(cfg.out_dir, "plan.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report_json(dump))
    edges_path = os.path.join(cfg.out_dir, "plan_edges.txt")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for stage in composed.stages:
            for key, inst in stage.tasks.items():
                for dep in inst.input_keys:
                    fh.write(
                        f"{dep.hex()}:{stage.tasks[dep].task.id}"
                        f" -> {key.hex()}:{inst.task.id}\n"
                    )
    if composed.bucket_sizes is not None:
        figures.save_bucket_figure(
            list(composed.bucket_sizes), os.path.join(cfg.out_dir, "buckets.png")
        )
    print(f"wrote plan to {json_path}")


def _indices_figure(idx: dict, path: str) -> None:
    figures.save_indices_figure(
        [row["parameter"] for row in idx["rows"]],
        [row["mu_star"] for row in idx["rows"]],
        [row["sigma"] for row in idx["rows"]],
        path,
    )


def _render_study_figures(out_dir: str, report: dict, run) -> None:
    figures.save_memory_figure(run.traces, os.path.join(out_dir, "memory.png"))
    if report.get("buckets"):
        figures.save_bucket_figure(
            report["buckets"]["sizes"], os.path.join(out_dir, "buckets.png")
        )
    if report.get("indices"):
        _indices_figure(report["indices"], os.path.join(out_dir, "indices.png"))


def _cmd_run(cfg: StudyConfig) -> None:
    inputs = load_study_inputs(cfg)
    run = execute_study(cfg, inputs)
    report = study_report(cfg, inputs, run)
    paths = write_report_files(cfg.out_dir, "report", report)
    with open(os.path.join(cfg.out_dir, "trace.txt"), "w", encoding="utf-8") as fh:
        for i, trace in enumerate(run.traces):
            fh.write(f"# stage {i}\n")
            for line in trace.to_lines():
                fh.write(line + "\n")
    _render_study_figures(cfg.out_dir, report, run)
    print(report_text(report), end="")
    print(f"report written to {paths['json']}")


def _cmd_compare(cfg: StudyConfig, modes_arg: str | None) -> None:
    modes = (
        [m.strip() for m in modes_arg.split(",") if m.strip()]
        if modes_arg is not None
        else list(cfg.modes)
    )
    rows = compare_modes(cfg, modes)
    table = [
        {k: r[k] for k in
         ("mode", "executed_tasks", "executed_cost", "reuse_fraction",
          "peak_bytes", "wall_time_s")}
        for r in rows
    ]
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "compare.json"), "w", encoding="utf-8") as fh:
        fh.write(report_json(table))
    header = f"{'mode':<8}{'tasks':>10}{'cost':>12}{'reuse':>9}{'peak B':>12}{'wall s':>9}"
    lines = [header]
    for r in table:
        lines.append(
            f"{r['mode']:<8}{r['executed_tasks']:>10}{r['executed_cost']:>12.1f}"
            f"{r['reuse_fraction']:>9.4f}{r['peak_bytes']:>12}{r['wall_time_s']:>9.3f}"
        )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out_dir, "compare.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    figures.save_compare_figure(table, os.path.join(cfg.out_dir, "compare.png"))
    print(text, end="")


def _cmd_simulate(cfg: StudyConfig, nodes_arg: str | None) -> None:
    nodes = (
        [int(n) for n in nodes_arg.split(",") if n.strip()]
        if nodes_arg is not None
        else list(cfg.nodes)
    )
    rows = simulate_scaling(cfg, nodes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "scaling.json"), "w", encoding="utf-8") as fh:
        fh.write(report_json(rows))
    lines = [f"{'nodes':>7}{'makespan':>14}{'efficiency':>12}"]
    for r in rows:
        lines.append(f"{r['nodes']:>7}{r['makespan']:>14.2f}{r['efficiency']:>12.4f}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out_dir, "scaling.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    figures.save_scaling_figure(rows, os.path.join(cfg.out_dir, "scaling.png"))
    print(text, end="")


def _cmd_report(directory: str) -> None:
    path = os.path.join(directory, "report.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    text = report_text(report)
    with open(os.path.join(directory, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    if report.get("indices"):
        idx = report["indices"]
        figures.save_indices_figure(
            idx["names"], idx["mu_star"], idx["sigma"],
            os.path.join(directory, "indices.png"),
        )
    if report.get("buckets"):
        figures.save_bucket_figure(
            report["buckets"]["sizes"], os.path.join(directory, "buckets.png")
        )
    print(text, end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            _cmd_report(args.dir)
            return 0
        cfg = load_study_config(args.config, _overrides(args))
        if args.command == "sample":
            _cmd_sample(cfg)
        elif args.command == "plan":
            _cmd_plan(cfg)
        elif args.command == "run":
            _cmd_run(cfg)
        elif args.command == "compare":
            _cmd_compare(cfg, args.modes)
        elif args.command == "simulate":
            _cmd_simulate(cfg, args.nodes)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExecutionError as exc:
        print(f"execution error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
