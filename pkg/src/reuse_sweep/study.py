"""End-to-end study orchestration: sample, compose, execute, analyze.

A study draws parameter sets, composes the stage across them under one
of four reuse modes, executes the result through the depth-first
scheduler against a byte-accounted object store, and reduces the
terminal comparison scores to sensitivity indices and report files.

Reuse modes:
    none   - every sampled set executes its own full chain;
    stage  - identical sets collapse to one chain each;
    rtma   - prefix-merged stages, executed width-bound (no admission);
    rmsr   - prefix-merged stages, executed under the active-path bound.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .cluster import ClusterSimConfig, simulate_cluster, stage_cost
from .errors import ConfigError
from .params import (
    ParameterSpace,
    SamplePlan,
    cardinality,
    load_space,
    morris_layout,
    sample,
)
from .pipeline import (
    PipelineExecutor,
    build_stage_template,
    dice_from_payload,
    reference_labels,
    synth_image,
)
from .reuse import MergedStage, chain_stage, plan_reuse, reuse_fraction_upper_bound
from .scheduler import (
    SchedulerConfig,
    execute_plan,
    memory_bound_check,
    memory_bound_terms,
)
from .sensitivity import morris_indices, rank_parameters, sobol_vbd
from .store import DataObjectStore
from .workflow import (
    StageTemplate,
    load_stage_template,
    replica_compose,
    stage_level_dedup,
)

MODES = ("none", "stage", "rtma", "rmsr")


def packaged_space_path(name: str = "table1_reduced") -> str:
    return str(resources.files("reuse_sweep").joinpath(f"data/{name}.json"))


@dataclass(frozen=True)
class FixtureConfig:
    seed: int = 11
    width: int = 64
    height: int = 64
    blobs: int = 5


@dataclass
class StudyConfig:
    plan: SamplePlan
    space_path: str | None = None     # default: packaged reduced space
    stage_path: str | None = None     # default: bundled pipeline chain
    mode: str = "rmsr"
    max_bucket_size: int = 8
    active_paths: int = 2
    workers: int = 1
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    out_dir: str = "results"
    vbd: dict | None = None
    modes: tuple[str, ...] = ()
    nodes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("rtma", "rmsr") and self.max_bucket_size < 1:
            raise ConfigError("rtma/rmsr need max_bucket_size >= 1")
        if self.mode == "rmsr" and self.active_paths < 1:
            raise ConfigError("rmsr needs active_paths >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r} in modes list")


def load_study_config(path: str, overrides: dict | None = None) -> StudyConfig:
    """Read the study config file, then apply env and explicit overrides."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return build_study_config(raw, overrides)


def build_study_config(raw: dict, overrides: dict | None = None) -> StudyConfig:
    if not isinstance(raw, dict):
        raise ConfigError("study config must be a JSON object")
    raw = dict(raw)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    plan_raw = raw.get("plan")
    if not isinstance(plan_raw, dict) or "method" not in plan_raw:
        raise ConfigError("config needs a plan object with a method")
    if "seed" in overrides:
        plan_raw = {**plan_raw, "seed": overrides.pop("seed")}
    try:
        plan = SamplePlan(**plan_raw)
    except TypeError as exc:
        raise ConfigError(f"bad plan fields: {exc}") from exc

    fixture_raw = raw.get("fixture", {})
    try:
        fixture = FixtureConfig(**fixture_raw)
    except TypeError as exc:
        raise ConfigError(f"bad fixture fields: {exc}") from exc

    out_dir = raw.get("out", "results")
    if os.environ.get("REUSE_SWEEP_OUT"):
        out_dir = os.environ["REUSE_SWEEP_OUT"]
    workers = int(raw.get("workers", 1))
    if os.environ.get("REUSE_SWEEP_WORKERS"):
        try:
            workers = int(os.environ["REUSE_SWEEP_WORKERS"])
        except ValueError as exc:
            raise ConfigError("REUSE_SWEEP_WORKERS must be an integer") from exc

    cfg = StudyConfig(
        plan=plan,
        space_path=raw.get("space"),
        stage_path=raw.get("stage"),
        mode=overrides.pop("mode", raw.get("mode", "rmsr")),
        max_bucket_size=int(
            overrides.pop("max_bucket_size", raw.get("max_bucket_size", 8))
        ),
        active_paths=int(overrides.pop("active_paths", raw.get("active_paths", 2))),
        workers=int(overrides.pop("workers", workers)),
        fixture=fixture,
        out_dir=overrides.pop("out", out_dir),
        vbd=raw.get("vbd"),
        modes=tuple(raw.get("modes", ())),
        nodes=tuple(raw.get("nodes", ())),
    )
    if overrides:
        raise ConfigError(f"unknown overrides: {sorted(overrides)}")
    return cfg


@dataclass
class StudyInputs:
    space: ParameterSpace
    template: StageTemplate
    sets: list
    image: np.ndarray
    executor: PipelineExecutor


def load_study_inputs(cfg: StudyConfig) -> StudyInputs:
    space = load_space(cfg.space_path or packaged_space_path())
    if cfg.stage_path:
        template = load_stage_template(cfg.stage_path)
    else:
        template = build_stage_template(cfg.fixture.width, cfg.fixture.height)
    template.validate_against(space)
    sets = sample(space, cfg.plan)
    image = synth_image(
        cfg.fixture.seed, cfg.fixture.width, cfg.fixture.height, cfg.fixture.blobs
    )
    executor = PipelineExecutor(image, reference_labels(image, space))
    return StudyInputs(space, template, sets, image, executor)


@dataclass
class ComposedStudy:
    """Execution units for one mode plus reuse accounting."""

    mode: str
    stages: list[MergedStage]
    index_map: list[int]          # original sample index -> output key
    replica_tasks: int
    executed_tasks: int
    replica_cost: float
    executed_cost: float
    bucket_sizes: tuple[int, ...] | None

    @property
    def reuse_fraction(self) -> float:
        if self.replica_tasks == 0:
            return 0.0
        return 1.0 - self.executed_tasks / self.replica_tasks


def compose_study(cfg: StudyConfig, space: ParameterSpace, template: StageTemplate,
                  sets: list) -> ComposedStudy:
    replica_tasks = len(sets) * len(template.tasks)
    replica_cost = len(sets) * template.total_cost()
    if cfg.mode == "none":
        stages = [
            chain_stage(space, template, pset, i, salt=b"none:%d:" % i)
            for i, pset in enumerate(sets)
        ]
        index_map = list(range(len(sets)))
        bucket_sizes = None
    elif cfg.mode == "stage":
        uniques, index_map = stage_level_dedup(sets)
        stages = [
            chain_stage(space, template, pset, i) for i, pset in enumerate(uniques)
        ]
        bucket_sizes = None
    else:
        stages, stats, index_map = plan_reuse(
            space, template, sets, cfg.max_bucket_size
        )
        bucket_sizes = stats.bucket_sizes
    executed_tasks = sum(s.task_count() for s in stages)
    executed_cost = sum(s.total_cost() for s in stages)
    return ComposedStudy(
        cfg.mode, stages, index_map, replica_tasks, executed_tasks,
        replica_cost, executed_cost, bucket_sizes,
    )


def scheduler_config(cfg: StudyConfig) -> SchedulerConfig:
    active = cfg.active_paths if cfg.mode == "rmsr" else None
    return SchedulerConfig(active_paths=active, workers=cfg.workers)


@dataclass
class StudyRun:
    composed: ComposedStudy
    dice: list[float]
    traces: list
    store: DataObjectStore
    bounds_ok: bool
    path_term: int
    pinned_term: int
    wall_time_s: float


def execute_study(cfg: StudyConfig, inputs: StudyInputs | None = None) -> StudyRun:
    """Compose and execute one mode; returns outputs and memory evidence."""
    inputs = inputs or load_study_inputs(cfg)
    composed = compose_study(cfg, inputs.space, inputs.template, inputs.sets)
    sched = scheduler_config(cfg)
    store = DataObjectStore()
    started = time.perf_counter()
    outputs, traces = execute_plan(composed.stages, sched, inputs.executor, store)
    wall = time.perf_counter() - started
    dice = [
        dice_from_payload(outputs[composed.index_map[i]])
        for i in range(len(inputs.sets))
    ]
    bounds_ok = True
    path_term = 0
    pinned_term = 0
    for stage, trace in zip(composed.stages, traces):
        terms = memory_bound_terms(stage, sched)
        path_term = max(path_term, terms[0])
        pinned_term = max(pinned_term, terms[1])
        if not memory_bound_check(trace, stage, sched):
            bounds_ok = False
    return StudyRun(composed, dice, traces, store, bounds_ok, path_term,
                    pinned_term, wall)


def study_report(cfg: StudyConfig, inputs: StudyInputs, run: StudyRun) -> dict:
    space = inputs.space
    composed = run.composed
    uniques, _ = stage_level_dedup(inputs.sets)
    report: dict = {
        "config": {
            "mode": cfg.mode,
            "max_bucket_size": cfg.max_bucket_size,
            "active_paths": cfg.active_paths if cfg.mode == "rmsr" else None,
            "workers": cfg.workers,
            "plan": {
                "method": cfg.plan.method,
                "count": cfg.plan.count,
                "trajectories": cfg.plan.trajectories,
                "levels": cfg.plan.levels,
                "seed": cfg.plan.seed,
            },
            "fixture": {
                "seed": cfg.fixture.seed,
                "width": cfg.fixture.width,
                "height": cfg.fixture.height,
                "blobs": cfg.fixture.blobs,
            },
        },
        "space": {
            "parameters": list(space.names),
            "cardinality": cardinality(space),
        },
        "sample": {"sets": len(inputs.sets), "unique_sets": len(uniques)},
        "tasks": {
            "replica_tasks": composed.replica_tasks,
            "executed_tasks": composed.executed_tasks,
            "reuse_fraction": composed.reuse_fraction,
            "replica_cost": composed.replica_cost,
            "executed_cost": composed.executed_cost,
            "compact_bound_fraction": reuse_fraction_upper_bound(
                space, inputs.template, inputs.sets
            ),
        },
        "buckets": (
            {"count": len(composed.bucket_sizes), "sizes": list(composed.bucket_sizes)}
            if composed.bucket_sizes is not None
            else None
        ),
        "memory": {
            "peak_bytes": run.store.stats().peak_bytes,
            "path_term_bytes": run.path_term if cfg.mode in ("rtma", "rmsr") else None,
            "pinned_term_bytes": run.pinned_term if cfg.mode in ("rtma", "rmsr") else None,
            "bound_ok": run.bounds_ok if cfg.mode in ("rtma", "rmsr") else None,
            "puts": run.store.stats().put_count,
            "gets": run.store.stats().get_count,
        },
        "dice": run.dice,
        "indices": None,
        "wall_time_s": run.wall_time_s,
    }
    if cfg.plan.method == "morris":
        trajectories = morris_layout(space, cfg.plan, inputs.sets)
        width = space.dimension + 1
        outputs = [
            run.dice[t * width : (t + 1) * width]
            for t in range(cfg.plan.trajectories)
        ]
        indices = morris_indices(space, trajectories, outputs)
        report["indices"] = {
            "method": "morris",
            "rows": [
                {"parameter": name, "mu": mu, "mu_star": mu_star, "sigma": sigma}
                for name, mu, mu_star, sigma in zip(
                    indices.names, indices.mu, indices.mu_star, indices.sigma
                )
            ],
            "ranking": rank_parameters(indices),
        }
    if cfg.vbd:
        report["sobol"] = _vbd_report(cfg, inputs)
    return report


def _vbd_report(cfg: StudyConfig, inputs: StudyInputs) -> dict:
    n = int(cfg.vbd.get("n", 256))
    seed = int(cfg.vbd.get("seed", cfg.plan.seed + 1))

    def model(sets):
        sub = StudyConfig(
            plan=cfg.plan, space_path=cfg.space_path, stage_path=cfg.stage_path,
            mode=cfg.mode, max_bucket_size=cfg.max_bucket_size,
            active_paths=cfg.active_paths, workers=cfg.workers,
            fixture=cfg.fixture, out_dir=cfg.out_dir,
        )
        composed = compose_study(sub, inputs.space, inputs.template, list(sets))
        store = DataObjectStore()
        outputs, _ = execute_plan(
            composed.stages, scheduler_config(sub), inputs.executor, store
        )
        return [
            dice_from_payload(outputs[composed.index_map[i]])
            for i in range(len(sets))
        ]

    indices = sobol_vbd(inputs.space, model, n, seed)
    return {
        "method": "saltelli",
        "rows": [
            {"parameter": name, "first_order": s, "total": st}
            for name, s, st in zip(
                indices.names, indices.first_order, indices.total
            )
        ],
        "sample_size": indices.sample_size,
        "degenerate": indices.degenerate,
        "ranking": rank_parameters(indices),
    }


def compare_modes(cfg: StudyConfig, modes) -> list[dict]:
    """One study run per mode over the identical sample; one row each."""
    modes = list(modes)
    if not modes:
        raise ConfigError("compare needs at least one mode")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    inputs = load_study_inputs(cfg)
    rows = []
    for m in modes:
        mode_cfg = StudyConfig(
            plan=cfg.plan, space_path=cfg.space_path, stage_path=cfg.stage_path,
            mode=m, max_bucket_size=cfg.max_bucket_size,
            active_paths=cfg.active_paths, workers=cfg.workers,
            fixture=cfg.fixture, out_dir=cfg.out_dir,
        )
        run = execute_study(mode_cfg, inputs)
        rows.append(
            {
                "mode": m,
                "executed_tasks": run.composed.executed_tasks,
                "executed_cost": run.composed.executed_cost,
                "reuse_fraction": run.composed.reuse_fraction,
                "peak_bytes": run.store.stats().peak_bytes,
                "wall_time_s": run.wall_time_s,
                "dice": run.dice,
            }
        )
    return rows


def simulate_scaling(cfg: StudyConfig, nodes_list) -> list[dict]:
    """Simulated makespan and efficiency of the composed study per node count."""
    nodes_list = list(nodes_list)
    if not nodes_list:
        raise ConfigError("simulate needs at least one node count")
    inputs = load_study_inputs(cfg)
    composed = compose_study(cfg, inputs.space, inputs.template, inputs.sets)
    costs = [stage_cost(s.tasks) for s in composed.stages]
    workers = cfg.active_paths if cfg.mode == "rmsr" else cfg.workers
    rows = []
    for nodes in nodes_list:
        result = simulate_cluster(
            costs, ClusterSimConfig(nodes=nodes, workers_per_node=max(workers, 1))
        )
        rows.append(
            {
                "nodes": nodes,
                "makespan": result.makespan,
                "efficiency": result.efficiency,
                "total_busy": sum(result.busy_time),
            }
        )
    return rows


# --- report files -------------------------------------------------------------


def strip_time_fields(obj):
    """Drop wall-clock keys; everything left is reproducible from (config, seed)."""
    if isinstance(obj, dict):
        return {
            k: strip_time_fields(v)
            for k, v in obj.items()
            if not k.startswith("wall_time")
        }
    if isinstance(obj, list):
        return [strip_time_fields(v) for v in obj]
    return obj


def report_json(report) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_text(report: dict) -> str:
    """Aligned, human-readable rendering of a study report."""
    lines = []
    cfgpart = report["config"]
    lines.append(f"mode            {cfgpart['mode']}")
    lines.append(f"max bucket size {cfgpart['max_bucket_size']}")
    lines.append(f"active paths    {cfgpart['active_paths']}")
    lines.append(f"workers         {cfgpart['workers']}")
    s = report["sample"]
    lines.append(f"sets            {s['sets']} ({s['unique_sets']} unique)")
    t = report["tasks"]
    lines.append(f"replica tasks   {t['replica_tasks']}")
    lines.append(f"executed tasks  {t['executed_tasks']}")
    lines.append(f"reuse fraction  {t['reuse_fraction']:.4f}")
    lines.append(f"compact bound   {t['compact_bound_fraction']:.4f}")
    m = report["memory"]
    lines.append(f"peak bytes      {m['peak_bytes']}")
    if m["bound_ok"] is not None:
        lines.append(
            f"memory bound    {m['path_term_bytes']} + {m['pinned_term_bytes']}"
            f" (ok={m['bound_ok']})"
        )
    if report.get("indices"):
        idx = report["indices"]
        lines.append("")
        lines.append(f"{'parameter':<10}{'mu':>12}{'mu*':>12}{'sigma':>12}")
        for row in idx["rows"]:
            lines.append(
                f"{row['parameter']:<10}{row['mu']:>12.5f}"
                f"{row['mu_star']:>12.5f}{row['sigma']:>12.5f}"
            )
        lines.append("ranking: " + " > ".join(idx["ranking"]))
    if report.get("sobol"):
        sob = report["sobol"]
        lines.append("")
        lines.append(f"{'parameter':<10}{'S':>12}{'S_T':>12}")
        for row in sob["rows"]:
            lines.append(
                f"{row['parameter']:<10}{row['first_order']:>12.5f}"
                f"{row['total']:>12.5f}"
            )
    if "wall_time_s" in report:
        lines.append("")
        lines.append(f"wall time       {report['wall_time_s']:.3f} s")
    return "\n".join(lines) + "\n"


def write_report_files(out_dir: str, name: str, report: dict) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "json": os.path.join(out_dir, f"{name}.json"),
        "txt": os.path.join(out_dir, f"{name}.txt"),
    }
    with open(paths["json"], "w", encoding="utf-8") as fh:
        fh.write(report_json(report))
    with open(paths["txt"], "w", encoding="utf-8") as fh:
        fh.write(report_text(report))
    return paths
