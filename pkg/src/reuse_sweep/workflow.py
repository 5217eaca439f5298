"""Stage templates and workflow composition.

A stage is a small DAG of parameterized tasks; a study instantiates it
once per parameter set.  Composition comes in two pure flavors here:
``replica_compose`` (every instance fully copied) and ``compact_compose``
(one task instance per distinct signature, the reuse upper bound).
Signatures digest the full upstream parameter prefix, so signature
equality is exactly prefix equality.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .params import ParameterSet, ParameterSpace, canonical_key
import json


@dataclass(frozen=True)
class TaskTemplate:
    """One task of the stage body.

    ``reads`` lists the parameter names this task consumes, in space
    order; ``inputs`` the upstream task ids; ``cost`` is in simulated
    time units and ``out_bytes`` is the declared output size used by the
    planner and the simulator.
    """

    id: str
    reads: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()
    cost: float = 1.0
    out_bytes: int = 0

    def __post_init__(self) -> None:
        if self.cost < 0:
            raise ConfigError(f"task {self.id}: cost must be >= 0")
        if self.out_bytes < 0:
            raise ConfigError(f"task {self.id}: out_bytes must be >= 0")


@dataclass(frozen=True)
class StageTemplate:
    """Topologically ordered task list with a single terminal task."""

    tasks: tuple[TaskTemplate, ...]
    terminal: str

    def __post_init__(self) -> None:
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate task ids in stage template")
        seen: set[str] = set()
        consumed: set[str] = set()
        reads_flat: list[str] = []
        for task in self.tasks:
            for dep in task.inputs:
                if dep not in seen:
                    raise ConfigError(
                        f"task {task.id}: input {dep!r} not declared earlier (tasks must be topological)"
                    )
                consumed.add(dep)
            seen.add(task.id)
            reads_flat.extend(task.reads)
        if len(set(reads_flat)) != len(reads_flat):
            dupes = sorted({n for n in reads_flat if reads_flat.count(n) > 1})
            raise ConfigError(f"parameters bound by more than one task: {dupes}")
        sinks = [t.id for t in self.tasks if t.id not in consumed]
        if self.terminal not in ids:
            raise ConfigError(f"terminal {self.terminal!r} is not a task id")
        if sinks != [self.terminal]:
            raise ConfigError(
                f"stage must have exactly one terminal sink {self.terminal!r}, found {sinks}"
            )

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.tasks)

    def task(self, task_id: str) -> TaskTemplate:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ConfigError(f"unknown task {task_id!r}")

    def depth_of(self, task_id: str) -> int:
        return self.ids.index(task_id)

    def validate_against(self, space: ParameterSpace) -> None:
        unknown = [n for t in self.tasks for n in t.reads if n not in space.names]
        if unknown:
            raise ConfigError(f"tasks read parameters missing from the space: {unknown}")

    def total_cost(self) -> float:
        return sum(t.cost for t in self.tasks)


@dataclass(frozen=True)
class StageInstance:
    """A stage bound to one parameter set."""

    instance_id: int
    params: ParameterSet


@dataclass(frozen=True)
class TaskInstance:
    """A schedulable task: signature key, bound values, and input keys."""

    key: bytes
    task: TaskTemplate
    param_values: tuple
    input_keys: tuple[bytes, ...]

    def params_dict(self) -> dict[str, object]:
        return dict(zip(self.task.reads, self.param_values))


@dataclass
class WorkflowPlan:
    """Composed task instances plus bookkeeping for execution.

    ``consumers`` counts in-plan readers of each output; ``provenance``
    maps each stage-instance id to its terminal output key.
    """

    tasks: dict[bytes, TaskInstance] = field(default_factory=dict)
    consumers: dict[bytes, int] = field(default_factory=dict)
    provenance: dict[int, bytes] = field(default_factory=dict)

    def task_count(self) -> int:
        return len(self.tasks)

    def total_cost(self) -> float:
        return sum(t.task.cost for t in self.tasks.values())

    def check(self) -> None:
        seen: set[bytes] = set()
        for key, inst in self.tasks.items():
            for dep in inst.input_keys:
                if dep not in seen:
                    raise ConfigError("plan is not topologically ordered or has dangling inputs")
            seen.add(key)
        for key in self.provenance.values():
            if key not in self.tasks:
                raise ConfigError("provenance points at a missing task")

    def edge_lines(self) -> list[str]:
        """Edge-list dump, one ``producer -> consumer`` line per edge."""
        lines = []
        for key, inst in self.tasks.items():
            for dep in inst.input_keys:
                producer = self.tasks[dep]
                lines.append(
                    f"{dep.hex()}:{producer.task.id} -> {key.hex()}:{inst.task.id}"
                )
        return lines


def task_signature(task: TaskTemplate, bound_indices, input_sigs,
                   salt: bytes = b"") -> bytes:
    """128-bit digest of (task id, bound parameter indices, input signatures).

    Two instances share a signature exactly when their full upstream
    parameter prefix is equal; ``salt`` forces distinct copies apart in
    replicated plans.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(salt)
    h.update(task.id.encode())
    h.update(b"|")
    h.update(canonical_key(bound_indices))
    for sig in input_sigs:
        h.update(b"|")
        h.update(sig)
    return h.digest()


def _bound_indices(space: ParameterSpace, task: TaskTemplate, pset: ParameterSet):
    return tuple(pset.indices[space.position(name)] for name in task.reads)


def _bound_values(space: ParameterSpace, task: TaskTemplate, pset: ParameterSet):
    return tuple(space.value_of(pset, name) for name in task.reads)


def _instantiate(space: ParameterSpace, template: StageTemplate, pset: ParameterSet,
                 plan: WorkflowPlan, salt: bytes) -> bytes:
    """Add one stage instance to ``plan``, sharing tasks by signature."""
    sig_of: dict[str, bytes] = {}
    for task in template.tasks:
        indices = _bound_indices(space, task, pset)
        input_sigs = tuple(sig_of[dep] for dep in task.inputs)
        sig = task_signature(task, indices, input_sigs, salt=salt)
        sig_of[task.id] = sig
        if sig in plan.tasks:
            continue
        plan.tasks[sig] = TaskInstance(
            key=sig,
            task=task,
            param_values=_bound_values(space, task, pset),
            input_keys=input_sigs,
        )
        plan.consumers.setdefault(sig, 0)
        for dep in input_sigs:
            plan.consumers[dep] += 1
    return sig_of[template.terminal]


def replica_compose(space: ParameterSpace, template: StageTemplate,
                    sets: list[ParameterSet]) -> WorkflowPlan:
    """Fully replicate the stage for each parameter set (no reuse)."""
    template.validate_against(space)
    plan = WorkflowPlan()
    for i, pset in enumerate(sets):
        if len(pset.indices) != space.dimension:
            raise ConfigError(f"set {i} does not cover the space")
        salt = b"replica:%d:" % i
        plan.provenance[i] = _instantiate(space, template, pset, plan, salt)
    return plan


def compact_compose(space: ParameterSpace, template: StageTemplate,
                    sets: list[ParameterSet]) -> WorkflowPlan:
    """One task instance per distinct signature: the reuse upper bound."""
    template.validate_against(space)
    plan = WorkflowPlan()
    for i, pset in enumerate(sets):
        plan.provenance[i] = _instantiate(space, template, pset, plan, salt=b"")
    return plan


def stage_level_dedup(sets: list[ParameterSet]) -> tuple[list[ParameterSet], list[int]]:
    """Collapse identical sets, keeping first-occurrence order.

    Returns the unique sets and a map from each original index to the
    index of its unique representative.
    """
    uniques: list[ParameterSet] = []
    where: dict[tuple[int, ...], int] = {}
    index_map: list[int] = []
    for pset in sets:
        key = pset.indices
        if key not in where:
            where[key] = len(uniques)
            uniques.append(pset)
        index_map.append(where[key])
    return uniques, index_map


# --- stage template file format -------------------------------------------

def parse_stage_template(config_text: str) -> StageTemplate:
    """Parse the JSON stage-template file.

    Shape: ``{"terminal": id, "tasks": [{"id", "reads", "inputs",
    "cost", "out_bytes"}, ...]}`` with tasks in topological order.
    """
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"stage template is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "tasks" not in raw or "terminal" not in raw:
        raise ConfigError("stage template needs 'tasks' and 'terminal'")
    tasks = []
    for entry in raw["tasks"]:
        if not isinstance(entry, dict) or "id" not in entry:
            raise ConfigError(f"malformed task entry: {entry!r}")
        tasks.append(
            TaskTemplate(
                id=entry["id"],
                reads=tuple(entry.get("reads", ())),
                inputs=tuple(entry.get("inputs", ())),
                cost=float(entry.get("cost", 1.0)),
                out_bytes=int(entry.get("out_bytes", 0)),
            )
        )
    return StageTemplate(tuple(tasks), raw["terminal"])


def load_stage_template(path) -> StageTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_stage_template(fh.read())


def stage_template_json(template: StageTemplate) -> str:
    entries = [
        {
            "id": t.id,
            "reads": list(t.reads),
            "inputs": list(t.inputs),
            "cost": t.cost,
            "out_bytes": t.out_bytes,
        }
        for t in template.tasks
    ]
    return json.dumps({"terminal": template.terminal, "tasks": entries}, indent=2)
