"""Depth-first task scheduler with an active-path admission bound.

A merged stage's task tree is executed by a pool of worker threads that
share a LIFO task stack, per-task dependency counters, and a pool of
``active_paths`` credits.  A worker takes a credit when it pops a task;
when the task finishes and exactly one dependent became ready, the worker
keeps its credit and continues down that branch (one thread, one path),
pushing any further ready dependents for others.  The credit returns to
the pool only when the path ends.  This caps the number of concurrently
live root-to-leaf paths, and with it the intermediate data held in the
store, regardless of how many stage instances were merged together.

Setting ``active_paths=None`` removes the admission bound, which models
plain width-limited execution of the merged tree (the behavior the
admission bound exists to improve on).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import ConfigError, ExecutionError
from .reuse import MergedStage
from .store import DataObjectStore
from .workflow import TaskInstance, WorkflowPlan

Executor = Callable[..., bytes]  # executor(task_template, params, inputs) -> payload


@dataclass(frozen=True)
class SchedulerConfig:
    """Admission and parallelism knobs for one stage execution."""

    active_paths: int | None = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.active_paths is not None and self.active_paths < 1:
            raise ConfigError("active_paths must be >= 1 (or None for unbounded)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class TaskRecord:
    key: bytes
    worker: int
    start: int
    end: int


@dataclass
class ExecutionTrace:
    """Per-task intervals plus sampled (tick, active paths, live bytes)."""

    records: list[TaskRecord] = field(default_factory=list)
    samples: list[tuple[int, int, int]] = field(default_factory=list)
    peak_live_bytes: int = 0

    def max_active_paths(self) -> int:
        return max((a for _, a, _ in self.samples), default=0)

    def to_lines(self) -> list[str]:
        lines = [f"task {r.key.hex()} {r.worker} {r.start} {r.end}" for r in self.records]
        lines += [f"sample {t} {a} {b}" for t, a, b in self.samples]
        return lines


class _RunState:
    """Shared mutable state for one graph execution."""

    def __init__(self, tasks: Mapping[bytes, TaskInstance], consumers: Mapping[bytes, int],
                 active_paths: int | None, store: DataObjectStore):
        self.tasks = tasks
        self.consumers = consumers
        self.store = store
        self.cond = threading.Condition()
        self.ndeps: dict[bytes, int] = {k: len(t.input_keys) for k, t in tasks.items()}
        self.dependents: dict[bytes, list[bytes]] = {k: [] for k in tasks}
        for key, inst in tasks.items():
            for dep in inst.input_keys:
                if dep not in self.dependents:
                    raise ExecutionError(f"task {key.hex()} depends on unknown {dep.hex()}")
                self.dependents[dep].append(key)
        roots = [k for k, n in self.ndeps.items() if n == 0]
        # Reversed so the first-declared root is popped first.
        self.stack: list[bytes] = list(reversed(roots))
        self.credits = active_paths if active_paths is not None else len(tasks) + 1
        self.total_credits = self.credits
        self.remaining = len(tasks)
        self.failed: Exception | None = None
        self.clock = 0
        self.records: list[TaskRecord] = []
        self.samples: list[tuple[int, int, int]] = []

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def sample(self) -> None:
        active = self.total_credits - self.credits
        self.samples.append((self.clock, active, self.store.stats().live_bytes))


def _run_task(state: _RunState, key: bytes, executor: Executor) -> None:
    inst = state.tasks[key]
    inputs = [state.store.peek(k) for k in inst.input_keys]
    payload = executor(inst.task, inst.params_dict(), inputs)
    state.store.put(key, payload, state.consumers.get(key, 0))
    # Inputs stay live until the output exists (producer/consumer overlap);
    # only now is their reference consumed.
    for k in inst.input_keys:
        state.store.get_and_release(k)


def _worker_loop(state: _RunState, executor: Executor, wid: int) -> None:
    while True:
        with state.cond:
            while (state.failed is None and state.remaining > 0
                   and not (state.stack and state.credits > 0)):
                state.cond.wait()
            if state.failed is not None or state.remaining == 0:
                state.cond.notify_all()
                return
            state.credits -= 1
            key = state.stack.pop()
            start = state.tick()
            state.sample()
        # Run tasks on this path until it ends, holding one path credit.
        while True:
            try:
                _run_task(state, key, executor)
            except Exception as exc:  # noqa: BLE001 - propagated to the caller
                with state.cond:
                    if state.failed is None:
                        state.failed = exc
                    state.credits += 1
                    state.cond.notify_all()
                return
            with state.cond:
                if state.failed is not None:
                    state.credits += 1
                    state.cond.notify_all()
                    return
                end = state.tick()
                state.records.append(TaskRecord(key, wid, start, end))
                ready: list[bytes] = []
                for dep in state.dependents[key]:
                    state.ndeps[dep] -= 1
                    if state.ndeps[dep] < 0:
                        state.failed = ExecutionError(
                            f"dependency counter underflow at {dep.hex()}"
                        )
                        state.cond.notify_all()
                        return
                    if state.ndeps[dep] == 0:
                        ready.append(dep)
                state.remaining -= 1
                state.sample()
                if ready:
                    # Continue depth-first down the leftmost ready branch;
                    # hand the rest to the stack (reversed, leftmost on top).
                    key = ready[0]
                    for extra in reversed(ready[1:]):
                        state.stack.append(extra)
                    start = state.tick()
                    if len(ready) > 1:
                        state.cond.notify_all()
                    continue
                # Path ended: return the credit.
                state.credits += 1
                state.cond.notify_all()
                break


def execute_graph(tasks: Mapping[bytes, TaskInstance], consumers: Mapping[bytes, int],
                  cfg: SchedulerConfig, executor: Executor,
                  store: DataObjectStore) -> ExecutionTrace:
    """Run an acyclic task graph to completion; returns the trace.

    On executor failure the stage is aborted and every object this graph
    put into the store is released before the error propagates.
    """
    store.reset_watermark()
    state = _RunState(tasks, consumers, cfg.active_paths, store)
    if state.remaining == 0:
        return ExecutionTrace([], [], 0)
    threads = [
        threading.Thread(target=_worker_loop, args=(state, executor, wid), daemon=True)
        for wid in range(cfg.workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if state.failed is not None:
        for key in tasks:
            if store.contains(key):
                store.release(key)
        if isinstance(state.failed, ExecutionError):
            raise state.failed
        raise ExecutionError(f"task execution failed: {state.failed}") from state.failed
    records = sorted(state.records, key=lambda r: r.start)
    return ExecutionTrace(records, state.samples, store.watermark())


def rmsr_execute(stage: MergedStage, cfg: SchedulerConfig, executor: Executor,
                 store: DataObjectStore) -> tuple[dict[int, bytes], ExecutionTrace]:
    """Execute one merged stage; returns member terminal payloads and trace.

    Terminal outputs stay pinned in the store until read here, then each
    distinct terminal is released exactly once.
    """
    trace = execute_graph(stage.tasks, stage.consumers, cfg, executor, store)
    outputs: dict[int, bytes] = {}
    for member, key in stage.terminals.items():
        outputs[member] = store.peek(key)
    for key in set(stage.terminals.values()):
        store.release(key)
    return outputs, trace


def execute_plan(plan_or_stages: WorkflowPlan | Sequence[MergedStage],
                 cfg: SchedulerConfig, executor: Executor,
                 store: DataObjectStore) -> tuple[dict[int, bytes], list[ExecutionTrace]]:
    """Run a whole composed study and collect per-instance terminal outputs.

    A ``WorkflowPlan`` executes as one task graph keyed by its provenance
    map; a list of merged stages executes sequentially, each stage
    internally parallel.
    """
    if isinstance(plan_or_stages, WorkflowPlan):
        plan = plan_or_stages
        trace = execute_graph(plan.tasks, plan.consumers, cfg, executor, store)
        outputs = {i: store.peek(k) for i, k in plan.provenance.items()}
        for key in set(plan.provenance.values()):
            store.release(key)
        return outputs, [trace]
    outputs = {}
    traces = []
    for stage in plan_or_stages:
        stage_out, trace = rmsr_execute(stage, cfg, executor, store)
        outputs.update(stage_out)
        traces.append(trace)
    return outputs, traces


# --- memory bound ------------------------------------------------------------


def max_path_footprint(tasks: Mapping[bytes, TaskInstance]) -> int:
    """Largest single-task footprint: declared input bytes plus output bytes.

    While a task runs, its inputs and its output are live together; a
    path never holds more than one running task, so this is the per-path
    peak for homogeneous chains.
    """
    best = 0
    for inst in tasks.values():
        total = inst.task.out_bytes
        for dep in inst.input_keys:
            total += tasks[dep].task.out_bytes
        best = max(best, total)
    return best


def pinned_prefix_bound(stage: MergedStage) -> int:
    """Bytes that may stay live beyond the active paths themselves.

    Outputs consumed by two or more tasks are held while their remaining
    subtrees execute; member terminal outputs are held until the study
    readout collects them.
    """
    pinned = 0
    for key, inst in stage.tasks.items():
        if stage.consumers.get(key, 0) >= 2:
            pinned += inst.task.out_bytes
    for key in set(stage.terminals.values()):
        pinned += stage.tasks[key].task.out_bytes
    return pinned


def memory_bound_terms(stage: MergedStage, cfg: SchedulerConfig) -> tuple[int, int]:
    """(active-path term, pinned term) of the static peak-bytes bound.

    The first term depends only on the stage template and ``active_paths``,
    not on how many instances were merged; the second is the statically
    pinned shared-prefix and terminal data.
    """
    paths = cfg.active_paths if cfg.active_paths is not None else len(stage.terminals)
    return paths * max_path_footprint(stage.tasks), pinned_prefix_bound(stage)


def memory_bound_check(trace: ExecutionTrace, stage: MergedStage,
                       cfg: SchedulerConfig) -> bool:
    """True iff measured peak live bytes respect the static bound."""
    path_term, pinned_term = memory_bound_terms(stage, cfg)
    return trace.peak_live_bytes <= path_term + pinned_term
