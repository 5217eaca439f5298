"""Reuse tree construction and bucketed stage merging.

Stage instances with overlapping parameter prefixes are organized into a
trie of task signatures: the deeper two instances share an ancestor, the
more of their work can be merged.  Buckets of at most ``max_bucket_size``
instances are carved out of the trie by alternating a prune phase (any
parent holding enough resident instances yields full buckets) with a
move-up phase (unassigned instances climb one level), until everything is
assigned.  Each bucket becomes one merged stage whose task tree holds one
task per distinct signature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .params import ParameterSet, ParameterSpace
from .workflow import (
    StageTemplate,
    TaskInstance,
    compact_compose,
    stage_level_dedup,
    task_signature,
)

ROOT_SIGNATURE = b""


@dataclass
class ReuseTreeNode:
    """Trie node: one task signature at ``depth`` along the stage order."""

    signature: bytes
    depth: int
    parent: "ReuseTreeNode | None" = None
    children: "dict[tuple[int, ...], ReuseTreeNode]" = field(default_factory=dict)
    residents: list[int] = field(default_factory=list)


@dataclass
class ReuseTree:
    root: ReuseTreeNode
    leaf_of: dict[int, ReuseTreeNode]
    template: StageTemplate
    space: ParameterSpace
    sets: list[ParameterSet]
    dfs_order: dict[int, int]  # instance id -> leaf position in tree order

    def node_count(self) -> int:
        count = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            count += 1
            stack.extend(node.children.values())
        return count - 1  # synthetic root is not a task


@dataclass(frozen=True)
class Bucket:
    """Instances merged together; ``formed_at`` names the closing node."""

    members: tuple[int, ...]
    formed_at: bytes
    depth: int

    def __post_init__(self) -> None:
        if not self.members:
            raise ConfigError("bucket cannot be empty")


@dataclass
class MergedStage:
    """Deduplicated task tree for one bucket of stage instances."""

    tasks: dict[bytes, TaskInstance]
    consumers: dict[bytes, int]
    members: tuple[int, ...]
    terminals: dict[int, bytes]

    def task_count(self) -> int:
        return len(self.tasks)

    def total_cost(self) -> float:
        return sum(t.task.cost for t in self.tasks.values())

    def width_by_depth(self, template: StageTemplate) -> dict[int, int]:
        widths: dict[int, int] = {}
        for inst in self.tasks.values():
            d = template.depth_of(inst.task.id)
            widths[d] = widths.get(d, 0) + 1
        return widths


@dataclass(frozen=True)
class ReuseStats:
    """Task and cost accounting against the fully replicated baseline."""

    replica_tasks: int
    executed_tasks: int
    reuse_fraction: float
    bucket_sizes: tuple[int, ...]
    replica_cost: float
    executed_cost: float
    cost_reuse_fraction: float


def build_reuse_tree(space: ParameterSpace, template: StageTemplate,
                     sets: list[ParameterSet]) -> ReuseTree:
    """Build the signature trie; ``sets`` must already be stage-deduplicated.

    The path from the root to an instance's leaf spells its task-signature
    prefix chain in template order.
    """
    template.validate_against(space)
    uniques = {pset.indices for pset in sets}
    if len(uniques) != len(sets):
        raise ConfigError("reuse tree input must be stage-level deduplicated")
    root = ReuseTreeNode(ROOT_SIGNATURE, 0)
    leaf_of: dict[int, ReuseTreeNode] = {}
    for instance_id, pset in enumerate(sets):
        node = root
        sig_of: dict[str, bytes] = {}
        for task in template.tasks:
            indices = tuple(pset.indices[space.position(n)] for n in task.reads)
            input_sigs = tuple(sig_of[dep] for dep in task.inputs)
            sig = task_signature(task, indices, input_sigs)
            sig_of[task.id] = sig
            child = node.children.get(indices)
            if child is None:
                child = ReuseTreeNode(sig, node.depth + 1, parent=node)
                node.children[indices] = child
            node = child
        node.residents.append(instance_id)
        leaf_of[instance_id] = node
    # Leaf positions in depth-first tree order: grouping instances in
    # this order keeps subtree neighbors (the ones sharing the longest
    # prefixes) adjacent when a parent's residents are chunked.
    dfs_order: dict[int, int] = {}
    stack = list(reversed(list(root.children.values())))
    while stack:
        node = stack.pop()
        for instance_id in node.residents:
            dfs_order[instance_id] = len(dfs_order)
        stack.extend(reversed(list(node.children.values())))
    return ReuseTree(root, leaf_of, template, space, list(sets), dfs_order)


def rtma_buckets(tree: ReuseTree, max_bucket_size: int) -> list[Bucket]:
    """Partition instances into buckets of at most ``max_bucket_size``.

    Iterates a prune phase (parents holding >= max_bucket_size resident
    instances emit full buckets, deepest parent first, then leftmost in
    tree order) and a move-up phase (remaining instances climb one
    level) until the instances collapse at the root, where leftovers are
    grouped even if undersized.  Members are always chunked in leaf
    tree order so instances sharing the longest prefixes land in the
    same bucket.
    """
    if max_bucket_size < 1:
        raise ConfigError("max_bucket_size must be >= 1")
    at: dict[int, ReuseTreeNode] = dict(tree.leaf_of)
    by_tree_order = tree.dfs_order.__getitem__
    unassigned = sorted(at, key=by_tree_order)
    buckets: list[Bucket] = []

    def prune_pass() -> bool:
        nonlocal unassigned
        groups: dict[int, list[int]] = {}
        parents: dict[int, ReuseTreeNode] = {}
        for i in unassigned:  # already in tree order
            parent = at[i].parent
            if parent is None:
                continue
            pid = id(parent)
            groups.setdefault(pid, []).append(i)
            parents[pid] = parent
        emitted = False
        assigned: set[int] = set()
        order = sorted(
            groups,
            key=lambda pid: (-parents[pid].depth, by_tree_order(groups[pid][0])),
        )
        for pid in order:
            members = groups[pid]
            while len(members) >= max_bucket_size:
                chunk, members = members[:max_bucket_size], members[max_bucket_size:]
                buckets.append(
                    Bucket(tuple(chunk), parents[pid].signature, parents[pid].depth)
                )
                assigned.update(chunk)
                emitted = True
        if assigned:
            unassigned = [i for i in unassigned if i not in assigned]
        return emitted

    while unassigned:
        prune_pass()
        if not unassigned:
            break
        if all(at[i].parent is None for i in unassigned):
            for start in range(0, len(unassigned), max_bucket_size):
                chunk = unassigned[start : start + max_bucket_size]
                buckets.append(Bucket(tuple(chunk), ROOT_SIGNATURE, 0))
            break
        for i in unassigned:
            node = at[i]
            if node.parent is not None:
                at[i] = node.parent
    return buckets


def merge_bucket(tree: ReuseTree, bucket: Bucket) -> MergedStage:
    """Merge one bucket into a single task tree.

    Walks each member's root-to-leaf path in the trie and emits one task
    per distinct node, wiring dependency edges along the path, so shared
    prefixes appear exactly once.
    """
    template = tree.template
    space = tree.space
    tasks: dict[bytes, TaskInstance] = {}
    consumers: dict[bytes, int] = {}
    terminals: dict[int, bytes] = {}
    for member in bucket.members:
        leaf = tree.leaf_of.get(member)
        if leaf is None:
            raise ConfigError(f"bucket member {member} is not in the tree")
        path: list[ReuseTreeNode] = []
        node = leaf
        while node.parent is not None:
            path.append(node)
            node = node.parent
        path.reverse()
        pset = tree.sets[member]
        for depth0, node in enumerate(path):
            task = template.tasks[depth0]
            input_keys = tuple(
                path[template.depth_of(dep)].signature for dep in task.inputs
            )
            if node.signature in tasks:
                continue
            values = tuple(space.value_of(pset, n) for n in task.reads)
            tasks[node.signature] = TaskInstance(
                key=node.signature,
                task=task,
                param_values=values,
                input_keys=input_keys,
            )
            consumers.setdefault(node.signature, 0)
            for dep in input_keys:
                consumers[dep] += 1
        terminals[member] = leaf.signature
    return MergedStage(tasks, consumers, tuple(bucket.members), terminals)


def plan_reuse(space: ParameterSpace, template: StageTemplate,
               sets: list[ParameterSet], max_bucket_size: int,
               ) -> tuple[list[MergedStage], ReuseStats, list[int]]:
    """Full pipeline: dedup, tree, buckets, merge, and reuse accounting.

    Returns the merged stages (members are indices into the deduplicated
    set list), the stats against the fully replicated baseline of the
    original ``sets``, and the original-to-unique index map.
    """
    uniques, index_map = stage_level_dedup(sets)
    tree = build_reuse_tree(space, template, uniques)
    buckets = rtma_buckets(tree, max_bucket_size)
    stages = [merge_bucket(tree, b) for b in buckets]

    replica_tasks = len(sets) * len(template.tasks)
    executed_tasks = sum(s.task_count() for s in stages)
    replica_cost = len(sets) * template.total_cost()
    executed_cost = sum(s.total_cost() for s in stages)
    stats = ReuseStats(
        replica_tasks=replica_tasks,
        executed_tasks=executed_tasks,
        reuse_fraction=(1.0 - executed_tasks / replica_tasks) if replica_tasks else 0.0,
        bucket_sizes=tuple(len(b.members) for b in buckets),
        replica_cost=replica_cost,
        executed_cost=executed_cost,
        cost_reuse_fraction=(1.0 - executed_cost / replica_cost) if replica_cost else 0.0,
    )
    return stages, stats, index_map


def chain_stage(space: ParameterSpace, template: StageTemplate,
                pset: ParameterSet, instance_id: int, salt: bytes = b"") -> MergedStage:
    """A single-member stage (the unmerged execution unit)."""
    sig_of: dict[str, bytes] = {}
    tasks: dict[bytes, TaskInstance] = {}
    consumers: dict[bytes, int] = {}
    for task in template.tasks:
        indices = tuple(pset.indices[space.position(n)] for n in task.reads)
        input_sigs = tuple(sig_of[dep] for dep in task.inputs)
        sig = task_signature(task, indices, input_sigs, salt=salt)
        sig_of[task.id] = sig
        tasks[sig] = TaskInstance(
            key=sig,
            task=task,
            param_values=tuple(space.value_of(pset, n) for n in task.reads),
            input_keys=input_sigs,
        )
        consumers.setdefault(sig, 0)
        for dep in input_sigs:
            consumers[dep] += 1
    return MergedStage(
        tasks, consumers, (instance_id,), {instance_id: sig_of[template.terminal]}
    )


def reuse_fraction_upper_bound(space: ParameterSpace, template: StageTemplate,
                               sets: list[ParameterSet]) -> float:
    """Reuse fraction of the idealized compact composition."""
    if not sets:
        return 0.0
    plan = compact_compose(space, template, sets)
    replica = len(sets) * len(template.tasks)
    return 1.0 - plan.task_count() / replica


__all__ = [
    "Bucket",
    "MergedStage",
    "ReuseStats",
    "ReuseTree",
    "ReuseTreeNode",
    "build_reuse_tree",
    "chain_stage",
    "merge_bucket",
    "plan_reuse",
    "reuse_fraction_upper_bound",
    "rtma_buckets",
]
