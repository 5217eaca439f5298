import itertools

import numpy as np
import pytest

from reuse_sweep.errors import ConfigError
from reuse_sweep.params import ParameterSet, SamplePlan, sample
from reuse_sweep.workflow import (
    StageTemplate,
    TaskTemplate,
    compact_compose,
    parse_stage_template,
    replica_compose,
    stage_level_dedup,
    stage_template_json,
    task_signature,
)

from .conftest import make_chain, make_space


def all_sets(space):
    ranges = [range(s.size) for s in space.specs]
    return [ParameterSet(ix) for ix in itertools.product(*ranges)]


# --- template validation ------------------------------------------------------


def test_template_rejects_duplicate_ids():
    t = TaskTemplate("a")
    with pytest.raises(ConfigError):
        StageTemplate((t, TaskTemplate("a")), "a")


def test_template_rejects_forward_inputs():
    with pytest.raises(ConfigError):
        StageTemplate(
            (TaskTemplate("a", inputs=("b",)), TaskTemplate("b")), "b"
        )


def test_template_rejects_multiple_sinks():
    with pytest.raises(ConfigError):
        StageTemplate(
            (TaskTemplate("a"), TaskTemplate("b")), "b"
        )


def test_template_rejects_shared_parameter():
    with pytest.raises(ConfigError):
        StageTemplate(
            (
                TaskTemplate("a", reads=("x",)),
                TaskTemplate("b", reads=("x",), inputs=("a",)),
            ),
            "b",
        )


def test_template_requires_known_parameters(abc_chain):
    space = make_space([2], names=["a"])
    with pytest.raises(ConfigError):
        abc_chain.validate_against(space)


def test_stage_template_json_roundtrip(abc_chain):
    text = stage_template_json(abc_chain)
    parsed = parse_stage_template(text)
    assert parsed == abc_chain


# --- replica composition ------------------------------------------------------


def test_replica_single_set_seven_tasks():
    space = make_space([2] * 7)
    chain = make_chain([(f"p{i}",) for i in range(7)])
    plan = replica_compose(space, chain, [space.default_set()])
    assert plan.task_count() == 7


def test_replica_twelve_sets_three_tasks(abc_space, abc_chain):
    sets = all_sets(abc_space)[:12]
    plan = replica_compose(abc_space, abc_chain, sets)
    assert plan.task_count() == 36
    plan.check()


def test_replica_empty():
    space = make_space([2])
    chain = make_chain([("p0",)])
    assert replica_compose(space, chain, []).task_count() == 0


# --- stage-level dedup --------------------------------------------------------


def test_dedup_basic():
    a, b = ParameterSet((0, 0)), ParameterSet((1, 0))
    uniques, index_map = stage_level_dedup([a, a, b])
    assert uniques == [a, b]
    assert index_map == [0, 0, 1]


def test_dedup_identity_on_distinct():
    sets = [ParameterSet((i,)) for i in range(5)]
    uniques, index_map = stage_level_dedup(sets)
    assert uniques == sets
    assert index_map == list(range(5))


def test_dedup_matches_hash_set_oracle():
    space = make_space([3, 4])
    sets = sample(space, SamplePlan("monte_carlo", count=800, seed=17))
    uniques, index_map = stage_level_dedup(sets)
    assert {u.indices for u in uniques} == {s.indices for s in sets}
    assert len({u.indices for u in uniques}) == len(uniques)
    for i, s in enumerate(sets):
        assert uniques[index_map[i]] == s


# --- signatures ---------------------------------------------------------------


def test_signature_equal_for_equal_prefix(abc_chain):
    task = abc_chain.tasks[0]
    assert task_signature(task, (1,), ()) == task_signature(task, (1,), ())
    assert task_signature(task, (1,), ()) != task_signature(task, (2,), ())


def test_signature_ignores_downstream_divergence(abc_space, abc_chain):
    # Two sets equal except in the parameter bound by the last task share
    # every upstream signature.
    s1, s2 = ParameterSet((1, 2, 0)), ParameterSet((1, 2, 3))
    plan = compact_compose(abc_space, abc_chain, [s1, s2])
    assert plan.task_count() == 4  # t0, t1 shared; two t2 variants


def test_signature_differs_across_task_ids():
    t_a, t_b = TaskTemplate("a"), TaskTemplate("b")
    assert task_signature(t_a, (1,), ()) != task_signature(t_b, (1,), ())


def test_signature_equality_is_prefix_equality(abc_space, abc_chain):
    # Brute force every pair of sets at every depth on a small space.
    sets = all_sets(abc_space)
    plans = {s.indices: {} for s in sets}
    for pset in sets:
        sig_of = {}
        for depth, task in enumerate(abc_chain.tasks):
            indices = tuple(
                pset.indices[abc_space.position(n)] for n in task.reads
            )
            inputs = tuple(sig_of[d] for d in task.inputs)
            sig_of[task.id] = task_signature(task, indices, inputs)
            plans[pset.indices][depth] = sig_of[task.id]
    for s1 in sets[:24]:
        for s2 in sets[:24]:
            for depth in range(3):
                same_prefix = s1.indices[: depth + 1] == s2.indices[: depth + 1]
                same_sig = plans[s1.indices][depth] == plans[s2.indices][depth]
                assert same_prefix == same_sig


# --- compact composition ------------------------------------------------------


def test_compact_identical_sets_collapse():
    space = make_space([2] * 7)
    chain = make_chain([(f"p{i}",) for i in range(7)])
    s = space.default_set()
    plan = compact_compose(space, chain, [s, s])
    assert plan.task_count() == 7
    assert plan.provenance[0] == plan.provenance[1]


def test_compact_divergent_tail_hand_count(abc_space):
    # 7-task chain, two sets differing only in the last task's slot:
    # 6 shared instances plus 2 terminal variants.
    space = make_space([2] * 7)
    chain = make_chain([(f"p{i}",) for i in range(7)])
    s1 = ParameterSet((0,) * 7)
    s2 = ParameterSet((0,) * 6 + (1,))
    plan = compact_compose(space, chain, [s1, s2])
    assert plan.task_count() == 8


def test_compact_is_idempotent(abc_space, abc_chain):
    sets = all_sets(abc_space)[:12]
    once = compact_compose(abc_space, abc_chain, sets)
    twice = compact_compose(abc_space, abc_chain, sets + sets)
    assert set(once.tasks) == set(twice.tasks)


def test_task_count_ordering(abc_space, abc_chain):
    rng = np.random.default_rng(3)
    pool = all_sets(abc_space)
    for _ in range(20):
        sets = [pool[rng.integers(len(pool))] for _ in range(12)]
        uniques, _ = stage_level_dedup(sets)
        compact = compact_compose(abc_space, abc_chain, sets).task_count()
        deduped = replica_compose(abc_space, abc_chain, uniques).task_count()
        replica = replica_compose(abc_space, abc_chain, sets).task_count()
        assert compact <= deduped <= replica


def test_consumer_counts(abc_space, abc_chain):
    s1, s2 = ParameterSet((1, 2, 0)), ParameterSet((1, 2, 3))
    plan = compact_compose(abc_space, abc_chain, [s1, s2])
    by_id = {}
    for key, inst in plan.tasks.items():
        by_id.setdefault(inst.task.id, []).append(key)
    (t1_key,) = by_id["t1"]
    assert plan.consumers[t1_key] == 2      # both t2 variants read it
    for key in by_id["t2"]:
        assert plan.consumers[key] == 0     # terminals have no in-plan readers


def test_edge_lines_shape(abc_space, abc_chain):
    plan = compact_compose(abc_space, abc_chain, [ParameterSet((0, 0, 0))])
    lines = plan.edge_lines()
    assert len(lines) == 2
    assert all(" -> " in line for line in lines)


def test_replica_missing_slot_value(abc_space, abc_chain):
    with pytest.raises(ConfigError):
        replica_compose(abc_space, abc_chain, [ParameterSet((0, 0))])
