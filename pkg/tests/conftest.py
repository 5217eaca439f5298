"""Shared fixtures: tiny spaces, chain templates, and a cheap executor."""

from __future__ import annotations

import hashlib

import pytest

from reuse_sweep.params import (
    CategoricalDomain,
    GridDomain,
    ParameterSpace,
    ParameterSpec,
)
from reuse_sweep.workflow import StageTemplate, TaskTemplate


def make_space(sizes, names=None):
    """A space of integer grids with the given domain sizes."""
    names = names or [f"p{i}" for i in range(len(sizes))]
    specs = tuple(
        ParameterSpec(name, GridDomain(0, size - 1, 1), 0)
        for name, size in zip(names, sizes)
    )
    return ParameterSpace(specs)


def make_chain(slots, costs=None, out_bytes=None, terminal=None):
    """A chain template; ``slots`` maps each task to its parameter names."""
    costs = costs or [1.0] * len(slots)
    out_bytes = out_bytes or [100] * len(slots)
    tasks = []
    previous = None
    for i, (names, cost, size) in enumerate(zip(slots, costs, out_bytes)):
        tid = f"t{i}"
        tasks.append(
            TaskTemplate(
                id=tid,
                reads=tuple(names),
                inputs=(previous,) if previous else (),
                cost=cost,
                out_bytes=size,
            )
        )
        previous = tid
    return StageTemplate(tuple(tasks), terminal or f"t{len(slots) - 1}")


class DigestExecutor:
    """Pure synthetic executor: output = keyed digest padded to out_bytes.

    Output depends only on (task id, bound params, inputs), mirroring the
    purity contract of real task implementations.
    """

    def __call__(self, task, params, inputs):
        h = hashlib.blake2b(digest_size=32)
        h.update(task.id.encode())
        for k in sorted(params):
            h.update(f"|{k}={params[k]}".encode())
        for blob in inputs:
            h.update(b"|")
            h.update(blob)
        digest = h.digest()
        size = max(task.out_bytes, 1)
        reps = size // len(digest) + 1
        return (digest * reps)[:size]


@pytest.fixture
def digest_executor():
    return DigestExecutor()


@pytest.fixture
def abc_space():
    """Three parameters wide enough for the 12-instance tree scenario."""
    return make_space([3, 6, 4], names=["a", "b", "c"])


@pytest.fixture
def abc_chain():
    return make_chain([("a",), ("b",), ("c",)], out_bytes=[100, 60, 30])
