"""Parameter-space schema, sampling, and canonical keys.

A study varies an ordered list of parameters.  Grid parameters are held
internally as integer grid indices so equality checks in the reuse
machinery are exact; concrete values are rendered only when a task runs.
The declaration order of the space is significant: it is the order in
which the stage's tasks consume parameters, and therefore the order the
reuse tree branches on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Reporting-only cap: spaces larger than this saturate instead of overflowing.
CARDINALITY_MAX = 2**63 - 1

SAMPLE_METHODS = ("monte_carlo", "lhs", "halton", "morris")


@dataclass(frozen=True)
class GridDomain:
    """Evenly spaced numeric grid lo, lo+step, ..., capped at hi."""

    lo: float
    hi: float
    step: float

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ConfigError(f"grid step must be > 0, got {self.step}")
        if self.lo > self.hi:
            raise ConfigError(f"grid lo {self.lo} > hi {self.hi}")

    @property
    def size(self) -> int:
        return int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1

    def value_at(self, index: int):
        if not 0 <= index < self.size:
            raise IndexError(f"grid index {index} out of range 0..{self.size - 1}")
        return self.lo + index * self.step

    def index_of(self, value) -> int:
        k = int(round((value - self.lo) / self.step))
        if not 0 <= k < self.size or abs(self.value_at(k) - value) > 1e-9 * max(1.0, self.step):
            raise ConfigError(f"{value!r} not on grid ({self.lo}, {self.hi}, {self.step})")
        return k

    def snap_unit(self, u: float) -> int:
        # Nearest grid point over [lo, hi]; an exact half-way tie resolves
        # toward lo (ceil(x - 0.5) rounds halves down).
        x = u * (self.size - 1)
        k = math.ceil(x - 0.5)
        return min(max(k, 0), self.size - 1)

    def unit_at(self, index: int) -> float:
        return 0.0 if self.size == 1 else index / (self.size - 1)


@dataclass(frozen=True)
class CategoricalDomain:
    """Finite list of choices, addressed by position."""

    choices: tuple

    def __post_init__(self) -> None:
        if not self.choices:
            raise ConfigError("categorical domain must list at least one choice")
        if len(set(self.choices)) != len(self.choices):
            raise ConfigError(f"duplicate choices in {self.choices}")

    @property
    def size(self) -> int:
        return len(self.choices)

    def value_at(self, index: int):
        return self.choices[index]

    def index_of(self, value) -> int:
        try:
            return self.choices.index(value)
        except ValueError:
            raise ConfigError(f"{value!r} is not one of {self.choices}") from None

    def snap_unit(self, u: float) -> int:
        return min(int(u * self.size), self.size - 1)

    def unit_at(self, index: int) -> float:
        return 0.0 if self.size == 1 else index / (self.size - 1)


@dataclass(frozen=True)
class ParameterSpec:
    """One named parameter: its domain and its default value."""

    name: str
    domain: GridDomain | CategoricalDomain
    default: object

    def __post_init__(self) -> None:
        self.domain.index_of(self.default)  # raises if outside the domain

    @property
    def size(self) -> int:
        return self.domain.size

    @property
    def default_index(self) -> int:
        return self.domain.index_of(self.default)


@dataclass(frozen=True)
class ParameterSet:
    """Concrete point of the space, stored as per-dimension domain indices."""

    indices: tuple[int, ...]


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered collection of parameter specs; order is binding order."""

    specs: tuple[ParameterSpec, ...]

    def __post_init__(self) -> None:
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names: {dupes}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    @property
    def dimension(self) -> int:
        return len(self.specs)

    def position(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise ConfigError(f"unknown parameter {name!r}")

    def spec(self, name: str) -> ParameterSpec:
        return self.specs[self.position(name)]

    def default_set(self) -> ParameterSet:
        return ParameterSet(tuple(s.default_index for s in self.specs))

    def values(self, pset: ParameterSet) -> tuple:
        if len(pset.indices) != self.dimension:
            raise ConfigError(
                f"parameter set has {len(pset.indices)} values, space has {self.dimension}"
            )
        return tuple(s.domain.value_at(k) for s, k in zip(self.specs, pset.indices))

    def value_of(self, pset: ParameterSet, name: str):
        i = self.position(name)
        return self.specs[i].domain.value_at(pset.indices[i])

    def set_from_values(self, values) -> ParameterSet:
        if len(values) != self.dimension:
            raise ConfigError(f"expected {self.dimension} values, got {len(values)}")
        return ParameterSet(
            tuple(s.domain.index_of(v) for s, v in zip(self.specs, values))
        )


@dataclass(frozen=True)
class SamplePlan:
    """How many points to draw, by which method, from which seed.

    ``count`` drives monte_carlo/lhs/halton; morris draws ``trajectories``
    one-at-a-time walks over a ``levels``-point unit grid and yields
    trajectories * (dimension + 1) sets.
    """

    method: str
    count: int = 0
    trajectories: int = 1
    levels: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in SAMPLE_METHODS:
            raise ConfigError(f"unknown sample method {self.method!r}")
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if self.method == "morris":
            if self.trajectories < 1:
                raise ConfigError("morris needs trajectories >= 1")
            if self.levels < 2 or self.levels % 2 != 0:
                raise ConfigError("morris needs an even number of levels >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")


def parse_space(config_text: str) -> ParameterSpace:
    """Parse the JSON parameter-space declaration into a ParameterSpace.

    Each entry is ``{"name": ..., "grid": [lo, hi, step], "default": ...}``
    or ``{"name": ..., "choices": [...], "default": ...}``; declaration
    order becomes the space order.
    """
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"space config is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ConfigError("space config must be a JSON list of parameter entries")
    specs = []
    for entry in raw:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"malformed parameter entry: {entry!r}")
        name = entry["name"]
        if "grid" in entry:
            grid = entry["grid"]
            if not (isinstance(grid, list) and len(grid) == 3):
                raise ConfigError(f"{name}: grid must be [lo, hi, step]")
            domain: GridDomain | CategoricalDomain = GridDomain(*grid)
        elif "choices" in entry:
            domain = CategoricalDomain(tuple(entry["choices"]))
        else:
            raise ConfigError(f"{name}: entry needs either 'grid' or 'choices'")
        if "default" not in entry:
            raise ConfigError(f"{name}: missing default value")
        specs.append(ParameterSpec(name, domain, entry["default"]))
    return ParameterSpace(tuple(specs))


def load_space(path) -> ParameterSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_space(fh.read())


def cardinality(space: ParameterSpace) -> int:
    """Product of per-parameter domain sizes, saturating at CARDINALITY_MAX."""
    total = 1
    for spec in space.specs:
        total *= spec.size
        if total > CARDINALITY_MAX:
            return CARDINALITY_MAX
    return total


def halton(index: int, base: int) -> float:
    """Radical inverse of ``index`` in ``base``; index >= 1, base >= 2."""
    if index < 1:
        raise ConfigError("halton index starts at 1")
    if base < 2:
        raise ConfigError("halton base must be >= 2")
    result = 0.0
    f = 1.0
    while index > 0:
        f /= base
        result += f * (index % base)
        index //= base
    return result


def first_primes(count: int) -> list[int]:
    primes: list[int] = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % p for p in primes):
            primes.append(candidate)
        candidate += 1
    return primes


def _snap(space: ParameterSpace, unit: np.ndarray) -> ParameterSet:
    return ParameterSet(
        tuple(s.domain.snap_unit(float(u)) for s, u in zip(space.specs, unit))
    )


def _morris_delta(levels: int) -> float:
    return levels / (2.0 * (levels - 1))


def sample(space: ParameterSpace, plan: SamplePlan) -> list[ParameterSet]:
    """Draw parameter sets according to ``plan``.

    Unit-hypercube points are mapped per dimension by snapping to the
    nearest grid point (ties toward lo) or by indexing the categorical
    list.  Morris returns trajectories * (dimension + 1) sets laid out
    trajectory by trajectory, consecutive sets differing in exactly one
    coordinate.  Output is deterministic for a given seed.
    """
    k = space.dimension
    if k == 0:
        raise ConfigError("cannot sample an empty parameter space")
    rng = np.random.default_rng(plan.seed)

    if plan.method == "monte_carlo":
        return [_snap(space, rng.random(k)) for _ in range(plan.count)]

    if plan.method == "lhs":
        n = plan.count
        if n == 0:
            return []
        u = np.empty((n, k))
        for j in range(k):
            strata = rng.permutation(n)
            u[:, j] = (strata + rng.random(n)) / n
        return [_snap(space, u[i]) for i in range(n)]

    if plan.method == "halton":
        bases = first_primes(k)
        return [
            _snap(space, np.array([halton(i, b) for b in bases]))
            for i in range(1, plan.count + 1)
        ]

    # morris
    for spec in space.specs:
        if spec.size < 2:
            raise ConfigError(
                f"morris requires every domain to have >= 2 points ({spec.name} has {spec.size})"
            )
    p = plan.levels
    delta = _morris_delta(p)
    grid = np.arange(p) / (p - 1)
    lower_half = grid[: p // 2]   # room to step +delta
    upper_half = grid[p // 2 :]   # room to step -delta
    sets: list[ParameterSet] = []
    for _ in range(plan.trajectories):
        direction = rng.integers(0, 2, size=k) * 2 - 1
        x = np.where(
            direction > 0,
            rng.choice(lower_half, size=k),
            rng.choice(upper_half, size=k),
        )
        sets.append(_snap(space, x))
        for dim in rng.permutation(k):
            x = x.copy()
            x[dim] += direction[dim] * delta
            sets.append(_snap(space, x))
    return sets


def morris_layout(space: ParameterSpace, plan: SamplePlan,
                  sets: list[ParameterSet]) -> list[list[ParameterSet]]:
    """Regroup a flat morris sample into its trajectories."""
    if plan.method != "morris":
        raise ConfigError("not a morris plan")
    width = space.dimension + 1
    if len(sets) != plan.trajectories * width:
        raise ConfigError("sample length does not match the morris layout")
    return [sets[i * width : (i + 1) * width] for i in range(plan.trajectories)]


def canonical_key(indices) -> bytes:
    """Injective byte encoding of an index prefix.

    Grid values are keyed by their integer grid index, never by rendered
    floating-point text.
    """
    return b",".join(b"%d" % k for k in indices)


def format_sample(space: ParameterSpace, sets) -> str:
    """One parameter set per line, values comma-separated in space order."""
    lines = []
    for pset in sets:
        lines.append(",".join(str(v) for v in space.values(pset)))
    return "\n".join(lines) + ("\n" if lines else "")
