"""Sensitivity indices from (parameter set, output) pairs.

Two estimators are provided.  One-at-a-time screening turns each
trajectory step into an elementary effect (output delta over the unit
step size) and aggregates mean, absolute mean, and standard deviation
per parameter.  Variance-based first-order and total indices use the
paired-matrix scheme of Saltelli (2002) with the low-variance Jansen
difference forms: with sample matrices A and B and AB_i denoting A with
column i taken from B,

    S_i  = (V - mean((y_B - y_ABi)^2) / 2) / V
    S_Ti = (mean((y_A - y_ABi)^2) / 2) / V

where V is the variance of the pooled A and B outputs.  Cost is
(k + 2) * N model evaluations.  Inputs are mapped to [0, 1] per
dimension (categoricals as ordered levels) so deltas are dimensionless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .params import ParameterSet, ParameterSpace

# Monte-Carlo slack used by the in-range invariant checks on estimates.
ESTIMATOR_EPS = 0.05


@dataclass(frozen=True)
class ElementaryEffect:
    parameter: int
    value: float


@dataclass(frozen=True)
class MorrisIndices:
    names: tuple[str, ...]
    mu: tuple[float, ...]
    mu_star: tuple[float, ...]
    sigma: tuple[float, ...]


@dataclass(frozen=True)
class SobolIndices:
    names: tuple[str, ...]
    first_order: tuple[float, ...]
    total: tuple[float, ...]
    sample_size: int
    degenerate: bool = False  # constant model output: indices reported as 0


def _unit_coordinates(space: ParameterSpace, pset: ParameterSet) -> np.ndarray:
    return np.array(
        [s.domain.unit_at(k) for s, k in zip(space.specs, pset.indices)]
    )


def elementary_effects(space: ParameterSpace,
                       trajectory: list[ParameterSet],
                       outputs) -> list[ElementaryEffect]:
    """Per-step effects of one trajectory; exactly one coordinate may move."""
    if len(trajectory) != len(outputs):
        raise ConfigError("outputs are not aligned with the trajectory")
    effects = []
    for before, after, y0, y1 in zip(trajectory, trajectory[1:], outputs, outputs[1:]):
        changed = [
            i for i, (a, b) in enumerate(zip(before.indices, after.indices)) if a != b
        ]
        if len(changed) != 1:
            raise ConfigError(
                f"trajectory step changes {len(changed)} coordinates, expected exactly 1"
            )
        dim = changed[0]
        du = (space.specs[dim].domain.unit_at(after.indices[dim])
              - space.specs[dim].domain.unit_at(before.indices[dim]))
        effects.append(ElementaryEffect(dim, (y1 - y0) / du))
    return effects


def morris_indices(space: ParameterSpace,
                   trajectories: list[list[ParameterSet]],
                   outputs: list[list[float]]) -> MorrisIndices:
    """Aggregate elementary effects over trajectories into mu, mu*, sigma."""
    k = space.dimension
    per_param: list[list[float]] = [[] for _ in range(k)]
    for trajectory, ys in zip(trajectories, outputs):
        for effect in elementary_effects(space, trajectory, ys):
            per_param[effect.parameter].append(effect.value)
    mu, mu_star, sigma = [], [], []
    for values in per_param:
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise ConfigError("a parameter was never moved by any trajectory")
        mu.append(float(arr.mean()))
        mu_star.append(float(np.abs(arr).mean()))
        sigma.append(float(arr.std(ddof=1)) if arr.size > 1 else 0.0)
    return MorrisIndices(space.names, tuple(mu), tuple(mu_star), tuple(sigma))


def sobol_vbd(space: ParameterSpace, model, n: int, seed: int = 0) -> SobolIndices:
    """Paired-matrix variance decomposition at sample size ``n``.

    ``model`` is called once with a list of ParameterSets and must return
    one float per set; evaluations may be batched through the study
    engine.  A constant output is flagged and reported as all zeros.
    """
    if n < 2:
        raise ConfigError("sobol estimator needs n >= 2")
    k = space.dimension
    rng = np.random.default_rng(seed)
    a = rng.random((n, k))
    b = rng.random((n, k))

    def snap(row: np.ndarray) -> ParameterSet:
        return ParameterSet(
            tuple(s.domain.snap_unit(float(u)) for s, u in zip(space.specs, row))
        )

    sets: list[ParameterSet] = [snap(a[i]) for i in range(n)]
    sets += [snap(b[i]) for i in range(n)]
    for i in range(k):
        ab = a.copy()
        ab[:, i] = b[:, i]
        sets += [snap(ab[j]) for j in range(n)]

    ys = np.asarray(model(sets), dtype=float)
    if ys.shape != ((k + 2) * n,):
        raise ConfigError("model returned the wrong number of outputs")
    y_a = ys[:n]
    y_b = ys[n : 2 * n]
    variance = float(np.var(np.concatenate([y_a, y_b])))
    if variance == 0.0:
        zeros = tuple(0.0 for _ in range(k))
        return SobolIndices(space.names, zeros, zeros, n, degenerate=True)
    first, total = [], []
    for i in range(k):
        y_abi = ys[(2 + i) * n : (3 + i) * n]
        first.append(
            float((variance - 0.5 * np.mean((y_b - y_abi) ** 2)) / variance)
        )
        total.append(float(0.5 * np.mean((y_a - y_abi) ** 2) / variance))
    return SobolIndices(space.names, tuple(first), tuple(total), n)


def rank_parameters(indices: MorrisIndices | SobolIndices) -> list[str]:
    """Parameter names, most influential first; ties keep declaration order."""
    if isinstance(indices, MorrisIndices):
        scores = indices.mu_star
    else:
        scores = indices.total
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [indices.names[i] for i in order]
