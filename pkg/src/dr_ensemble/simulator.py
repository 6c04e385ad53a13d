"""Forward simulation of a DR event under given policies.

``simulate_exact`` moves every unit by inverse-CDF sampling of its policy
row. The uniform draws for stage ``l`` of replica ``r`` come from a stream
seeded by ``(seed, r, l)`` and unit ``n`` always consumes the ``n``-th draw,
so two schemes run with the same seed share their randomness (common random
numbers) and results do not depend on evaluation order.

``propagate_gaussian`` is the aggregate alternative: the ensemble state
moves by ``P^T x`` plus Gaussian noise.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dr_ensemble.core import InvalidArgumentError, project_to_simplex
from dr_ensemble.solver import StageCosts, UnitProfile

TRAJECTORY_HEADER = ("stage", "scheme", "mean_power_kw", "std_power_kw", "realized_cost_usd")
NOISE_KINDS = ("exact-multinomial", "gaussian-clt", "none")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian-clt"
    N: float = 100

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}")
        if not self.N >= 1:
            raise InvalidArgumentError("ensemble size must be at least 1")


@dataclass
class Trajectory:
    x: np.ndarray  # (L, S) ensemble states
    mean_power_kw: np.ndarray  # (L,)
    std_power_kw: np.ndarray  # (L,)
    cost_usd: np.ndarray  # (L,) ensemble-average realized cost per stage
    states: np.ndarray | None = None  # (L, N) joint states, exact mode only

    @property
    def L(self) -> int:
        return self.x.shape[0]

    @property
    def total_cost_usd(self) -> float:
        return float(self.cost_usd.sum())


def sample_unit_transition(row, xi: float) -> int:
    """Next state by inverse CDF: ``s`` with ``xi`` in ``[F(s-1), F(s))``."""
    if not 0.0 <= xi < 1.0:
        raise InvalidArgumentError("xi must lie in [0, 1)")
    cdf = np.cumsum(np.asarray(row, dtype=float))
    return int(min(np.searchsorted(cdf, xi, side="right"), cdf.size - 1))


def sample_transitions(rows, xi) -> np.ndarray:
    """Vectorized :func:`sample_unit_transition` for one row per unit."""
    cdf = np.cumsum(np.asarray(rows, dtype=float), axis=1)
    xi = np.asarray(xi, dtype=float)
    nxt = np.sum(cdf <= xi[:, None], axis=1)
    return np.minimum(nxt, cdf.shape[1] - 1)


def stage_uniforms(seed: int, replica: int, stage: int, N: int) -> np.ndarray:
    return np.random.default_rng([seed, replica, stage]).random(N)


def ensemble_state_of(joint, S: int) -> np.ndarray:
    """Fraction of units in each state."""
    joint = np.asarray(joint, dtype=int)
    if joint.size == 0 or np.any((joint < 0) | (joint >= S)):
        raise InvalidArgumentError("invalid joint state")
    return np.bincount(joint, minlength=S) / joint.size


def initial_joint_state(x, N: int, seed: int, replica: int = 0) -> np.ndarray:
    """Sample ``N`` i.i.d. unit states from the distribution ``x``."""
    return sample_transitions(np.broadcast_to(np.asarray(x, dtype=float), (N, len(x))),
                              np.random.default_rng([seed, 2**31 - 1, replica]).random(N))


def _per_unit_stack(policies, N: int) -> np.ndarray:
    P = np.asarray(policies, dtype=float)
    if P.ndim == 3:
        return np.broadcast_to(P, (N,) + P.shape)
    if P.ndim == 4 and P.shape[0] == N:
        return P
    raise InvalidArgumentError(f"policies must be (L-1, S, S) or (N, L-1, S, S), got {P.shape}")


def simulate_exact(units: Sequence[UnitProfile], policies, initial, costs: StageCosts, power_map,
                   seed: int, replica: int = 0) -> Trajectory:
    """Monte Carlo run of every unit through the event.

    ``policies`` is either one shared ``(L-1, S, S)`` stack or one stack per
    unit. Realized cost at stage ``l < L-1`` charges the current state plus
    the unit's priced KL discomfort of the row it follows; the last stage
    charges the terminal cost only.
    """
    N = len(units)
    L, S = costs.L, costs.S
    P = _per_unit_stack(policies, N)
    if P.shape[1:] != (L - 1, S, S):
        raise InvalidArgumentError("policy stack does not match stage costs")
    power_map = np.asarray(power_map, dtype=float)
    gamma = np.stack([u.gamma for u in units])  # (N, L-1, S)
    logdef = np.log(np.stack([u.defaults for u in units]))  # (N, L-1, S, S)
    initial = np.asarray(initial, dtype=int)
    if initial.shape != (N,):
        raise InvalidArgumentError("initial joint state must have one entry per unit")
    states = np.empty((L, N), dtype=int)
    states[0] = initial
    cost = np.empty(L)
    idx = np.arange(N)
    for stage in range(L - 1):
        cur = states[stage]
        rows = P[idx, stage, cur]  # (N, S)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(rows > 0, rows * (np.log(rows) - logdef[idx, stage, cur]), 0.0).sum(axis=1)
        cost[stage] = np.mean(costs.q[stage, cur] + gamma[idx, stage, cur] * kl)
        states[stage + 1] = sample_transitions(rows, stage_uniforms(seed, replica, stage, N))
    cost[-1] = np.mean(costs.q[-1, states[-1]])
    x = np.stack([np.bincount(s, minlength=S) / N for s in states])
    unit_power = power_map[states]
    return Trajectory(x, unit_power.mean(axis=1), unit_power.std(axis=1), cost, states)


def gaussian_variance(x, P, N: float) -> np.ndarray:
    """Diagonal noise variance ``(1/N) sum_i x_i^2 (p_ij - p_ij^2)`` for each next state ``j``."""
    x = np.asarray(x, dtype=float)
    P = np.asarray(P, dtype=float)
    return (x**2) @ (P - P**2) / N


def multinomial_variance(x, P, N: float) -> np.ndarray:
    """Exact per-entry variance of the next ensemble state when ``N x_i`` units sit in state ``i``."""
    x = np.asarray(x, dtype=float)
    P = np.asarray(P, dtype=float)
    return x @ (P - P**2) / N


def propagate_gaussian(x, P, noise: NoiseModel, seed=None, project: bool = True) -> np.ndarray:
    """One step ``P^T x + noise``, re-projected onto the simplex.

    ``gaussian-clt`` uses :func:`gaussian_variance`; ``exact-multinomial``
    draws the transitions of ``round(N x_i)`` units per state; ``none`` is
    the deterministic mean.
    """
    x = np.asarray(x, dtype=float)
    P = np.asarray(P, dtype=float)
    mean = P.T @ x
    if noise.kind == "none":
        return mean
    rng = np.random.default_rng(seed)
    if noise.kind == "exact-multinomial":
        counts = np.rint(x * noise.N).astype(int)
        moved = sum(rng.multinomial(c, P[i]) for i, c in enumerate(counts) if c > 0)
        return np.asarray(moved, dtype=float) / max(counts.sum(), 1)
    y = mean + rng.normal(size=mean.shape) * np.sqrt(gaussian_variance(x, P, noise.N))
    return project_to_simplex(y) if project else y


def simulate_gaussian(units: Sequence[UnitProfile], policies, x0, costs: StageCosts, power_map,
                      noise: NoiseModel, seed: int) -> Trajectory:
    """Aggregate-state run under one shared policy stack; costs are expectations given ``x``."""
    P = np.asarray(policies, dtype=float)
    L, S = costs.L, costs.S
    power_map = np.asarray(power_map, dtype=float)
    gamma = np.mean([u.gamma for u in units], axis=0)
    kl = np.mean([np.sum(P * (np.log(P) - np.log(u.defaults)), axis=-1) for u in units], axis=0)  # (L-1, S)
    x = np.empty((L, S))
    x[0] = x0
    cost = np.empty(L)
    for stage in range(L - 1):
        cost[stage] = x[stage] @ (costs.q[stage] + gamma[stage] * kl[stage])
        x[stage + 1] = propagate_gaussian(x[stage], P[stage], noise, [seed, stage])
    cost[-1] = x[-1] @ costs.q[-1]
    mean = x @ power_map
    std = np.sqrt(np.maximum(x @ power_map**2 - mean**2, 0.0))
    return Trajectory(x, mean, std, cost)


def mean_power(trajectory: Trajectory, power_map) -> np.ndarray:
    """Stage-wise ``sum_i x_i power_i``."""
    return trajectory.x @ np.asarray(power_map, dtype=float)


def write_trajectory_csv(path, trajectories: dict) -> Path:
    """Write ``{scheme: Trajectory}`` in long format."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for scheme, traj in trajectories.items():
            for stage in range(traj.L):
                writer.writerow([stage, scheme, repr(float(traj.mean_power_kw[stage])),
                                 repr(float(traj.std_power_kw[stage])), repr(float(traj.cost_usd[stage]))])
    return path


def read_trajectory_csv(path) -> dict:
    """Inverse of :func:`write_trajectory_csv`; returns per-scheme column arrays."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cols = out.setdefault(row["scheme"], {"mean_power_kw": [], "std_power_kw": [], "realized_cost_usd": []})
            for key in cols:
                cols[key].append(float(row[key]))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}
