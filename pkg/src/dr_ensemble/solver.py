"""Closed-form consensus policies and value functions.

Conventions
-----------
States are 0-based indices ``0..S-1``. A DR event has ``L`` stages indexed
``0..L-1``; policies exist for the first ``L-1`` of them, so a policy stack
has shape ``(L-1, S, S)`` and a value table has shape ``(L, S)``.

Myopic solvers charge the *next* state (expected ``q_j`` under the policy
row). Multistage solvers charge the *current* state ``q_{i,l}`` and carry
future costs through ``v_{j,l+1}``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from dr_ensemble.core import (
    InvalidArgumentError,
    Tolerance,
    kl_divergence,
    log_sum_exp,
    softmax_rows,
    validate_stochastic,
)


@dataclass
class UnitProfile:
    """One unit's default dynamics and discomfort prices.

    ``defaults`` has shape ``(L-1, S, S)`` and ``gamma`` shape ``(L-1, S)``
    ($ per nat). Both are indexed by policy stage.
    """

    id: int
    defaults: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.defaults = np.asarray(self.defaults, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.defaults.ndim == 2:
            self.defaults = self.defaults[None]
        if self.gamma.ndim == 1:
            self.gamma = np.broadcast_to(self.gamma, (self.defaults.shape[0], self.gamma.size)).copy()
        d = self.defaults
        if d.ndim != 3 or d.shape[1] != d.shape[2]:
            raise InvalidArgumentError(f"defaults must be (stages, S, S), got {d.shape}")
        if self.gamma.shape != d.shape[:2]:
            raise InvalidArgumentError(f"gamma shape {self.gamma.shape} does not match defaults {d.shape}")
        if not np.all(self.gamma > 0):
            raise InvalidArgumentError("discomfort weights must be positive")
        for stage, mat in enumerate(d):
            report = validate_stochastic(mat, interior=True, eps=1e-300)
            if not report.ok:
                raise InvalidArgumentError(f"unit {self.id} stage {stage}: " + "; ".join(report.messages[:3]))

    @classmethod
    def stationary(cls, id: int, default, gamma, stages: int) -> "UnitProfile":
        """Profile whose default matrix and discomfort are reused at every stage."""
        default = np.asarray(default, dtype=float)
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), default.shape[:1])
        return cls(id, np.repeat(default[None], stages, axis=0), np.repeat(gamma[None], stages, axis=0))

    @property
    def S(self) -> int:
        return self.defaults.shape[1]

    @property
    def policy_stages(self) -> int:
        return self.defaults.shape[0]


@dataclass
class StageCosts:
    """Dollar cost ``q[l, i]`` of sitting in state ``i`` during stage ``l``."""

    q: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if self.q.shape[0] < 2:
            raise InvalidArgumentError("need at least two stages")
        if not np.all(np.isfinite(self.q)):
            raise InvalidArgumentError("stage costs must be finite")

    @property
    def L(self) -> int:
        return self.q.shape[0]

    @property
    def S(self) -> int:
        return self.q.shape[1]


@dataclass
class ConsensusAggregates:
    gamma_bar: np.ndarray  # (S,)
    mu_bar: np.ndarray  # (S, S)


@dataclass
class ValueTable:
    v: np.ndarray  # (L, S)
    owner: str | int = "consensus"

    @property
    def L(self) -> int:
        return self.v.shape[0]


def _check_units(units: Sequence[UnitProfile], stage: int | None = None) -> int:
    if not units:
        raise InvalidArgumentError("empty unit list")
    S = units[0].S
    stages = units[0].policy_stages
    for u in units:
        if u.S != S or u.policy_stages != stages:
            raise InvalidArgumentError("units disagree on state or stage count")
    if stage is not None and not 0 <= stage < stages:
        raise InvalidArgumentError(f"stage {stage} outside 0..{stages - 1}")
    return S


def _check_joint(joint, n_units: int, S: int) -> np.ndarray:
    joint = np.asarray(joint, dtype=int)
    if joint.ndim != 1 or joint.size == 0:
        raise InvalidArgumentError("joint state must be a nonempty 1-D sequence")
    if joint.size != n_units:
        raise InvalidArgumentError(f"joint state has {joint.size} entries for {n_units} units")
    if np.any((joint < 0) | (joint >= S)):
        raise InvalidArgumentError("joint state index out of range")
    return joint


def unit_stage_cost(unit: UnitProfile, stage: int, state: int, policy_row, next_costs) -> float:
    """Expected next cost plus priced KL discomfort for one unit and one state."""
    row = np.asarray(policy_row, dtype=float)
    default = unit.defaults[stage, state]
    return float(row @ np.asarray(next_costs, dtype=float)) + unit.gamma[stage, state] * kl_divergence(row, default)


def prior_aggregates(units: Sequence[UnitProfile], stage: int = 0) -> ConsensusAggregates:
    """Ensemble means of discomfort weights and of weighted log-defaults."""
    _check_units(units, stage)
    gammas = np.stack([u.gamma[stage] for u in units])  # (N, S)
    logdef = np.log(np.stack([u.defaults[stage] for u in units]))  # (N, S, S)
    return ConsensusAggregates(gammas.mean(axis=0), (gammas[:, :, None] * logdef).mean(axis=0))


def _softmin(gamma, mu, costs):
    # rows p_i ∝ exp((mu_ij - c_j)/gamma_i); value -gamma_i * lse_j(...)
    logits = (mu - costs) / gamma[..., None]
    return softmax_rows(logits), -gamma * log_sum_exp(logits, axis=-1)


def solve_myopic_prior(units: Sequence[UnitProfile], q_next, stage: int = 0):
    """Prior-consensus policy for a myopic ensemble.

    Returns
    -------
    P : ndarray, shape (S, S)
        The consensus policy matrix; independent of the ensemble state.
    value_coeffs : ndarray, shape (S,)
        Optimal cost is ``x @ value_coeffs`` for any ensemble state ``x``.
    """
    agg = prior_aggregates(units, stage)
    q_next = np.asarray(q_next, dtype=float)
    return _softmin(agg.gamma_bar, agg.mu_bar, q_next[None, :])


def solve_myopic_posterior(units: Sequence[UnitProfile], joint, q_next, stage: int = 0):
    """Posterior (same-state sub-consensus) policy given the realized joint state.

    Returns ``(rows, optimal_cost)`` where ``rows`` maps each occupied state to
    its consensus row and ``optimal_cost`` is the ensemble-average cost.
    """
    S = _check_units(units, stage)
    joint = _check_joint(joint, len(units), S)
    q_next = np.asarray(q_next, dtype=float)
    N = len(units)
    rows = {}
    cost = 0.0
    for i in np.unique(joint):
        members = [units[n] for n in np.flatnonzero(joint == i)]
        g = np.array([u.gamma[stage, i] for u in members])
        logdef = np.log(np.stack([u.defaults[stage, i] for u in members]))
        gamma_hat = g.mean()
        mu_hat = (g[:, None] * logdef).mean(axis=0)
        row, value = _softmin(np.array([gamma_hat]), mu_hat[None, :], q_next[None, :])
        rows[int(i)] = row[0]
        cost += len(members) / N * value[0]
    return rows, float(cost)


def solve_trivial(units: Sequence[UnitProfile], joint, q_next, stage: int = 0) -> np.ndarray:
    """Single state-independent distribution shared by every unit."""
    S = _check_units(units, stage)
    joint = _check_joint(joint, len(units), S)
    g = np.array([u.gamma[stage, i] for u, i in zip(units, joint)])
    logdef = np.log(np.stack([u.defaults[stage, i] for u, i in zip(units, joint)]))
    row, _ = _softmin(np.array([g.mean()]), (g[:, None] * logdef).mean(axis=0)[None, :],
                      np.asarray(q_next, dtype=float)[None, :])
    return row[0]


def backward_recursion_consensus(units: Sequence[UnitProfile], costs: StageCosts):
    """Multistage prior-consensus policy stack and consensus value table.

    Returns ``(policies, table)`` with ``policies`` of shape ``(L-1, S, S)``.
    The recursion never touches an ensemble state; values at a given ``x``
    come from :func:`evaluate_value`.
    """
    S = _check_units(units)
    L = costs.L
    if units[0].policy_stages != L - 1 or costs.S != S:
        raise InvalidArgumentError("stage costs do not match unit profiles")
    v = np.empty((L, S))
    v[-1] = costs.q[-1]
    policies = np.empty((L - 1, S, S))
    for stage in range(L - 2, -1, -1):
        agg = prior_aggregates(units, stage)
        policies[stage], coeffs = _softmin(agg.gamma_bar, agg.mu_bar, v[stage + 1][None, :])
        v[stage] = costs.q[stage] + coeffs
    return policies, ValueTable(v, "consensus")


def unit_value_table(unit: UnitProfile, costs: StageCosts) -> ValueTable:
    """Per-unit value table computed without any communication.

    ``v[l, i] = q[l, i] - gamma * ln sum_j pbar_ij exp(-v[l+1, j] / gamma)``
    """
    L = costs.L
    if unit.policy_stages != L - 1 or costs.S != unit.S:
        raise InvalidArgumentError("stage costs do not match unit profile")
    v = np.empty((L, unit.S))
    v[-1] = costs.q[-1]
    for stage in range(L - 2, -1, -1):
        g = unit.gamma[stage]
        exponent = np.log(unit.defaults[stage]) - v[stage + 1][None, :] / g[:, None]
        v[stage] = costs.q[stage] - g * log_sum_exp(exponent, axis=-1)
    return ValueTable(v, unit.id)


def local_stage_solve(unit_tables: Sequence[ValueTable], units: Sequence[UnitProfile], stage: int) -> np.ndarray:
    """Stage policy agreed under local consensus, using the mean per-unit next values."""
    _check_units(units, stage)
    if len(unit_tables) != len(units):
        raise InvalidArgumentError("one value table per unit is required")
    shapes = {t.v.shape for t in unit_tables}
    if len(shapes) != 1 or next(iter(shapes)) != (units[0].policy_stages + 1, units[0].S):
        raise InvalidArgumentError("value tables do not match unit profiles")
    v_bar = np.mean([t.v[stage + 1] for t in unit_tables], axis=0)
    agg = prior_aggregates(units, stage)
    return _softmin(agg.gamma_bar, agg.mu_bar, v_bar[None, :])[0]


def local_policy_stack(units: Sequence[UnitProfile], costs: StageCosts):
    """All stage matrices of the local-consensus scheme plus the per-unit tables."""
    tables = [unit_value_table(u, costs) for u in units]
    stack = np.stack([local_stage_solve(tables, units, stage) for stage in range(costs.L - 1)])
    return stack, tables


def evaluate_value(table: ValueTable, stage: int, x) -> float:
    """Value of ensemble state ``x`` at ``stage``; linear in ``x``."""
    if not 0 <= stage < table.L:
        raise InvalidArgumentError(f"stage {stage} outside 0..{table.L - 1}")
    return float(np.asarray(x, dtype=float) @ table.v[stage])


def evaluate_policy_stack(unit: UnitProfile, policies, costs: StageCosts) -> np.ndarray:
    """Expected cost-to-go ``u[l, i]`` of one unit following ``policies``.

    Uses the multistage convention; the result has shape ``(L, S)``.
    """
    policies = np.asarray(policies, dtype=float)
    L = costs.L
    u = np.empty((L, unit.S))
    u[-1] = costs.q[-1]
    for stage in range(L - 2, -1, -1):
        P = policies[stage]
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(P > 0, P * (np.log(P) - np.log(unit.defaults[stage])), 0.0).sum(axis=1)
        u[stage] = costs.q[stage] + unit.gamma[stage] * kl + P @ u[stage + 1]
    return u


def realized_ensemble_cost(rows, joint, q_next, units: Sequence[UnitProfile], stage: int = 0) -> float:
    """Average myopic cost when unit ``n`` in state ``joint[n]`` follows ``rows[n]``."""
    S = _check_units(units, stage)
    joint = _check_joint(joint, len(units), S)
    rows = np.asarray(rows, dtype=float)
    if rows.shape != (len(units), S):
        raise InvalidArgumentError("need one policy row per unit")
    return float(np.mean([unit_stage_cost(u, stage, i, r, q_next) for u, i, r in zip(units, joint, rows)]))


def policy_rows_for(joint, matrix) -> np.ndarray:
    """Rows a state-dependent policy matrix assigns to each unit of a joint state."""
    return np.asarray(matrix)[np.asarray(joint, dtype=int)]


def check_policy_stack(policies, tol: Tolerance | None = None) -> bool:
    return all(validate_stochastic(P, tol).ok for P in np.asarray(policies))
