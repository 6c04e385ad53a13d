"""Brute-force numeric minimizer used to cross-check the closed forms.

Each scheme objective is written term by term (one term per unit contributing
to a policy row) and minimized by accelerated projected gradient descent.
Nothing here calls the softmax formulas in
:mod:`dr_ensemble.solver`; the oracle only needs the raw cost definition.
Intended for small instances (S <= 4, N <= 5) in tests.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from dr_ensemble.core import kkt_residual, project_to_interior_simplex
from dr_ensemble.solver import StageCosts, UnitProfile, ValueTable

_EPS = 1e-13


class OracleFailure(RuntimeError):
    pass


@dataclass
class StageObjective:
    """Sum over rows r and terms t of ``w[r,t] * (p_r . c[r,t] + gamma[r,t] * KL(p_r || pbar[r,t]))``.

    Rows are padded to a common term count with zero weights.
    """

    weights: np.ndarray  # (R, T)
    gammas: np.ndarray  # (R, T)
    defaults: np.ndarray  # (R, T, S)
    costs: np.ndarray  # (R, T, S)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[tuple]]) -> "StageObjective":
        """Build from ``rows[r] = [(w, gamma, pbar_row, cost_row), ...]``."""
        T = max(len(r) for r in rows)
        S = len(rows[0][0][2])
        W = np.zeros((len(rows), T))
        G = np.ones((len(rows), T))
        D = np.full((len(rows), T, S), 1.0 / S)
        C = np.zeros((len(rows), T, S))
        for r, terms in enumerate(rows):
            for t, (w, g, pbar, c) in enumerate(terms):
                W[r, t], G[r, t], D[r, t], C[r, t] = w, g, pbar, c
        return cls(W, G, D, C)

    @property
    def shape(self):
        return self.weights.shape[0], self.defaults.shape[-1]

    def row_values(self, P: np.ndarray) -> np.ndarray:
        logp = np.log(P)[:, None, :]
        per_term = np.einsum("rs,rts->rt", P, self.costs) + self.gammas * np.einsum(
            "rs,rts->rt", P, logp - np.log(self.defaults)
        )
        return np.sum(self.weights * per_term, axis=1)

    def value(self, P: np.ndarray) -> float:
        return float(np.sum(self.row_values(P)))

    def gradient(self, P: np.ndarray) -> np.ndarray:
        logp = np.log(P)[:, None, :]
        per_term = self.costs + self.gammas[..., None] * (logp + 1.0 - np.log(self.defaults))
        return np.einsum("rt,rts->rs", self.weights, per_term)


def _residual(P: np.ndarray, g: np.ndarray) -> float:
    if np.min(P) <= 10 * _EPS:
        # KL objectives have interior minimizers, so a floor entry is never optimal
        return np.inf
    return kkt_residual(P, g)


def oracle_minimize(objective: StageObjective, tol: float = 1e-9, max_iter: int = 200_000,
                    start=None, step0: float = 1.0) -> np.ndarray:
    """Accelerated projected gradient (FISTA) with backtracking and restarts.

    Starts from the uniform matrix unless ``start`` is given and stops when
    the KKT residual is at most ``tol``. Momentum is reset whenever the
    objective goes up, which keeps the method stable on the ill-conditioned
    instances produced by near-zero optimal entries.
    """
    R, S = objective.shape
    P = np.full((R, S), 1.0 / S) if start is None else project_to_interior_simplex(start, _EPS)
    f = objective.value(P)
    Y, t = P, 1.0
    alpha = step0
    for _ in range(max_iter):
        fy = objective.value(Y)
        gy = objective.gradient(Y)
        slack = 1e-12 * (1.0 + abs(fy))  # objective round-off
        alpha *= 1.5
        while True:
            trial = project_to_interior_simplex(Y - alpha * gy, _EPS)
            d = trial - Y
            f_trial = objective.value(trial)
            if f_trial <= fy + np.sum(gy * d) + np.sum(d * d) / (2 * alpha) + slack:
                break
            alpha *= 0.5
            if alpha < 1e-18:
                raise OracleFailure("step size underflow")
        if f_trial > f + slack and Y is not P:
            # momentum overshot: restart from the last accepted point
            Y, t = P, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = trial + (t - 1.0) / t_next * (trial - P)
        Y = project_to_interior_simplex(Y, _EPS)
        P, f, t = trial, f_trial, t_next
        if _residual(P, objective.gradient(P)) <= tol:
            return P
    raise OracleFailure(f"no stationarity within {max_iter} iterations")


# -- scheme objectives -------------------------------------------------------


def posterior_objective(units: Sequence[UnitProfile], joint, q_next, stage: int = 0):
    """Shared-row-per-occupied-state form; returns ``(objective, occupied states)``."""
    N = len(units)
    occupied = sorted(set(int(i) for i in joint))
    rows = [
        [(1.0 / N, u.gamma[stage, i], u.defaults[stage, i], q_next) for u, s in zip(units, joint) if s == i]
        for i in occupied
    ]
    return StageObjective.from_rows(rows), occupied


def trivial_objective(units: Sequence[UnitProfile], joint, q_next, stage: int = 0):
    N = len(units)
    return StageObjective.from_rows(
        [[(1.0 / N, u.gamma[stage, i], u.defaults[stage, i], q_next) for u, i in zip(units, joint)]]
    )


def prior_objective(units: Sequence[UnitProfile], q_next, x=None, stage: int = 0):
    S = units[0].S
    x = np.full(S, 1.0 / S) if x is None else np.asarray(x, dtype=float)
    N = len(units)
    return StageObjective.from_rows(
        [[(x[i] / N, u.gamma[stage, i], u.defaults[stage, i], q_next) for u in units] for i in range(S)]
    )


def local_objective(units: Sequence[UnitProfile], next_values: Sequence, stage: int, x=None):
    """Stage objective where unit ``n`` prices the future with its own ``next_values[n]``."""
    S = units[0].S
    x = np.full(S, 1.0 / S) if x is None else np.asarray(x, dtype=float)
    N = len(units)
    return StageObjective.from_rows(
        [[(x[i] / N, u.gamma[stage, i], u.defaults[stage, i], nv) for u, nv in zip(units, next_values)]
         for i in range(S)]
    )


def oracle_backward(units: Sequence[UnitProfile], costs: StageCosts, tol: float = 1e-9):
    """Multistage consensus stack by stage-wise numeric minimization.

    Values are the minimized objective itself, so no closed-form value is used.
    """
    L, S = costs.L, costs.S
    v = np.empty((L, S))
    v[-1] = costs.q[-1]
    stack = np.empty((L - 1, S, S))
    N = len(units)
    for stage in range(L - 2, -1, -1):
        obj = StageObjective.from_rows(
            [[(1.0 / N, u.gamma[stage, i], u.defaults[stage, i], v[stage + 1]) for u in units] for i in range(S)]
        )
        stack[stage] = oracle_minimize(obj, tol)
        v[stage] = costs.q[stage] + obj.row_values(stack[stage])
    return stack, ValueTable(v, "oracle")


def oracle_unit_table(unit: UnitProfile, costs: StageCosts, tol: float = 1e-9) -> ValueTable:
    return ValueTable(oracle_backward([unit], costs, tol)[1].v, unit.id)
