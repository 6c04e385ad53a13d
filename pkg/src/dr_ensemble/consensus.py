"""Gossip negotiation of consensus policies.

Every unit keeps its own copy of the policy (a full stage stack for global
consensus, a single stage matrix for local consensus). In each iteration a
unit mixes its copy with copies received from peers, takes a gradient step
on its own stage objective at the mixed point, and projects every row back
onto the eps-interior of the simplex.

Two execution modes are provided. ``synchronous`` runs rounds in which all
units mix with column-normalized gossip weights at once. ``asynchronous``
replays a Poisson event stream: at each event one sharer ``m`` sends to one
receiver ``n`` and only ``n`` updates, keeping weight ``1 - g[m, n]`` on its
own copy.
"""

from __future__ import annotations

import csv
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dr_ensemble.core import (
    DEFAULT_INTERIOR_EPS,
    InvalidArgumentError,
    softmax_rows,
    project_to_interior_simplex,
)
from dr_ensemble.solver import StageCosts, UnitProfile, ValueTable, unit_value_table

TRACE_HEADER = ("k", "disagreement", "error_to_reference", "alpha")


@dataclass
class GossipNetwork:
    """Gossip weights ``g[m, n]`` (probability that ``m`` shares with ``n``) and Poisson rate."""

    weights: np.ndarray
    rate: float = 1.0

    def __post_init__(self):
        g = np.asarray(self.weights, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 2:
            raise InvalidArgumentError("weights must be an N x N matrix with N >= 2")
        if not np.all((g > 0) & (g < 1)):
            raise InvalidArgumentError("every gossip weight must lie in (0, 1)")
        if np.max(np.abs(g.sum(axis=1) - 1.0)) > 1e-9:
            raise InvalidArgumentError("gossip weight rows must sum to 1")
        if not self.rate > 0:
            raise InvalidArgumentError("Poisson rate must be positive")
        self.weights = g

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    @property
    def doubly_stochastic(self) -> bool:
        return bool(np.max(np.abs(self.weights.sum(axis=0) - 1.0)) <= 1e-9)

    def receiver_weights(self) -> np.ndarray:
        """Column-normalized weights; column ``n`` is the convex mix used by receiver ``n``."""
        return self.weights / self.weights.sum(axis=0, keepdims=True)


def build_gossip_network(N: int, topology: str = "uniform", weights=None, rate: float = 1.0,
                         seed: int | None = None) -> GossipNetwork:
    """Construct a gossip network.

    ``uniform`` gives every pair weight ``1/N``. ``metropolis-complete`` draws
    random symmetric affinities on the complete graph and applies the
    Metropolis-Hastings rule, which yields symmetric doubly stochastic weights.
    ``custom`` validates and wraps ``weights``.
    """
    if N < 2:
        raise InvalidArgumentError("a gossip network needs at least two units")
    if topology == "uniform":
        return GossipNetwork(np.full((N, N), 1.0 / N), rate)
    if topology == "metropolis-complete":
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.5, 1.5, size=(N, N))
        a = np.triu(a, 1)
        a = a + a.T
        deg = a.sum(axis=1)
        g = a / (1.0 + np.maximum(deg[:, None], deg[None, :]))
        np.fill_diagonal(g, 0.0)
        np.fill_diagonal(g, 1.0 - g.sum(axis=1))
        return GossipNetwork(g, rate)
    if topology == "custom":
        if weights is None:
            raise InvalidArgumentError("custom topology requires explicit weights")
        net = GossipNetwork(np.asarray(weights, dtype=float), rate)
        if net.N != N:
            raise InvalidArgumentError(f"weights describe {net.N} units, expected {N}")
        return net
    raise InvalidArgumentError(f"unknown topology {topology!r}")


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``alpha_k = a / (k + b)`` for ``k = 1, 2, ...``."""

    kind: str = "harmonic"
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("harmonic", "scaled-harmonic"):
            raise InvalidArgumentError(f"unknown step schedule {self.kind!r}")
        if self.kind == "harmonic" and (self.a != 1.0 or self.b != 0.0):
            raise InvalidArgumentError("the plain harmonic schedule is 1/k; use scaled-harmonic")
        if not (self.a > 0 and self.b >= 0):
            raise InvalidArgumentError("need a > 0 and b >= 0")

    def alpha(self, k: int) -> float:
        return self.a / (k + self.b)


@dataclass(frozen=True)
class Event:
    time: float
    sharer: int
    receiver: int


def poisson_events(network: GossipNetwork, seed: int | None = None) -> Iterator[Event]:
    """Endless stream of gossip events.

    The superposition of the units' Poisson clocks has rate ``N * r``; the
    sharer is uniform over units and the receiver is drawn from the sharer's
    weight row.
    """
    rng = np.random.default_rng(seed)
    N = network.N
    cdf = np.cumsum(network.weights, axis=1)
    t = 0.0
    block = 4096
    while True:
        gaps = rng.exponential(1.0 / (N * network.rate), size=block)
        sharers = rng.integers(0, N, size=block)
        u = rng.random(block)
        for gap, m, x in zip(gaps, sharers, u):
            t += gap
            n = min(int(np.searchsorted(cdf[m], x * cdf[m, -1], side="right")), N - 1)
            yield Event(t, int(m), n)


def poisson_schedule(network: GossipNetwork, horizon: float, seed: int | None = None) -> list[Event]:
    """All events in ``[0, horizon)``, deterministic given ``seed``."""
    if not horizon > 0:
        raise InvalidArgumentError("horizon must be positive")
    events = []
    for ev in poisson_events(network, seed):
        if ev.time >= horizon:
            break
        events.append(ev)
    return events


def unit_gradient(unit: UnitProfile, Q, next_values, stage: int) -> np.ndarray:
    """Gradient of the unit's row-summed stage objective at policy ``Q``.

    Entry ``(i, j)`` is ``gamma_i * (ln(Q_ij / pbar_ij) + 1) + next_values_j``.
    """
    Q = np.asarray(Q, dtype=float)
    if np.any(Q <= 0):
        raise InvalidArgumentError("gradient requires a strictly interior policy")
    g = unit.gamma[stage][:, None]
    return g * (np.log(Q) - np.log(unit.defaults[stage]) + 1.0) + np.asarray(next_values, dtype=float)[None, :]


def disagreement_metric(policies) -> float:
    """Largest Frobenius distance of a unit's policy (stack) from the across-unit mean."""
    P = np.asarray(policies, dtype=float)
    if P.shape[0] == 0:
        raise InvalidArgumentError("no policies")
    # deviations from the first copy keep identical copies exactly at zero
    dev = P - P[0]
    diff = (dev - dev.mean(axis=0)).reshape(P.shape[0], -1)
    return float(np.max(np.linalg.norm(diff, axis=1)))


def error_to_reference(policies, reference) -> float:
    """Largest Euclidean distance ``|vec(P_n - P*)|`` over units."""
    P = np.asarray(policies, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if P.shape[1:] != ref.shape:
        raise InvalidArgumentError(f"policy shape {P.shape[1:]} does not match reference {ref.shape}")
    return float(np.max(np.linalg.norm((P - ref).reshape(P.shape[0], -1), axis=1)))


def best_response_residual(Q, g, gamma_bar) -> float:
    """Frobenius size of one multiplicative step ``Q * exp(-g / gamma_bar)``.

    ``Q`` is the network-average mixed policy, ``g`` the network-average
    gradient at the copies and ``gamma_bar`` the mean discomfort weight per
    row. For the KL stage objective this step lands on the softmax best
    response to the current next-stage values, so the residual is zero
    exactly at a fixed point and is measured in probability units.
    """
    logits = np.log(Q) - g / gamma_bar[..., None]
    return float(np.linalg.norm(softmax_rows(logits) - Q))


@dataclass
class ConsensusStop:
    """When to stop negotiating.

    A run stops once the copies agree within ``threshold``
    (:func:`disagreement_metric`) and the mean mixed policy is within
    ``stationarity`` (Frobenius, default ``threshold``) of its best
    response, see :func:`best_response_residual`. Agreement alone is not
    enough, since identical units agree after one round wherever they are.
    ``max_iter`` caps the run.
    """

    threshold: float = 0.01
    max_iter: int = 10_000
    stationarity: float | None = None

    def __post_init__(self):
        if self.threshold < 0 or self.max_iter < 1:
            raise InvalidArgumentError("threshold must be >= 0 and max_iter >= 1")


@dataclass
class ConsensusRunReport:
    iterations: int
    policies: np.ndarray
    converged: bool
    mode: str
    k: list = field(default_factory=list)
    disagreement: list = field(default_factory=list)
    error: list | None = None
    alpha: list = field(default_factory=list)
    stationarity: list = field(default_factory=list)
    payload_size: int = 0
    messages: int = 0
    notes: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def final_disagreement(self) -> float:
        return self.disagreement[-1] if self.disagreement else float("nan")

    @property
    def final_error(self) -> float | None:
        return self.error[-1] if self.error else None

    def trace_rows(self):
        errors = self.error if self.error is not None else [None] * len(self.k)
        for k, d, e, a in zip(self.k, self.disagreement, errors, self.alpha):
            yield k, repr(d), "" if e is None else repr(e), repr(a)

    def write_trace(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            writer.writerows(self.trace_rows())
        return path


class _Ensemble:
    """Stacked unit data for vectorized updates over a block of stages.

    ``Q`` arguments are either per unit, shape ``(M, K, S, S)``, or one
    matrix stack ``(K, S, S)`` shared by every selected unit. ``idx`` is a
    slice selecting the units.
    """

    def __init__(self, units: Sequence[UnitProfile], stages: slice):
        self.gamma = np.stack([u.gamma[stages] for u in units])  # (N, K, S)
        self.defaults = np.stack([u.defaults[stages] for u in units])  # (N, K, S, S)
        self.logdef = np.log(self.defaults)

    def gradient(self, Q, logq, next_values, idx: slice):
        # next_values: (M, K, S) prices of the next state
        g = logq - self.logdef[idx]
        g += 1.0
        g *= self.gamma[idx][..., None]
        g += next_values[:, :, None, :]
        return g

    def evaluate(self, Q, logq, q, idx: slice):
        """Per-unit cost-to-go of following ``Q`` (multistage convention), shape (M, K+1, S)."""
        logdef = self.logdef[idx]
        M, K, S = logdef.shape[:3]
        if Q.ndim == 3:
            kl = np.sum(Q * logq, axis=-1) - np.einsum("ksj,mksj->mks", Q, logdef)
        else:
            kl = np.sum(Q * (logq - logdef), axis=-1)
        kl *= self.gamma[idx]
        kl += q[:-1]
        u = np.empty((M, K + 1, S))
        u[:, -1] = q[-1]
        for stage in range(K - 1, -1, -1):
            if Q.ndim == 3:
                u[:, stage] = kl[:, stage] + u[:, stage + 1] @ Q[stage].T
            else:
                u[:, stage] = kl[:, stage] + np.matmul(Q[:, stage], u[:, stage + 1, :, None])[..., 0]
        return u


def _run(initial, gradient_fn, network, schedule, mode, stop, seed, reference, eps, gamma_bar, payload):
    start = time.perf_counter()
    P = np.array(initial, dtype=float)
    N = P.shape[0]
    W = network.receiver_weights()
    stat_tol = stop.stationarity if stop.stationarity is not None else stop.threshold
    report = ConsensusRunReport(0, P, False, mode, error=[] if reference is not None else None,
                                payload_size=payload)
    if not network.doubly_stochastic:
        report.notes.append("gossip weights are not doubly stochastic; convergence not guaranteed")

    def record(k, alpha):
        report.k.append(k)
        report.disagreement.append(disagreement_metric(P))
        report.alpha.append(alpha)
        if reference is not None:
            report.error.append(error_to_reference(P, reference))

    def done():
        return report.disagreement[-1] <= stop.threshold and report.stationarity[-1] <= stat_tol

    # stationarity is always judged at the iterate that would be returned,
    # never at the mixed point the step started from
    everyone = slice(None)
    record(0, float("nan"))
    if mode == "synchronous":
        # when every receiver uses the same mix (uniform gossip) one shared
        # matrix stack stands in for all N identical copies
        shared = bool(np.all(W == W[:, :1]))

        def mix_and_grad(P):
            if shared:
                Q = np.tensordot(W[:, 0], P, axes=1)
                Qbar = Q
            else:
                Q = np.tensordot(W.T, P, axes=1)
                Qbar = Q.mean(axis=0)
            G = gradient_fn(Q, everyone)
            return Q, G, best_response_residual(Qbar, G.mean(axis=0), gamma_bar)

        Q, G, stat = mix_and_grad(P)
        report.stationarity.append(stat)
        report.converged = done()
        for k in range(1, stop.max_iter + 1):
            if report.converged:
                break
            alpha = schedule.alpha(k)
            P = project_to_interior_simplex(Q - alpha * G, eps)
            report.messages += N * (N - 1)
            record(k, alpha)
            Q, G, stat = mix_and_grad(P)
            report.stationarity.append(stat)
            report.iterations = k
            report.converged = done()
    elif mode == "asynchronous":
        g = network.weights
        check_every = N

        def check():
            G = gradient_fn(P, everyone)
            report.stationarity.append(best_response_residual(P.mean(axis=0), G.mean(axis=0), gamma_bar))
            return done()

        report.converged = check()
        events = poisson_events(network, seed)
        k = 0
        while not report.converged and k < stop.max_iter:
            k += 1
            ev = next(events)
            alpha = schedule.alpha(k)
            m, n = ev.sharer, ev.receiver
            w = g[m, n] if m != n else 0.0
            Q = (1.0 - w) * P[n] + w * P[m]
            grad = gradient_fn(Q[None], slice(n, n + 1))[0]
            P[n] = project_to_interior_simplex(Q - alpha * grad, eps)
            report.messages += 1
            report.iterations = k
            if k % check_every == 0 or k == stop.max_iter:
                record(k, alpha)
                report.converged = check()
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    report.policies = P
    report.wall_clock = time.perf_counter() - start
    return report


def run_global_consensus(units: Sequence[UnitProfile], costs: StageCosts, network: GossipNetwork,
                         schedule: StepSchedule | None = None, mode: str = "synchronous",
                         stop: ConsensusStop | None = None, seed: int | None = None,
                         reference=None, eps: float = DEFAULT_INTERIOR_EPS) -> ConsensusRunReport:
    """Negotiate the whole ``(L-1, S, S)`` policy stack at once.

    Each unit prices future stages with its own expected cost-to-go under the
    stack it currently holds, so at agreement the average of those values is
    the consensus value function and the fixed point is the multistage
    prior-consensus stack. ``reference`` (e.g. the closed-form stack) only
    feeds the error trace.
    """
    if network.N != len(units):
        raise InvalidArgumentError("network size does not match the ensemble")
    schedule = schedule or StepSchedule()
    stop = stop or ConsensusStop()
    ens = _Ensemble(units, slice(None))
    q = costs.q

    def gradient(Q, idx):
        logq = np.log(Q)
        u = ens.evaluate(Q, logq, q, idx)
        return ens.gradient(Q, logq, u[:, 1:], idx)

    K, S = ens.gamma.shape[1:]
    return _run(ens.defaults, gradient, network, schedule, mode, stop, seed, reference, eps,
                ens.gamma.mean(axis=0), K * S * S)


def run_local_consensus(units: Sequence[UnitProfile], stage: int, next_value_tables: Sequence[ValueTable],
                        network: GossipNetwork, schedule: StepSchedule | None = None,
                        mode: str = "synchronous", stop: ConsensusStop | None = None,
                        seed: int | None = None, reference=None,
                        eps: float = DEFAULT_INTERIOR_EPS) -> ConsensusRunReport:
    """Negotiate a single stage matrix; each unit prices the next stage with its own table.

    The returned policies have shape ``(N, S, S)``.
    """
    if network.N != len(units):
        raise InvalidArgumentError("network size does not match the ensemble")
    if len(next_value_tables) != len(units):
        raise InvalidArgumentError("one value table per unit is required")
    schedule = schedule or StepSchedule()
    stop = stop or ConsensusStop()
    ens = _Ensemble(units, slice(stage, stage + 1))
    next_values = np.stack([t.v[stage + 1] for t in next_value_tables])[:, None, :]  # (N, 1, S)

    def gradient(Q, idx):
        return ens.gradient(Q, np.log(Q), next_values[idx], idx)

    ref = None if reference is None else np.asarray(reference)[None]
    S = ens.gamma.shape[2]
    report = _run(ens.defaults, gradient, network, schedule, mode, stop, seed, ref, eps,
                  ens.gamma.mean(axis=0), S * S)
    report.policies = report.policies[:, 0]
    return report


def run_local_pipeline(units: Sequence[UnitProfile], costs: StageCosts, network: GossipNetwork,
                       schedule: StepSchedule | None = None, mode: str = "synchronous",
                       stop: ConsensusStop | None = None, seed: int | None = None,
                       references=None, eps: float = DEFAULT_INTERIOR_EPS):
    """Run local consensus stage by stage, backward from the last policy stage.

    Returns ``(policies, reports)`` where ``policies`` has shape
    ``(N, L-1, S, S)`` and ``reports[l]`` belongs to stage ``l``.
    """
    tables = [unit_value_table(u, costs) for u in units]
    L = costs.L
    reports: list = [None] * (L - 1)
    for stage in range(L - 2, -1, -1):
        ref = None if references is None else references[stage]
        stage_seed = None if seed is None else [seed, stage]
        reports[stage] = run_local_consensus(units, stage, tables, network, schedule, mode, stop,
                                             stage_seed, ref, eps)
    return np.stack([r.policies for r in reports], axis=1), reports
