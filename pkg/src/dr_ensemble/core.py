"""Numeric primitives shared across the package.

Simplex projections, KL divergence, a max-shifted log-sum-exp and a
diagnostic check for row-stochastic matrices. Everything here is pure and
operates along the last axis so that stacks of policy rows can be handled
in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_INTERIOR_EPS = 1e-9


class InvalidArgumentError(ValueError):
    """Raised when an input violates an operation's precondition."""


class DivergenceUndefinedError(ValueError):
    """Raised when KL(p || q) is infinite because q_j = 0 < p_j."""


@dataclass(frozen=True)
class Tolerance:
    abs: float = 1e-9
    rel: float = 1e-9

    def __post_init__(self):
        if not (self.abs > 0 and self.rel > 0):
            raise InvalidArgumentError("tolerances must be positive")


def _as_finite(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise InvalidArgumentError("expected a nonempty vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("input contains non-finite entries")
    return arr


def _simplex_projection(v: np.ndarray, mass: float) -> np.ndarray:
    # sort-based exact projection onto {x >= 0, sum x = mass}, row-wise;
    # the threshold is max_k (sum of k largest - mass) / k
    css = np.cumsum(np.sort(v, axis=-1)[..., ::-1], axis=-1)
    css -= mass
    css /= np.arange(1, v.shape[-1] + 1, dtype=float)
    out = v - np.max(css, axis=-1, keepdims=True)
    return np.maximum(out, 0.0, out=out)


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Parameters
    ----------
    v : array_like
        A vector, or an array whose last axis holds the vectors to project.

    Returns
    -------
    ndarray
        The nearest point(s) of the simplex, same shape as ``v``.
    """
    return _simplex_projection(_as_finite(v), 1.0)


def project_to_interior_simplex(v, eps: float = DEFAULT_INTERIOR_EPS) -> np.ndarray:
    """Euclidean projection onto ``{x : x_j >= eps, sum x = 1}``.

    Points already in that set are returned unchanged, so policies that are
    strictly interior are fixed points while boundary projections keep every
    entry at least ``eps`` (KL gradients stay finite).
    """
    arr = _as_finite(v)
    size = arr.shape[-1]
    if not (0.0 < eps < 1.0 / size):
        raise InvalidArgumentError(f"eps must lie in (0, 1/S) = (0, {1.0 / size})")
    return _simplex_projection(arr - eps, 1.0 - size * eps) + eps


def kkt_residual(P, g) -> float:
    """Stationarity residual ``max_ij p_ij |g_ij - sum_k p_ik g_ik|`` of row-stochastic ``P``.

    ``g`` is the gradient of a KL-regularized objective at ``P``. The residual
    vanishes at an interior stationary point; weighting by ``p`` keeps
    near-zero entries from dominating, so it reads roughly as ``gamma * |dp|``.
    """
    P = np.asarray(P, dtype=float)
    g = np.asarray(g, dtype=float)
    lam = np.sum(P * g, axis=-1, keepdims=True)
    return float(np.max(P * np.abs(g - lam)))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with the convention 0 ln 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DivergenceUndefinedError("q vanishes where p is positive")
    ps = p[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(q[support]))), 0.0))


def log_sum_exp(values, axis: int = -1):
    """Max-shifted ``ln sum exp(values)`` along ``axis``.

    Returns a float for 1-D input and an array otherwise.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise InvalidArgumentError("log_sum_exp of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("log_sum_exp requires finite values")
    shift = np.max(arr, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(arr - shift), axis=axis)) + np.squeeze(shift, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax_rows(logits) -> np.ndarray:
    """Row-wise normalized exponentials, max-shifted."""
    z = np.asarray(logits, dtype=float)
    w = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return w / np.sum(w, axis=-1, keepdims=True)


@dataclass
class StochasticityReport:
    ok: bool
    row_sum_deviation: np.ndarray
    negative_entries: list = field(default_factory=list)
    boundary_entries: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate_stochastic(
    M,
    tol: Tolerance | None = None,
    interior: bool = False,
    eps: float = DEFAULT_INTERIOR_EPS,
) -> StochasticityReport:
    """Check that ``M`` is square and row-stochastic.

    Never raises on bad numbers; problems are collected in the report. With
    ``interior=True`` every entry must also lie strictly inside ``(eps, 1-eps)``
    (entries equal to ``eps`` are accepted, matching the interior projection).
    """
    tol = tol or Tolerance()
    M = np.asarray(M, dtype=float)
    messages = []
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return StochasticityReport(
            False, np.array([]), messages=[f"expected a square matrix, got shape {M.shape}"]
        )
    dev = M.sum(axis=1) - 1.0
    bad_rows = np.flatnonzero(np.abs(dev) > tol.abs + tol.rel)
    for i in bad_rows:
        messages.append(f"row {i} sums to {1.0 + dev[i]:.12g}")
    negative = [tuple(int(k) for k in ij) for ij in np.argwhere(M < -tol.abs)]
    for ij in negative:
        messages.append(f"negative entry at {ij}: {M[ij]:.3g}")
    nonfinite = ~np.isfinite(M)
    if np.any(nonfinite):
        messages.append("non-finite entries present")
    boundary = []
    if interior:
        lo = eps * (1.0 - 1e-6)
        mask = (M < lo) | (M > 1.0 - lo)
        boundary = [tuple(int(k) for k in ij) for ij in np.argwhere(mask)]
        for ij in boundary:
            messages.append(f"boundary entry at {ij}: {M[ij]:.3g}")
    ok = not (len(bad_rows) or negative or boundary or np.any(nonfinite))
    return StochasticityReport(ok, dev, negative, boundary, messages)
