"""From metered power to a heterogeneous ensemble and stage costs.

Pipeline: a power time series is binned into ``S`` power levels, the binned
sequence gives a Laplace-smoothed default transition matrix, each synthetic
unit perturbs that matrix with uniform noise and draws its discomfort
prices, and a tariff turns state power into dollar stage costs.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from dr_ensemble.core import DEFAULT_INTERIOR_EPS, InvalidArgumentError, project_to_interior_simplex
from dr_ensemble.solver import StageCosts, UnitProfile

DEFAULT_STAGE_HOURS = 0.25


class DegenerateBinsError(ValueError):
    pass


@dataclass
class PowerSeries:
    timestamps: list
    power_kw: np.ndarray

    def __post_init__(self):
        self.power_kw = np.asarray(self.power_kw, dtype=float)
        if len(self.timestamps) != self.power_kw.size:
            raise InvalidArgumentError("timestamps and power readings differ in length")
        if np.any(self.power_kw < 0) or not np.all(np.isfinite(self.power_kw)):
            raise InvalidArgumentError("power readings must be finite and non-negative")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise InvalidArgumentError("timestamps must be strictly increasing")

    def __len__(self):
        return self.power_kw.size


def read_power_csv(path) -> PowerSeries:
    """Read a ``timestamp,power_kw`` CSV with ISO-8601 timestamps."""
    stamps, power = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "power_kw"} <= set(reader.fieldnames):
            raise InvalidArgumentError(f"{path}: expected header 'timestamp,power_kw'")
        for row in reader:
            stamps.append(datetime.fromisoformat(row["timestamp"].strip()))
            power.append(float(row["power_kw"]))
    return PowerSeries(stamps, np.array(power))


def write_power_csv(series: PowerSeries, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "power_kw"])
        for t, p in zip(series.timestamps, series.power_kw):
            writer.writerow([t.isoformat(), repr(float(p))])
    return path


def synthetic_power_series(days: int = 100, step_minutes: int = 15, seed: int = 0,
                           start: datetime = datetime(2018, 6, 15)) -> PowerSeries:
    """Summer load of a cooling-dominated commercial building.

    Stand-in for metered data: a base load, an afternoon cooling bump scaled
    by a random daily heat factor, and AR(1) noise.
    """
    rng = np.random.default_rng(seed)
    per_day = 24 * 60 // step_minutes
    n = days * per_day
    hours = (np.arange(n) % per_day) * step_minutes / 60.0
    heat = np.repeat(rng.uniform(0.6, 1.4, size=days), per_day)
    occupancy = 1.0 / (1.0 + np.exp(-(hours - 8.0) * 1.5)) - 1.0 / (1.0 + np.exp(-(hours - 19.0) * 1.5))
    cooling = 220.0 * heat * np.exp(-0.5 * ((hours - 14.5) / 3.5) ** 2)
    noise = np.empty(n)
    noise[0] = 0.0
    shocks = rng.normal(0.0, 12.0, size=n)
    for k in range(1, n):
        noise[k] = 0.85 * noise[k - 1] + shocks[k]
    power = np.maximum(180.0 + 160.0 * occupancy + cooling + noise, 0.0)
    stamps = [start + timedelta(minutes=step_minutes * k) for k in range(n)]
    return PowerSeries(stamps, power)


def discretize_power(series, S: int, binning: str = "equal-width"):
    """Map readings to states ``0..S-1`` by power level.

    Returns ``(states, power_map)``: the integer state sequence and each
    state's representative power in kW (bin center for equal-width bins, bin
    median for quantile bins).
    """
    power = series.power_kw if isinstance(series, PowerSeries) else np.asarray(series, dtype=float)
    if power.size < 2:
        raise InvalidArgumentError("need at least two readings")
    if S < 2:
        raise InvalidArgumentError("need at least two states")
    lo, hi = float(power.min()), float(power.max())
    if binning == "equal-width":
        if hi <= lo:
            raise DegenerateBinsError("constant series cannot be split into equal-width bins")
        edges = np.linspace(lo, hi, S + 1)
        states = np.clip(np.searchsorted(edges, power, side="right") - 1, 0, S - 1)
        return states, 0.5 * (edges[:-1] + edges[1:])
    if binning == "quantile":
        edges = np.quantile(power, np.linspace(0.0, 1.0, S + 1))
        states = np.clip(np.searchsorted(edges, power, side="right") - 1, 0, S - 1)
        power_map = 0.5 * (edges[:-1] + edges[1:])
        for s in range(S):
            members = power[states == s]
            if members.size:
                power_map[s] = np.median(members)
        return states, power_map
    raise InvalidArgumentError(f"unknown binning {binning!r}")


def estimate_transition_matrix(states, S: int, smoothing: float = 1.0) -> np.ndarray:
    """Laplace-smoothed maximum-likelihood transition matrix."""
    if not smoothing > 0:
        raise InvalidArgumentError("smoothing must be positive to keep probabilities interior")
    states = np.asarray(states, dtype=int)
    counts = np.zeros((S, S))
    np.add.at(counts, (states[:-1], states[1:]), 1.0)
    counts += smoothing
    return counts / counts.sum(axis=1, keepdims=True)


def perturb_default(base, noise_magnitude: float, seed=None, eps: float = DEFAULT_INTERIOR_EPS) -> np.ndarray:
    """Add ``U[0, noise_magnitude]`` to every entry and project rows back to the interior simplex."""
    base = np.asarray(base, dtype=float)
    if not 0 <= noise_magnitude < 1:
        raise InvalidArgumentError("noise magnitude must lie in [0, 1)")
    if noise_magnitude == 0:
        return base.copy()
    rng = np.random.default_rng(seed)
    return project_to_interior_simplex(base + rng.uniform(0.0, noise_magnitude, size=base.shape), eps)


@dataclass
class EnsembleSpec:
    N: int = 100
    noise_magnitude: float = 0.05
    gamma_range: tuple = (16.0, 24.0)
    seed: int = 0
    per_stage_gamma: bool = False

    def __post_init__(self):
        lo, hi = self.gamma_range
        if self.N < 1:
            raise InvalidArgumentError("ensemble needs at least one unit")
        if not 0 <= self.noise_magnitude < 1:
            raise InvalidArgumentError("noise magnitude must lie in [0, 1)")
        if not 0 < lo <= hi:
            raise InvalidArgumentError("gamma range must satisfy 0 < lo <= hi")
        self.gamma_range = (float(lo), float(hi))


def generate_ensemble(base, spec: EnsembleSpec, L: int) -> list[UnitProfile]:
    """Heterogeneous units from one base matrix.

    Each unit perturbs ``base`` once and reuses it at every stage. Discomfort
    is drawn per (unit, state), or per (unit, stage, state) when
    ``spec.per_stage_gamma`` is set.
    """
    base = np.asarray(base, dtype=float)
    S = base.shape[0]
    lo, hi = spec.gamma_range
    units = []
    for n, child in enumerate(np.random.SeedSequence(spec.seed).spawn(spec.N)):
        rng = np.random.default_rng(child)
        default = perturb_default(base, spec.noise_magnitude, rng)
        if spec.per_stage_gamma:
            gamma = rng.uniform(lo, hi, size=(L - 1, S))
        else:
            gamma = np.repeat(rng.uniform(lo, hi, size=S)[None], L - 1, axis=0)
        units.append(UnitProfile(n, np.repeat(default[None], L - 1, axis=0), gamma))
    return units


@dataclass
class TariffSchedule:
    rate_usd_per_kwh: float | Sequence[float]
    stage_duration_h: float = DEFAULT_STAGE_HOURS

    def __post_init__(self):
        rates = np.atleast_1d(np.asarray(self.rate_usd_per_kwh, dtype=float))
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise InvalidArgumentError("tariff rates must be finite and non-negative")
        if not self.stage_duration_h > 0:
            raise InvalidArgumentError("stage duration must be positive")

    def rates(self, L: int) -> np.ndarray:
        rates = np.atleast_1d(np.asarray(self.rate_usd_per_kwh, dtype=float))
        if rates.size == 1:
            return np.full(L, rates[0])
        if rates.size != L:
            raise InvalidArgumentError(f"tariff lists {rates.size} rates for {L} stages")
        return rates

    def to_dict(self) -> dict:
        rate = self.rate_usd_per_kwh
        rate = float(rate) if np.ndim(rate) == 0 else [float(r) for r in rate]
        return {"rate_usd_per_kwh": rate, "stage_duration_h": float(self.stage_duration_h)}

    @classmethod
    def from_dict(cls, data: dict) -> "TariffSchedule":
        return cls(data["rate_usd_per_kwh"], float(data.get("stage_duration_h", DEFAULT_STAGE_HOURS)))


def build_stage_costs(power_map, tariff: TariffSchedule, L: int) -> StageCosts:
    """``q[l, i] = power_i * rate_l * stage_duration``."""
    power_map = np.asarray(power_map, dtype=float)
    if np.any(power_map < 0) or not np.all(np.isfinite(power_map)):
        raise InvalidArgumentError("state power must be finite and non-negative")
    return StageCosts(np.outer(tariff.rates(L), power_map) * tariff.stage_duration_h)


# -- file formats --------------------------------------------------------------


def ensemble_to_dict(units: Sequence[UnitProfile]) -> dict:
    def default_payload(u):
        d = u.defaults
        if np.all(d == d[0]):
            return d[0].tolist()
        return d.tolist()

    return {
        "S": units[0].S,
        "L": units[0].policy_stages + 1,
        "units": [{"id": int(u.id), "default": default_payload(u), "gamma": u.gamma.tolist()} for u in units],
    }


def ensemble_from_dict(data: dict) -> list[UnitProfile]:
    S, L = int(data["S"]), int(data["L"])
    units = []
    for entry in data["units"]:
        default = np.asarray(entry["default"], dtype=float)
        if default.ndim == 2:
            default = np.repeat(default[None], L - 1, axis=0)
        gamma = np.asarray(entry["gamma"], dtype=float)
        if gamma.ndim == 1:
            gamma = np.repeat(gamma[None], L - 1, axis=0)
        unit = UnitProfile(int(entry["id"]), default, gamma)
        if unit.S != S or unit.policy_stages != L - 1:
            raise InvalidArgumentError(f"unit {unit.id} does not match S={S}, L={L}")
        units.append(unit)
    return units


def write_json(data, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
