"""Command line front end: ``dr-ensemble <subcommand>``.

Subcommands chain through files in an output directory::

    ingest     power CSV        -> model.json
    generate   model.json       -> ensemble.json
    solve      ensemble.json    -> policies_<scheme>.json   (closed forms)
    consensus  ensemble.json    -> policies_<scheme>.json + trace_<scheme>.csv
    simulate   policies + ens.  -> trajectories/<scheme>_rNN.csv
    compare    bundle dirs      -> summary.json
    run        config           -> all of the above

Exit codes: 0 success, 1 malformed input or usage, 2 consensus stopped at
``max_iter`` without converging (artifacts are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dr_ensemble.consensus import (
    TRACE_HEADER,
    ConsensusStop,
    StepSchedule,
    build_gossip_network,
    run_global_consensus,
    run_local_pipeline,
)
from dr_ensemble.core import InvalidArgumentError
from dr_ensemble.ingest import (
    EnsembleSpec,
    TariffSchedule,
    build_stage_costs,
    discretize_power,
    ensemble_from_dict,
    ensemble_to_dict,
    estimate_transition_matrix,
    generate_ensemble,
    read_json,
    read_power_csv,
    synthetic_power_series,
    write_json,
)
from dr_ensemble.simulator import (
    initial_joint_state,
    read_trajectory_csv,
    simulate_exact,
    write_trajectory_csv,
)
from dr_ensemble.solver import (
    StageCosts,
    backward_recursion_consensus,
    evaluate_policy_stack,
    local_policy_stack,
    prior_aggregates,
)

log = logging.getLogger("dr_ensemble")

SCHEMES = ("centralized", "global", "local", "trivial")
CLOSED_FORM = ("centralized", "local", "trivial")
DECENTRALIZED = ("global", "local")
MODES = {"sync": "synchronous", "async": "asynchronous"}
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


@dataclass
class ConsensusConfig:
    threshold: float = 0.01
    max_iter: int = 10_000
    schedule: str = "scaled-harmonic"
    a: float = 0.01
    b: float = 0.0
    mode: str = "synchronous"
    topology: str = "uniform"
    stationarity: float | None = None

    def __post_init__(self):
        self.mode = MODES.get(self.mode, self.mode)
        if self.mode not in MODES.values():
            raise InvalidArgumentError(f"unknown consensus mode {self.mode!r}")
        if not self.threshold > 0:
            raise InvalidArgumentError("consensus threshold must be positive")

    def stop(self) -> ConsensusStop:
        return ConsensusStop(self.threshold, self.max_iter, self.stationarity)

    def step_schedule(self) -> StepSchedule:
        if self.schedule == "harmonic":
            return StepSchedule()
        return StepSchedule(self.schedule, self.a, self.b)


@dataclass
class ExperimentConfig:
    """Everything needed to replay an experiment.

    ``power_csv`` may be omitted, in which case a synthetic office-building
    series is generated from the seed. Relative paths are resolved against
    the config file's directory.
    """

    S: int = 20
    L: int = 20
    N: int = 100
    seed: int | None = None
    schemes: list = field(default_factory=lambda: list(SCHEMES))
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    noise_magnitude: float = 0.05
    gamma_range: tuple = (16.0, 24.0)
    per_stage_gamma: bool = False
    tariff: dict = field(default_factory=lambda: {"rate_usd_per_kwh": 0.25, "stage_duration_h": 0.25})
    replicas: int = 20
    out_dir: str = "dr_out"
    power_csv: str | None = None
    synthetic_days: int = 100
    binning: str = "equal-width"
    smoothing: float = 1.0

    def __post_init__(self):
        if isinstance(self.consensus, dict):
            self.consensus = ConsensusConfig(**self.consensus)
        self.schemes = list(self.schemes)
        if not self.schemes:
            raise InvalidArgumentError("at least one scheme is required")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise InvalidArgumentError(f"unknown schemes {sorted(unknown)}")
        if self.replicas < 1:
            raise InvalidArgumentError("replicas must be at least 1")
        if self.S < 2 or self.L < 2 or self.N < 1:
            raise InvalidArgumentError("need S >= 2, L >= 2 and N >= 1")
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        TariffSchedule.from_dict(self.tariff)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidArgumentError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_dict(read_json(path))
        if cfg.power_csv is not None:
            cfg.power_csv = str((path.parent / cfg.power_csv).resolve())
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["gamma_range"] = list(self.gamma_range)
        return out


# -- helpers -------------------------------------------------------------------


def thread_count() -> int:
    """Worker cap from ``DR_ENSEMBLE_THREADS`` (default: all cores)."""
    raw = os.environ.get("DR_ENSEMBLE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"DR_ENSEMBLE_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise InvalidArgumentError("DR_ENSEMBLE_THREADS must be at least 1")
    return value


def draw_seed() -> int:
    return int(np.random.SeedSequence().entropy % 2**64)


def stationary_distribution(P) -> np.ndarray:
    """Stationary distribution of an interior chain (least squares on ``pi (P - I) = 0``, ``sum pi = 1``)."""
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    A = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def trivial_policy_stack(units, costs: StageCosts, x0, values) -> np.ndarray:
    """State-independent stack: at each stage every unit draws from one shared row.

    The row minimizes the ensemble-averaged stage objective with states
    weighted by the expected occupancy ``x_l`` (propagated forward under the
    stack itself) and the next stage priced by ``values``.
    """
    L, S = costs.L, costs.S
    stack = np.empty((L - 1, S, S))
    x = np.asarray(x0, dtype=float)
    for stage in range(L - 1):
        agg = prior_aggregates(units, stage)
        gamma = x @ agg.gamma_bar
        mu = x @ agg.mu_bar
        logits = (mu - values[stage + 1]) / gamma
        row = np.exp(logits - logits.max())
        stack[stage] = row / row.sum()
        x = stack[stage].T @ x
    return stack


def expected_cost(units, policies, costs: StageCosts, x0) -> float:
    """Ensemble-average expected cost of an event started from ``x0``."""
    policies = np.asarray(policies)
    per_unit = policies.ndim == 4
    total = 0.0
    for n, unit in enumerate(units):
        u = evaluate_policy_stack(unit, policies[n] if per_unit else policies, costs)
        total += float(np.asarray(x0) @ u[0])
    return total / len(units)


def write_policies(path, scheme: str, policies, extra=None) -> Path:
    policies = np.asarray(policies)
    data = {"scheme": scheme, "shared": policies.ndim == 3, "policies": policies.tolist()}
    data.update(extra or {})
    path = Path(path)
    path.write_text(json.dumps(data, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def read_policies(path) -> tuple[str, np.ndarray]:
    data = read_json(path)
    try:
        return data["scheme"], np.asarray(data["policies"], dtype=float)
    except KeyError as exc:
        raise InvalidArgumentError(f"{path}: missing key {exc}") from None


def load_ensemble(path):
    """Units, stage costs, initial distribution and recorded seed of an ``ensemble.json``."""
    data = read_json(path)
    units = ensemble_from_dict(data)
    for key in ("power_kw", "tariff", "initial"):
        if key not in data:
            raise InvalidArgumentError(f"{path}: missing key {key!r}")
    costs = build_stage_costs(data["power_kw"], TariffSchedule.from_dict(data["tariff"]), int(data["L"]))
    return units, costs, np.asarray(data["initial"], dtype=float), np.asarray(data["power_kw"]), data.get("seed")


# -- pipeline steps ------------------------------------------------------------


def build_model(cfg: ExperimentConfig, seed: int, power_csv=None) -> dict:
    source = power_csv or cfg.power_csv
    if source is not None:
        series = read_power_csv(source)
        label = Path(source).name
    else:
        series = synthetic_power_series(days=cfg.synthetic_days, seed=seed)
        label = f"synthetic(days={cfg.synthetic_days}, seed={seed})"
    states, power = discretize_power(series, cfg.S, cfg.binning)
    P = estimate_transition_matrix(states, cfg.S, cfg.smoothing)
    return {"S": cfg.S, "source": label, "binning": cfg.binning, "smoothing": cfg.smoothing,
            "power_kw": power.tolist(), "default": P.tolist(), "initial": stationary_distribution(P).tolist()}


def build_ensemble(model: dict, cfg: ExperimentConfig, seed: int) -> dict:
    spec = EnsembleSpec(cfg.N, cfg.noise_magnitude, cfg.gamma_range, seed, cfg.per_stage_gamma)
    units = generate_ensemble(np.asarray(model["default"]), spec, cfg.L)
    data = ensemble_to_dict(units)
    data.update(power_kw=model["power_kw"], tariff=TariffSchedule.from_dict(cfg.tariff).to_dict(),
                initial=model["initial"], seed=seed)
    return data


def solve_closed_form(scheme: str, units, costs, x0) -> np.ndarray:
    central, table = backward_recursion_consensus(units, costs)
    if scheme == "centralized":
        return central
    if scheme == "local":
        return local_policy_stack(units, costs)[0]
    if scheme == "trivial":
        return trivial_policy_stack(units, costs, x0, table.v)
    raise InvalidArgumentError(f"no closed form for scheme {scheme!r}")


def negotiate(scheme: str, units, costs, cc: ConsensusConfig, seed: int):
    """Run decentralized consensus; returns ``(policies, trace_rows, info)``."""
    if len(units) < 2:
        raise InvalidArgumentError("decentralized schemes need at least two units")
    network = build_gossip_network(len(units), cc.topology, seed=seed)
    if scheme == "global":
        reference = backward_recursion_consensus(units, costs)[0]
        report = run_global_consensus(units, costs, network, cc.step_schedule(), cc.mode, cc.stop(), seed,
                                      reference)
        rows = list(report.trace_rows())
        info = {"converged": report.converged, "iterations": report.iterations,
                "final_disagreement": report.final_disagreement, "final_error": report.final_error}
        return report.policies, rows, info
    if scheme == "local":
        reference = local_policy_stack(units, costs)[0]
        policies, reports = run_local_pipeline(units, costs, network, cc.step_schedule(), cc.mode, cc.stop(),
                                               seed, reference)
        # stages run backward; the trace concatenates them with a running round counter
        rows, offset = [], 0
        for report in reversed(reports):
            for k, d, e, a in report.trace_rows():
                rows.append((k + offset, d, e, a))
            offset += report.iterations
        info = {"converged": all(r.converged for r in reports), "iterations": offset,
                "final_disagreement": max(r.final_disagreement for r in reports),
                "final_error": max(r.final_error for r in reports),
                "stage_iterations": [r.iterations for r in reports]}
        return policies, rows, info
    raise InvalidArgumentError(f"scheme {scheme!r} is not decentralized")


def write_trace_rows(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    return path


def simulate_replicas(units, policies, costs, x0, power, seed: int, replicas: int):
    """Exact Monte Carlo replicas; replica ``r`` uses streams keyed by ``(seed, r)``."""
    N = len(units)

    def one(r):
        return simulate_exact(units, policies, initial_joint_state(x0, N, seed, r), costs, power, seed, r)

    workers = min(thread_count(), replicas)
    if workers == 1:
        return [one(r) for r in range(replicas)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(replicas)))


def write_trajectories(out_dir: Path, scheme: str, trajectories) -> list[Path]:
    folder = out_dir / "trajectories"
    folder.mkdir(parents=True, exist_ok=True)
    return [write_trajectory_csv(folder / f"{scheme}_r{r:02d}.csv", {scheme: t}) for r, t in enumerate(trajectories)]


def collect_trajectories(dirs) -> dict:
    """Replica-averaged mean power and mean total cost per scheme found under ``dirs``."""
    found: dict = {}
    for d in dirs:
        for path in sorted(Path(d).glob("trajectories/*_r*.csv")):
            for scheme, cols in read_trajectory_csv(path).items():
                found.setdefault(scheme, []).append(cols)
    if not found:
        raise InvalidArgumentError("no trajectory CSVs found")
    out = {}
    for scheme, runs in found.items():
        power = np.mean([c["mean_power_kw"] for c in runs], axis=0)
        totals = np.array([np.sum(c["realized_cost_usd"]) for c in runs])
        se = float(totals.std(ddof=1) / np.sqrt(totals.size)) if totals.size > 1 else 0.0
        out[scheme] = {"power": power, "cost": float(totals.mean()), "cost_se": se, "replicas": int(totals.size)}
    return out


def summarize(trajectories: dict, extra: dict | None = None) -> dict:
    """Per-scheme cost and power deviation from the centralized trajectory."""
    extra = extra or {}
    central = trajectories.get("centralized")
    schemes = {}
    for scheme in sorted(trajectories):
        t = trajectories[scheme]
        entry = {"realized_cost_usd": t["cost"], "realized_cost_se_usd": t["cost_se"], "replicas": t["replicas"],
                 "mean_power_kw": [float(p) for p in t["power"]]}
        if central is not None:
            diff = np.abs(t["power"] - central["power"])
            entry["max_power_deviation_kw"] = float(diff.max())
            entry["max_relative_power_deviation"] = float(np.max(diff / central["power"]))
        entry.update(extra.get(scheme, {}))
        schemes[scheme] = entry
    summary = {"schemes": schemes}
    if "global" in trajectories and "local" in trajectories:
        g, lo = trajectories["global"]["power"], trajectories["local"]["power"]
        summary["global_local_gap"] = {"max_relative_power_deviation": float(np.max(np.abs(g - lo) / g))}
    if central is not None and "trivial" in trajectories:
        summary["trivial_cost_not_below_centralized"] = trajectories["trivial"]["cost"] >= central["cost"]
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[dict, int]:
    """Full pipeline; writes the artifact bundle and returns ``(summary, exit_code)``."""
    seed = cfg.seed if cfg.seed is not None else draw_seed()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, seed)
    write_json(model, out / "model.json")
    ens = build_ensemble(model, cfg, seed)
    write_json(ens, out / "ensemble.json")
    units, costs, x0, power, _ = load_ensemble(out / "ensemble.json")

    stacks, info = {}, {}
    for scheme in cfg.schemes:
        if scheme in DECENTRALIZED:
            log.info("negotiating %s consensus", scheme)
            policies, rows, info[scheme] = negotiate(scheme, units, costs, cfg.consensus, seed)
            write_trace_rows(out / f"trace_{scheme}.csv", rows)
        else:
            policies = solve_closed_form(scheme, units, costs, x0)
            info[scheme] = {}
        write_policies(out / f"policies_{scheme}.json", scheme, policies)
        stacks[scheme] = policies

    trajectories = {}
    for scheme, policies in stacks.items():
        log.info("simulating %s", scheme)
        runs = simulate_replicas(units, policies, costs, x0, power, seed, cfg.replicas)
        write_trajectories(out, scheme, runs)
        trajectories[scheme] = {
            "power": np.mean([t.mean_power_kw for t in runs], axis=0),
            "cost": float(np.mean([t.total_cost_usd for t in runs])),
            "cost_se": float(np.std([t.total_cost_usd for t in runs], ddof=1) / np.sqrt(len(runs)))
            if len(runs) > 1 else 0.0,
            "replicas": len(runs),
        }
        info[scheme]["expected_cost_usd"] = expected_cost(units, policies, costs, x0)
        if "centralized" in stacks:
            info[scheme]["max_policy_deviation_from_centralized"] = float(
                np.max(np.abs(np.asarray(policies) - stacks["centralized"])))

    summary = summarize(trajectories, info)
    if "global" in stacks and "local" in stacks:
        summary["global_local_gap"]["max_policy_deviation"] = float(np.max(np.abs(stacks["global"] - stacks["local"])))
    converged = all(info[s].get("converged", True) for s in cfg.schemes)
    # the output location is left out so bundles written to different places stay identical
    recorded = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    summary.update(seed=seed, converged=converged, config=recorded | {"seed": seed})
    write_json(summary, out / "summary.json")
    return summary, EXIT_OK if converged else EXIT_NOT_CONVERGED


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="master seed (u64); drawn and recorded when omitted")
    p.add_argument("--out-dir", type=Path, help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dr-ensemble", description="Consensus control of demand-response load ensembles.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="power CSV -> Markov model JSON")
    p.add_argument("power_csv", nargs="?", type=Path, help="timestamp,power_kw CSV (synthetic if omitted)")
    _common(p)

    p = sub.add_parser("generate", help="model JSON -> heterogeneous ensemble JSON")
    p.add_argument("model", type=Path)
    _common(p)

    p = sub.add_parser("solve", help="closed-form policies")
    p.add_argument("ensemble", type=Path)
    p.add_argument("--scheme", choices=CLOSED_FORM, default="centralized")
    _common(p)

    p = sub.add_parser("consensus", help="decentralized gossip negotiation")
    p.add_argument("ensemble", type=Path)
    p.add_argument("--scheme", choices=DECENTRALIZED, default="global")
    p.add_argument("--mode", choices=sorted(MODES))
    _common(p)

    p = sub.add_parser("simulate", help="Monte Carlo trajectories of a policy file")
    p.add_argument("policies", type=Path)
    p.add_argument("ensemble", type=Path)
    _common(p)

    p = sub.add_parser("compare", help="summarize trajectories of one or more bundles")
    p.add_argument("bundles", nargs="+", type=Path)
    _common(p)

    p = sub.add_parser("run", help="full experiment")
    p.add_argument("--scheme", action="append", choices=SCHEMES, help="repeat to select several")
    p.add_argument("--mode", choices=sorted(MODES))
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "mode", None):
        cfg.consensus.mode = MODES[args.mode]
    if args.command == "run" and args.scheme:
        cfg.schemes = list(dict.fromkeys(args.scheme))
    if args.out_dir is not None:
        cfg.out_dir = str(args.out_dir)
    return cfg


def _seed(args, cfg, recorded=None) -> int:
    for candidate in (args.seed, cfg.seed, recorded):
        if candidate is not None:
            return int(candidate)
    return draw_seed()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (InvalidArgumentError, ValueError, KeyError, OSError) as exc:
        print(f"dr-ensemble {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def _dispatch(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "run":
        if args.seed is not None:
            cfg.seed = args.seed
        summary, code = run_experiment(cfg, out)
        print(json.dumps({"out_dir": str(out), "seed": summary["seed"], "converged": summary["converged"]}))
        return code

    if cmd == "ingest":
        seed = _seed(args, cfg)
        path = write_json(build_model(cfg, seed, args.power_csv), out / "model.json")
    elif cmd == "generate":
        model = read_json(args.model)
        cfg.S = int(model["S"])
        path = write_json(build_ensemble(model, cfg, _seed(args, cfg)), out / "ensemble.json")
    elif cmd == "solve":
        units, costs, x0, _, _ = load_ensemble(args.ensemble)
        path = write_policies(out / f"policies_{args.scheme}.json", args.scheme,
                              solve_closed_form(args.scheme, units, costs, x0))
    elif cmd == "consensus":
        units, costs, _, _, recorded = load_ensemble(args.ensemble)
        seed = _seed(args, cfg, recorded)
        policies, rows, info = negotiate(args.scheme, units, costs, cfg.consensus, seed)
        write_trace_rows(out / f"trace_{args.scheme}.csv", rows)
        path = write_policies(out / f"policies_{args.scheme}.json", args.scheme, policies, {"consensus": info})
        print(path)
        return EXIT_OK if info["converged"] else EXIT_NOT_CONVERGED
    elif cmd == "simulate":
        scheme, policies = read_policies(args.policies)
        units, costs, x0, power, recorded = load_ensemble(args.ensemble)
        seed = _seed(args, cfg, recorded)
        runs = simulate_replicas(units, policies, costs, x0, power, seed, cfg.replicas)
        path = write_trajectories(out, scheme, runs)[0].parent
    elif cmd == "compare":
        path = write_json(summarize(collect_trajectories(args.bundles)), out / "summary.json")
    else:  # pragma: no cover - argparse rejects unknown commands
        raise InvalidArgumentError(f"unknown command {cmd!r}")
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
