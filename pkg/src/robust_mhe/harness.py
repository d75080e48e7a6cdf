"""Seeded Monte-Carlo checks of the estimator error bounds.

Every run derives its own random stream from ``(seed, run_id)``, tasks are
mapped in run order and results are aggregated by run id, so outputs do not
depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import horizon as hz
from . import kl_calculus as klc
from .errors import ConfigError, PreconditionError
from .estimator import FULL, CostSpec, EstimationProblem, SolverSettings, build_cost, run_mhe
from .system_model import (
    IossCertificate,
    check_pair,
    ioss_bounds,
    make_system,
    shipped_certificate,
    simulate,
    stream,
)

SAMPLING = ("mixed", "uniform", "corner")


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "contraction"
    system_params: dict = field(default_factory=dict)
    certificate: Optional[dict] = None
    cost: dict = field(default_factory=dict)
    horizons: tuple = ("auto",)
    n_runs: int = 200
    t_max: int = 30
    delta0: float = 0.5
    delta_w: float = 0.05
    delta_v: float = 0.05
    x0_range: float = 1.0
    sampling: str = "mixed"
    seed: int = 0
    solver: dict = field(default_factory=dict)
    validation: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        if self.n_runs < 1 or self.t_max < 1:
            raise ConfigError("n_runs and t_max must be >= 1")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        if min(self.delta0, self.delta_w, self.delta_v, self.x0_range) < 0:
            raise ConfigError("bounds must be nonnegative")
        for T in self.horizons:
            if T not in ("auto", FULL) and not (isinstance(T, int) and T >= 1):
                raise ConfigError(f"bad horizon {T!r}")
        unknown = set(self.validation) - {"pairs", "t_max", "x0_range"}
        if unknown:
            raise ConfigError(f"unknown validation keys {sorted(unknown)}")
        unknown = set(self.cost) - {"s_max", "rho_low"}
        if unknown:
            raise ConfigError(f"unknown cost keys {sorted(unknown)}")
        try:
            SolverSettings(**self.solver)
        except TypeError as exc:
            raise ConfigError(f"bad solver settings: {exc}") from exc

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "horizons" in data:
            data["horizons"] = tuple(data["horizons"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["horizons"] = list(self.horizons)
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})

    def digest(self) -> str:
        """Hash of everything that affects results (the worker count does not)."""
        data = self.to_dict()
        data.pop("jobs")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Context:
    model: object
    certificate: IossCertificate
    cost: CostSpec
    solver: SolverSettings

    @property
    def fie_beta(self) -> klc.MaxCombination:
        """``alpha(2s, tau) (+) rho_low(s, tau)``."""
        return klc.MaxCombination(((self.certificate.alpha.scaled(2.0), 0), (self.cost.rho_low, 0)))

    def fitted_constants(self):
        return hz.fitted_exp_constants(self.certificate.alpha, self.cost.rho_low)

    def auto_horizon(self) -> int:
        c, lam = self.fitted_constants()
        return hz.rges_min_horizon(c, lam)


def build_context(config: ExperimentConfig) -> Context:
    model = make_system(config.system, config.delta_w, config.delta_v, **config.system_params)
    if config.certificate is None:
        cert = shipped_certificate(config.system, **config.system_params)
    else:
        cert = IossCertificate.from_dict(config.certificate)
    s_max = float(config.cost.get("s_max", 1.0))
    if "rho_low" in config.cost:
        cost = CostSpec(klc.from_dict(config.cost["rho_low"]), cert, s_max)
    else:
        cost = build_cost(cert, s_max)
    return Context(model, cert, cost, SolverSettings(**config.solver))


@functools.lru_cache(maxsize=8)
def _cached_context(config_json: str) -> Context:
    return build_context(ExperimentConfig.from_dict(json.loads(config_json)))


def resolve_horizon(config: ExperimentConfig, ctx: Context, T=None):
    T = config.horizons[0] if T is None else T
    return ctx.auto_horizon() if T == "auto" else T


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass
class RunSample:
    run_id: int
    mode: str
    trajectory: object
    xbar0: np.ndarray

    def counterexample(self) -> dict:
        tr = self.trajectory
        return {
            "run_id": self.run_id,
            "sampling": self.mode,
            "x0": tr.x[0].tolist(),
            "xbar0": self.xbar0.tolist(),
            "w": tr.w.tolist(),
            "v": tr.v.tolist(),
        }


def sample_run(config: ExperimentConfig, model, run_id: int) -> RunSample:
    rng = stream(config.seed, run_id)
    mode = config.sampling
    if mode == "mixed":
        mode = "corner" if run_id % 2 else "uniform"
    n, t = model.n, config.t_max
    x0 = rng.uniform(-config.x0_range, config.x0_range, size=n)
    direction = rng.standard_normal(n)
    direction /= max(np.linalg.norm(direction), 1e-300)
    radius = config.delta0 if mode == "corner" else config.delta0 * rng.uniform()
    xbar0 = x0 + radius * direction
    if mode == "corner":
        w, v = model.W.sample_corner(rng, t), model.V.sample_corner(rng, t)
    else:
        w, v = model.W.sample_uniform(rng, t), model.V.sample_uniform(rng, t)
    traj = simulate(model, x0, np.reshape(w, (t, model.g)), np.reshape(v, (t, model.p)))
    return RunSample(run_id, mode, traj, xbar0)


# --------------------------------------------------------------------------
# bound checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheckResult:
    run_id: int
    t: int
    T: int
    err: float
    bound: float
    margin: float
    passed: bool

    CSV_HEADER = ("run_id", "t", "T", "err", "bound", "margin", "pass")

    def row(self):
        return [self.run_id, self.t, self.T, repr(self.err), repr(self.bound), repr(self.margin), int(self.passed)]


def check_slack(settings: SolverSettings) -> float:
    return 1e-10 + settings.tolerance


def _disturbance_norms(sample: RunSample):
    tr = sample.trajectory
    d0 = float(np.linalg.norm(tr.x[0] - sample.xbar0))
    return d0, np.linalg.norm(tr.w, axis=1), np.linalg.norm(tr.v, axis=1)


def fie_bounds(ctx: Context, sample: RunSample) -> np.ndarray:
    d0, w_norms, v_norms = _disturbance_norms(sample)
    return ioss_bounds(ctx.fie_beta, d0, w_norms, v_norms)


def mhe_bounds(ctx: Context, sample: RunSample, T: int) -> np.ndarray:
    c, lam = ctx.fitted_constants()
    maps = hz.rges_bound_functions(c, c, c, lam, T)
    d0, w_norms, v_norms = _disturbance_norms(sample)
    return np.array([maps.error_bound(d0, w_norms, v_norms, t) for t in range(sample.trajectory.length + 1)])


def _check_run(config_json: str, kind: str, horizons: tuple, run_id: int):
    """Bound checks of one run for each horizon; ``None`` means full information."""
    config = ExperimentConfig.from_dict(json.loads(config_json))
    ctx = _cached_context(config_json)
    sample = sample_run(config, ctx.model, run_id)
    slack = check_slack(ctx.solver)
    out = []
    for T in horizons:
        problem = EstimationProblem(ctx.model, ctx.certificate, ctx.cost, FULL if T is None else T, ctx.solver)
        trace = run_mhe(problem, sample.trajectory, sample.xbar0)
        errors = trace.errors
        bounds = fie_bounds(ctx, sample) if kind == "fie" else mhe_bounds(ctx, sample, T)
        rows = []
        for t, (e, b) in enumerate(zip(errors, bounds)):
            rows.append(BoundCheckResult(run_id, t, t if T is None else T, float(e), float(b), float(b - e), bool(e <= b + slack)))
        failed = next((r for r in rows if not r.passed), None)
        ce = None
        if failed is not None:
            ce = {**sample.counterexample(), "t": failed.t, "T": failed.T, "err": failed.err, "bound": failed.bound}
        out.append((rows, ce))
    return out


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


@dataclass
class ExperimentResult:
    kind: str
    config: ExperimentConfig
    results: list
    counterexamples: list
    T: Optional[int] = None

    @property
    def pass_rate(self) -> float:
        return sum(r.passed for r in self.results) / len(self.results) if self.results else 1.0

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst_margin(self) -> float:
        return min(r.margin for r in self.results) if self.results else math.inf

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "system": self.config.system,
            "T": self.T,
            "runs": self.config.n_runs,
            "checks": len(self.results),
            "failures": sum(not r.passed for r in self.results),
            "pass_rate": self.pass_rate,
            "worst_margin": self.worst_margin,
            "config_hash": self.config.digest(),
            "counterexample": self.counterexamples[0] if self.counterexamples else None,
        }

    def write_csv(self, path) -> None:
        write_checks_csv(self.results, path)

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_checks_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BoundCheckResult.CSV_HEADER)
        for r in results:
            writer.writerow(r.row())


def _run_checks(config: ExperimentConfig, kind: str, horizons: tuple, jobs: Optional[int], runs=None):
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    task = functools.partial(_check_run, config_json, kind, horizons)
    return _map(task, range(config.n_runs) if runs is None else runs, config.jobs if jobs is None else jobs)


def verify_fie_bound(config: ExperimentConfig, jobs: Optional[int] = None, runs=None) -> ExperimentResult:
    """Full-information estimates against ``max_i beta(|pi_i|, t - iota - 1)``.

    ``runs`` selects a subset of run ids; by default all ``n_runs`` are checked.
    """
    per_run = _run_checks(config, "fie", (None,), jobs, runs)
    results = [r for run in per_run for r in run[0][0]]
    ces = [run[0][1] for run in per_run if run[0][1] is not None]
    return ExperimentResult("fie", config, results, ces)


def verify_mhe_bound(config: ExperimentConfig, T=None, jobs: Optional[int] = None) -> ExperimentResult:
    """Moving-horizon estimates against the exponential bound maps for horizon ``T``."""
    ctx = build_context(config)
    if ctx.certificate.exp_form is None:
        raise PreconditionError("the moving-horizon bound needs an exponential certificate")
    T = resolve_horizon(config, ctx, T)
    if T == FULL:
        raise PreconditionError("use verify_fie_bound for full information")
    c, lam = ctx.fitted_constants()
    if T < hz.rges_min_horizon(c, lam):
        raise PreconditionError(f"horizon {T} is shorter than the exponential-stability horizon")
    per_run = _run_checks(config, "mhe", (T,), jobs)
    results = [r for run in per_run for r in run[0][0]]
    ces = [run[0][1] for run in per_run if run[0][1] is not None]
    return ExperimentResult("mhe", config, results, ces, T)


# --------------------------------------------------------------------------
# horizon sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    T: int
    worst_err: float
    mean_err: float
    bound_factor: float
    pass_rate: float

    CSV_HEADER = ("T", "worst_err", "mean_err", "bound_factor", "pass_rate")

    def row(self):
        return [self.T, repr(self.worst_err), repr(self.mean_err), repr(self.bound_factor), repr(self.pass_rate)]


@dataclass
class SweepResult:
    rows: list
    T_low: int
    eta: float
    lam: float
    monotonicity: hz.Monotonicity
    counterexamples: list

    @property
    def all_passed(self) -> bool:
        return all(r.pass_rate == 1.0 for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SweepRow.CSV_HEADER)
            for r in self.rows:
                writer.writerow(r.row())


def sweep_horizon(config: ExperimentConfig, horizons=None, jobs: Optional[int] = None) -> SweepResult:
    """MHE bound checks for each horizon; ``horizons`` defaults to ``T_low .. 4 T_low``."""
    ctx = build_context(config)
    c, lam = ctx.fitted_constants()
    T_low = hz.rges_min_horizon(c, lam)
    if horizons is None:
        listed = [T for T in config.horizons if T not in ("auto", FULL)]
        horizons = listed or list(range(T_low, 4 * T_low + 1))
    horizons = tuple(int(T) for T in horizons)
    if min(horizons) < T_low:
        raise PreconditionError(f"sweep horizons must be >= {T_low}")
    eta = c * lam**T_low
    phi = klc.ExpDecay(1.0, lam)
    per_run = _run_checks(config, "mhe", horizons, jobs)
    rows, ces = [], []
    for k, T in enumerate(horizons):
        checks = [r for run in per_run for r in run[k][0]]
        ces.extend(run[k][1] for run in per_run if run[k][1] is not None)
        errs = np.array([r.err for r in checks])
        rows.append(
            SweepRow(
                T,
                float(errs.max()),
                float(errs.mean()),
                hz.error_bound_factor(eta, phi, T, T_low, config.t_max),
                sum(r.passed for r in checks) / len(checks),
            )
        )
    mono = hz.monotonicity_condition("exp", lam, eta, T_low, min(horizons))
    return SweepResult(rows, T_low, eta, lam, mono, ces)


# --------------------------------------------------------------------------
# certificate validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairCheck:
    pair: int
    worst_t: int
    worst_margin: float
    passed: bool

    CSV_HEADER = ("pair", "worst_t", "worst_margin", "pass")

    def row(self):
        return [self.pair, self.worst_t, repr(self.worst_margin), int(self.passed)]


def _validate_pair(config_json: str, k: int):
    config = ExperimentConfig.from_dict(json.loads(config_json))
    ctx = _cached_context(config_json)
    v = config.validation
    report, ce = check_pair(ctx.model, ctx.certificate, k, v.get("t_max", 40), config.seed, v.get("x0_range", 2.0))
    return PairCheck(k, report.worst_t, report.worst_margin, report.holds), (None if report.holds else ce)


@dataclass
class ValidationResult:
    pairs: list
    counterexample: Optional[dict]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.pairs)

    @property
    def violations(self) -> int:
        return sum(not p.passed for p in self.pairs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PairCheck.CSV_HEADER)
            for p in self.pairs:
                writer.writerow(p.row())


def validate(config: ExperimentConfig, jobs: Optional[int] = None) -> ValidationResult:
    """Monte-Carlo validation of the configured certificate."""
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    task = functools.partial(_validate_pair, config_json)
    out = _map(task, range(config.validation.get("pairs", 1000)), config.jobs if jobs is None else jobs)
    ce = next((c for _, c in out if c is not None), None)
    return ValidationResult([p for p, _ in out], ce)
