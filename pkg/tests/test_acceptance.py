"""Acceptance criteria 1-11, each run at its stated tolerance.

Every test prints one ``criterion N: PASS/FAIL`` line; the lines are also
collected in the terminal summary.  Criteria 3, 4, 6 and 11 run the full
Monte-Carlo experiments and take tens of minutes on one core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from robust_mhe import horizon as hz
from robust_mhe import kl_calculus as klc
from robust_mhe.cli import main
from robust_mhe.estimator import EstimationProblem, run_fie, run_mhe, solve_window
from robust_mhe.harness import (
    ExperimentConfig,
    build_context,
    resolve_horizon,
    sample_run,
    validate,
    verify_fie_bound,
    verify_mhe_bound,
)
from robust_mhe.system_model import simulate, stream

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SYSTEMS = {"contraction": "contraction.json", "sin-contraction": "sin_contraction.json", "rotation-contraction": "rotation_contraction.json"}


def load(name: str) -> ExperimentConfig:
    return ExperimentConfig.load(CONFIGS / name)


def random_instances(n=50, seed=2024):
    """Seeded ExpPower/FracPower instances with (eta, s_low, s_high)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        a = rng.uniform(1.0, 2.0)
        if k % 2:
            c, b = rng.uniform(0.3, 3.0), rng.uniform(0.5, 2.0)
            fn = klc.FracPower(c, a, b)
            formula = lambda s, t, c=c, a=a, b=b: c * s**a * (t + 1.0) ** (-b)
        else:
            c, lam = rng.uniform(0.3, 5.0), rng.uniform(0.3, 0.9)
            fn = klc.ExpPower(c, a, lam)
            formula = lambda s, t, c=c, a=a, lam=lam: c * s**a * lam**t
        eta, s_high = rng.uniform(0.2, 0.9), rng.uniform(0.5, 2.0)
        s_low = 0.0 if rng.uniform() < 0.5 else rng.uniform(0.0, s_high / 2)
        out.append((fn, formula, eta, s_low, s_high))
    return out


def scan_tau(formula, eta, s_low, s_high):
    s = np.unique(np.concatenate([np.linspace(s_low, s_high, 10_000), [s_low, s_high]]))
    for tau in range(100_000):
        if np.all(formula(s, tau) <= eta * s):
            return tau
    raise AssertionError("scan did not terminate")


# --------------------------------------------------------------------------
# shared Monte-Carlo runs (jobs = 1); criterion 11 repeats them with jobs = 8
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def validations(outdir):
    out, start = {}, time.perf_counter()
    for name, file in SYSTEMS.items():
        res = validate(load(file), jobs=1)
        res.write_csv(outdir / f"validation_{name}_j1.csv")
        out[name] = res
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def fie_results(outdir):
    out, start = {}, time.perf_counter()
    for name, file in SYSTEMS.items():
        res = verify_fie_bound(load(file), jobs=1)
        res.write_csv(outdir / f"fie_{name}_j1.csv")
        out[name] = res
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def mhe_results(outdir):
    out = {}
    for name, file in SYSTEMS.items():
        res = verify_mhe_bound(load(file), jobs=1)
        res.write_csv(outdir / f"mhe_{name}_j1.csv")
        out[name] = res
    return out


def equivalence_traces(config: ExperimentConfig, runs=range(20)):
    """(MHE, FIE) estimates for t <= T on seeded runs."""
    ctx = build_context(config)
    T = resolve_horizon(config, ctx)
    pairs = []
    for run in runs:
        sample = sample_run(config, ctx.model, run)
        tr = sample.trajectory
        mhe = run_mhe(EstimationProblem(ctx.model, ctx.certificate, ctx.cost, T, ctx.solver), tr, sample.xbar0)
        k = min(T, tr.length)
        short = simulate(ctx.model, tr.x[0], tr.w[:k], tr.v[:k])
        fie = run_fie(EstimationProblem(ctx.model, ctx.certificate, ctx.cost, "full", ctx.solver), short, sample.xbar0)
        pairs.append((mhe.xhat[: k + 1], fie.xhat))
    return T, pairs


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------


def test_criterion_01_tau_min_oracle(report_criterion):
    instances = random_instances()
    elapsed, mismatches = 0.0, []
    for k, (fn, formula, eta, s_low, s_high) in enumerate(instances):
        start = time.perf_counter()
        got = klc.tau_min(fn, eta, s_low, s_high)
        elapsed += time.perf_counter() - start
        want = scan_tau(formula, eta, s_low, s_high)
        if got != want:
            mismatches.append((k, got, want))
    passed = not mismatches and elapsed < 5.0
    report_criterion(1, passed, f"{len(instances)} instances, {len(mismatches)} mismatches, tau_min time {elapsed:.3f}s")
    assert passed, mismatches


def test_criterion_02_contraction_inequality(report_criterion):
    worst = -math.inf
    for fn, formula, eta, s_low, s_high in random_instances():
        tau = klc.tau_min(fn, eta, s_low, s_high)
        s = np.linspace(0.0, s_high, 10_000)
        excess = formula(s, tau) - eta * np.maximum(s, s_low)
        worst = max(worst, float(excess.max()))
    passed = worst <= 1e-12
    report_criterion(2, passed, f"max of beta(s, tau_min) - eta*(s (+) s_low) = {worst:.3g}")
    assert passed


def test_criterion_03_certificate_validation(validations, report_criterion):
    results, elapsed = validations
    counts = {name: (len(r.pairs), r.violations) for name, r in results.items()}
    passed = all(n == 1000 and v == 0 for n, v in counts.values()) and elapsed < 30.0
    report_criterion(3, passed, f"pairs/violations {counts}, {elapsed:.1f}s")
    assert passed


def test_criterion_04_fie_bound(fie_results, report_criterion):
    results, elapsed = fie_results
    rates = {name: r.pass_rate for name, r in results.items()}
    runs = {name: r.config.n_runs for name, r in results.items()}
    passed = all(r.all_passed for r in results.values()) and all(n == 200 for n in runs.values()) and elapsed < 600
    worst = {name: f"{r.worst_margin:.3g}" for name, r in results.items()}
    report_criterion(4, passed, f"pass rates {rates}, worst margins {worst}, {elapsed:.0f}s")
    assert passed


def test_criterion_05_mhe_equals_fie(report_criterion):
    worst, T_used = 0.0, {}
    for name in ("contraction", "sin-contraction"):
        T, pairs = equivalence_traces(load(SYSTEMS[name]))
        T_used[name] = T
        for mhe, fie in pairs:
            worst = max(worst, float(np.max(np.abs(mhe - fie))))
    passed = worst <= 1e-10
    report_criterion(5, passed, f"20 runs per system with T {T_used}, max |MHE - FIE| for t <= T = {worst:.3g}")
    assert passed


def test_criterion_06_mhe_rges_bound(mhe_results, report_criterion, tmp_path):
    rates = {name: (r.T, r.pass_rate) for name, r in mhe_results.items()}
    all_pass = all(r.all_passed for r in mhe_results.values())
    # the CLI reports violations with exit code 2: rerun the first runs of the
    # falsified configuration up to its first violation
    falsified = load("rotation_contraction_falsified.json")
    first = first_violation(falsified)
    cfg = tmp_path / "falsified.json"
    cfg.write_text(json.dumps(falsified.replace(n_runs=first + 1).to_dict()))
    code = main(["verify", "--config", str(cfg), "--out", str(tmp_path / "out"), "--skip-validation"])
    passed = all_pass and code == 2
    report_criterion(6, passed, f"(T, pass rate) {rates}; verify exit code on a violating config {code}")
    assert passed


_FIRST = {}


def first_violation(config: ExperimentConfig, limit: int = 200):
    """Index of the first run of ``config`` with an FIE bound violation, or None."""
    key = config.digest()
    if key not in _FIRST:
        _FIRST[key] = None
        for run in range(min(limit, config.n_runs)):
            if not verify_fie_bound(config, jobs=1, runs=[run]).all_passed:
                _FIRST[key] = run
                break
    return _FIRST[key]


def test_criterion_07_horizon_formulas(report_criterion):
    # independent evaluations: log_0.5(1/2) = 1 -> 2; log_0.5(0.25) = 2; (2/0.5)^1 - 1 = 3
    checks = {
        "rges(2, 0.5)": (hz.rges_min_horizon(2, 0.5), math.floor(math.log(1 / 2) / math.log(0.5)) + 1),
        "exp(2,1,0.5)": (hz.closed_form_horizon("exp", 2, 1, 0.5, 0.5, 1), math.ceil(math.log(0.5 / 2) / math.log(0.5))),
        "frac(2,1,1)": (hz.closed_form_horizon("frac", 2, 1, 1, 0.5, 1), math.ceil((2 / 0.5) ** 1 - 1)),
    }
    expected = {"rges(2, 0.5)": 2, "exp(2,1,0.5)": 2, "frac(2,1,1)": 3}
    exact = all(got == oracle == expected[k] for k, (got, oracle) in checks.items())
    rng = np.random.default_rng(77)
    gaps = []
    for k in range(50):
        family = "exp" if k % 2 == 0 else "frac"
        c, a, eta, s_bar = rng.uniform(0.3, 4), rng.uniform(1, 2), rng.uniform(0.2, 0.9), rng.uniform(0.5, 2)
        b = rng.uniform(0.2, 0.95) if family == "exp" else rng.uniform(0.5, 2.0)
        beta = klc.ExpPower(c, a, b) if family == "exp" else klc.FracPower(c, a, b)
        gaps.append(abs(hz.closed_form_horizon(family, c, a, b, eta, s_bar) - hz.ras_min_horizon(beta, eta, 0.0, s_bar)))
    passed = exact and max(gaps) <= 1
    report_criterion(7, passed, f"examples {dict((k, v[0]) for k, v in checks.items())}, max closed-form gap {max(gaps)} on 50 instances")
    assert passed


def test_criterion_08_bound_factor_monotonicity(report_criterion):
    eta, b1, T_low, t = 0.5, 0.5, 2, 100
    phi = klc.ExpDecay(1.0, b1)
    horizons = range(2, 9)
    factors = [hz.error_bound_factor(eta, phi, T, T_low, t) for T in horizons]
    direct = [(eta * b1 ** (T - T_low)) ** (t // T) for T in horizons]
    consistent = factors == direct
    strictly = all(b < a for a, b in zip(factors, factors[1:]))
    mono = hz.monotonicity_condition("exp", b1, eta, T_low)
    passed = strictly and mono.decreasing and consistent
    shown = ", ".join(f"T={T}: 2^-{round(-math.log2(f))}" for T, f in zip(horizons, factors))
    report_criterion(8, passed, f"strictly decreasing {strictly} ({shown}); condition decreasing {mono.decreasing}; consistent {consistent}")
    assert passed


def grid_window_minimum(name, y, prior, c, lam, points=1_000_000):
    """Exhaustive grid over (chi0, w_0..w_{L-1}) of the max-form cost; independent of the solver."""
    L = len(y)
    per_dim = int(math.floor(points ** (1.0 / (L + 1)) + 1e-9))
    step = (lambda x: 0.5 * x) if name == "contraction" else (lambda x: 0.5 * np.sin(x))
    # |nu_0| <= 0.05 forces chi0 into [y0 - 0.05, y0 + 0.05]
    axes = [np.linspace(y[0] - 0.05, y[0] + 0.05, per_dim)] + [np.linspace(-0.05, 0.05, per_dim)] * L
    mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
    chi, w = mesh[0], mesh[1:]
    value = c * np.abs(chi - prior) * lam**L
    feasible = True
    for k in range(L):
        nu = y[k] - chi
        feasible = feasible & (np.abs(nu) <= 0.05)
        lag = L - k - 1
        value = np.maximum(value, np.maximum(c * np.abs(w[k]), c * np.abs(nu)) * lam**lag)
        chi = step(chi) + w[k]
    return float(np.min(np.where(feasible, value, np.inf)))


def test_criterion_09_solver_soundness(report_criterion):
    worst, rows = -math.inf, []
    for k in range(25):
        name = "contraction" if k % 2 == 0 else "sin-contraction"
        config = load(SYSTEMS[name])
        ctx = build_context(config)
        L = 1 + k % 3
        rng = stream(1234, k)
        x0 = rng.uniform(-1, 1, 1)
        w = ctx.model.W.sample_corner(rng, L) if k % 4 == 1 else ctx.model.W.sample_uniform(rng, L)
        v = ctx.model.V.sample_corner(rng, L) if k % 4 == 3 else ctx.model.V.sample_uniform(rng, L)
        tr = simulate(ctx.model, x0, np.reshape(w, (L, 1)), np.reshape(v, (L, 1)))
        prior = x0 + rng.uniform(-0.5, 0.5, 1)
        sol = solve_window(EstimationProblem(ctx.model, ctx.certificate, ctx.cost, L, ctx.solver), tr.y, prior)
        grid = grid_window_minimum(name, tr.y[:, 0], prior[0], ctx.cost.rho_low.c, ctx.cost.rho_low.lam)
        rows.append((k, sol.cost, grid))
        worst = max(worst, sol.cost - grid)
    passed = worst <= 1e-4
    report_criterion(9, passed, f"25 windows, max (solver - grid minimum) = {worst:.3g}")
    assert passed, rows


def test_criterion_10_negative_control(report_criterion):
    falsified = load("rotation_contraction_falsified.json")
    first = first_violation(falsified)
    passed = first is not None
    detail = f"halved-lambda certificate on rotation-contraction: first violating run {first}"
    report_criterion(10, passed, detail)
    assert passed


def test_criterion_11_determinism(outdir, validations, fie_results, mhe_results, report_criterion):
    differing = []
    for name, file in SYSTEMS.items():
        config = load(file)
        validate(config, jobs=8).write_csv(outdir / f"validation_{name}_j8.csv")
        verify_fie_bound(config, jobs=8).write_csv(outdir / f"fie_{name}_j8.csv")
        verify_mhe_bound(config, jobs=8).write_csv(outdir / f"mhe_{name}_j8.csv")
        for kind in ("validation", "fie", "mhe"):
            if (outdir / f"{kind}_{name}_j1.csv").read_bytes() != (outdir / f"{kind}_{name}_j8.csv").read_bytes():
                differing.append(f"{kind}_{name}")
    # criterion 5 does not fan out; repeating it must give identical traces
    _, once = equivalence_traces(load(SYSTEMS["contraction"]), range(3))
    _, twice = equivalence_traces(load(SYSTEMS["contraction"]), range(3))
    if not all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(once, twice)):
        differing.append("equivalence_traces")
    passed = not differing
    report_criterion(11, passed, f"jobs 1 vs 8 byte-identical CSVs for criteria 3, 4, 6 (9 files); differing {differing}")
    assert passed
