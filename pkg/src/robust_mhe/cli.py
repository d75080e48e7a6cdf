"""Command-line front end: ``robust-mhe {simulate,estimate,horizon,verify,sweep}``.

Exit codes: 0 success, 1 usage or configuration error, 2 bound violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import horizon as hz
from . import kl_calculus as klc
from .errors import ConfigError, EstimationError
from .estimator import FULL, EstimationProblem, run_mhe
from .harness import ExperimentConfig, build_context, resolve_horizon, sample_run, sweep_horizon, validate, verify_fie_bound, verify_mhe_bound
from .system_model import write_trajectory_csv

log = logging.getLogger("robust_mhe")

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-mhe", description="Moving-horizon estimation with verified error bounds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "simulate one seeded trajectory and write it as CSV",
        "estimate": "run MHE (or FIE) on one seeded trajectory and write the estimate trace",
        "horizon": "print a horizon report as JSON",
        "verify": "validate the certificate, then check the FIE and MHE error bounds",
        "sweep": "check the MHE bound over a list of horizons",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="JSON configuration file")
        p.add_argument("--out", type=Path, default=None, help="output file or directory")
        p.add_argument("--seed", type=int, default=None, help="override the configured master seed")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (results do not depend on it)")
        if name == "estimate":
            p.add_argument("--run", type=int, default=0, help="index of the seeded trajectory")
        if name == "simulate":
            p.add_argument("--run", type=int, default=0, help="index of the seeded trajectory")
        if name == "verify":
            p.add_argument("--skip-validation", action="store_true", help="do not validate the certificate first")
    return parser


def _load_config(args) -> ExperimentConfig:
    if not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    config = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        changes["jobs"] = args.jobs
    return config.replace(**changes) if changes else config


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    config = _load_config(args)
    ctx = build_context(config)
    sample = sample_run(config, ctx.model, args.run)
    out = args.out or Path("trajectory.csv")
    write_trajectory_csv(sample.trajectory, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    config = _load_config(args)
    ctx = build_context(config)
    T = resolve_horizon(config, ctx)
    sample = sample_run(config, ctx.model, args.run)
    trace = run_mhe(EstimationProblem(ctx.model, ctx.certificate, ctx.cost, T, ctx.solver), sample.trajectory, sample.xbar0)
    out = args.out or Path("estimate.csv")
    trace.write_csv(out)
    print(f"horizon {T}: max error {trace.errors.max():.6g}; wrote {out}")
    return EXIT_OK


HORIZON_KEYS = {"method", "c_x", "lambda", "beta_x", "eta", "epsilon", "s_bar", "family", "c", "a", "b", "T"}


def horizon_report(spec: dict) -> hz.HorizonReport:
    """Report from a horizon specification (``method`` plus its inputs)."""
    unknown = set(spec) - HORIZON_KEYS
    if unknown:
        raise ConfigError(f"unknown horizon keys {sorted(unknown)}")
    method = spec.get("method")
    try:
        if method == "rges_formula":
            T = hz.rges_min_horizon(spec["c_x"], spec["lambda"])
            return hz.HorizonReport(T, method, {"c_x": spec["c_x"], "lambda": spec["lambda"]})
        if method == "tau_min":
            beta = klc.from_dict(spec["beta_x"])
            T = hz.ras_min_horizon(beta, spec["eta"], spec.get("epsilon", 0.0), spec["s_bar"])
            inputs = {"beta_x": beta.to_dict(), "eta": spec["eta"], "epsilon": spec.get("epsilon", 0.0), "s_bar": spec["s_bar"]}
            return hz.HorizonReport(T, method, inputs)
        if method in ("closed_form_exp", "closed_form_frac"):
            family = method.rsplit("_", 1)[1]
            report = hz.closed_form_report(family, spec["c"], spec["a"], spec["b"], spec["eta"], spec["s_bar"])
            mono = hz.monotonicity_condition(family, spec["b"], spec["eta"], report.T_min, spec.get("T", report.T_min))
            return hz.HorizonReport(report.T_min, report.method, report.inputs, report.raw, mono)
    except KeyError as exc:
        raise ConfigError(f"horizon method {method!r} needs {exc}") from exc
    raise ConfigError(f"unknown horizon method {method!r}")


def cmd_horizon(args) -> int:
    if not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    data = json.loads(args.config.read_text())
    if "method" in data:
        report = horizon_report(data)
    else:
        config = _load_config(args)
        ctx = build_context(config)
        c, lam = ctx.fitted_constants()
        T = hz.rges_min_horizon(c, lam)
        eta = c * lam**T
        report = hz.HorizonReport(
            T, "rges_formula", {"c_x": c, "lambda": lam}, monotonicity=hz.monotonicity_condition("exp", lam, eta, T)
        )
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, "verify_out")
    if not args.skip_validation:
        val = validate(config)
        val.write_csv(out / "certificate.csv")
        if not val.passed:
            _write_json(val.counterexample, out / "certificate_counterexample.json")
            print(f"certificate rejected: {val.violations} violating pairs; counterexample in {out}", file=sys.stderr)
            return EXIT_VIOLATION
        print(f"certificate: {len(val.pairs)} pairs, no violations")
    status = EXIT_OK
    fie = verify_fie_bound(config)
    fie.write_csv(out / "fie.csv")
    _write_json(fie.summary(), out / "fie_summary.json")
    print(f"FIE bound: pass rate {fie.pass_rate:.6f}, worst margin {fie.worst_margin:.3g}")
    if not fie.all_passed:
        status = EXIT_VIOLATION
    ctx = build_context(config)
    if ctx.certificate.exp_form is not None:
        T = resolve_horizon(config, ctx)
        if T != FULL:
            mhe = verify_mhe_bound(config, T)
            mhe.write_csv(out / "mhe.csv")
            _write_json(mhe.summary(), out / "mhe_summary.json")
            print(f"MHE bound (T={T}): pass rate {mhe.pass_rate:.6f}, worst margin {mhe.worst_margin:.3g}")
            if not mhe.all_passed:
                status = EXIT_VIOLATION
    if status == EXIT_VIOLATION:
        print(f"bound violations found; counterexamples in {out}", file=sys.stderr)
    return status


def cmd_sweep(args) -> int:
    config = _load_config(args)
    result = sweep_horizon(config)
    out = args.out or Path("sweep.csv")
    result.write_csv(out)
    for row in result.rows:
        print(f"T={row.T}: worst {row.worst_err:.6g}, mean {row.mean_err:.6g}, factor {row.bound_factor:.3g}, pass {row.pass_rate:.4f}")
    if not result.all_passed:
        print("bound violations found", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "horizon": cmd_horizon, "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
