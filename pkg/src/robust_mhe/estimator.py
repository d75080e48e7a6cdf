"""Moving-horizon and full-information estimation with a max-form cost.

The window problem minimises

    V(chi0 - prior, omega, nu) = max_i rho_low(|pi~_i|, L - iota(pi~_i) - 1)

over the window's initial state ``chi0`` and process disturbances ``omega``;
the measurement residuals ``nu = y - h(chi)`` follow from the rollout.
Candidates whose residuals leave V are rejected (infinite cost).

The max-form cost is nonsmooth, so each local refinement solves the
epigraph form ``min G  s.t.  rho_low(|pi~_i|, k_i)^2 <= G`` with SLSQP and
analytic Jacobians.  Refinements start from the zero-disturbance rollout of
the prior, from the best points of a dense grid when the problem has at most
``grid_max_dim`` decision variables, and from seeded random points.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import least_squares, linprog, minimize

from . import kl_calculus as klc
from .errors import CapExceeded, DomainError, EstimationError, InfeasibleError, PreconditionError, SolverError
from .system_model import IossCertificate, SystemModel, Trajectory, stream

FULL = "full"
FIE_CAP = 50


@dataclass(frozen=True)
class CostSpec:
    """Max-form cost built from the lower bound function ``rho_low``.

    With a certificate attached, construction checks
    ``rho_low(s, tau) >= alpha(2 s, tau)`` on ``[0, s_max] x {0..tau_max}``.
    """

    rho_low: klc.BoundFunction
    certificate: Optional[IossCertificate] = None
    s_max: float = 1.0
    tau_max: int = 60
    mode: str = "max_form"

    def __post_init__(self):
        if self.mode != "max_form":
            raise PreconditionError("only the max-form cost carries stability guarantees")
        if self.certificate is not None:
            margin = sufficient_condition_margin(self.rho_low, self.certificate.alpha, self.s_max, self.tau_max)
            if margin < -1e-12:
                raise PreconditionError(f"rho_low(s, tau) < alpha(2s, tau) somewhere (margin {margin})")

    @property
    def rho_upper(self) -> klc.BoundFunction:
        # the max-form cost is sandwiched by rho_low on both sides
        return self.rho_low

    def to_dict(self):
        return {"rho_low": self.rho_low.to_dict()}


def sufficient_condition_margin(rho_low, alpha, s_max: float, tau_max: int, points: int = 401) -> float:
    """``min (rho_low(s, tau) - alpha(2 s, tau))`` over a grid."""
    s = np.linspace(0.0, s_max, points)[:, None]
    tau = np.arange(tau_max + 1, dtype=float)[None, :]
    return float(np.min(np.asarray(rho_low(s, tau)) - np.asarray(alpha(2.0 * s, tau))))


def build_cost(cert: IossCertificate, s_max: float = 1.0) -> CostSpec:
    """Cost with ``rho_low(s, tau) = alpha(2 s, tau)``."""
    alpha = cert.alpha
    if alpha.s_max is not None and alpha.s_max < 2 * s_max:
        raise DomainError(f"certificate domain [0, {alpha.s_max}] does not cover 2*s_max = {2 * s_max}")
    return CostSpec(alpha.scaled(2.0), cert, s_max)


def cost_terms(L: int):
    """Discounts ``L - iota - 1`` for the prior, omega and nu entries of a window."""
    lags = (L - np.arange(L) - 1).astype(float)
    return float(L), lags


def evaluate_cost(spec: CostSpec, chi0_minus_prior, omega, nu, t: int) -> float:
    omega = np.asarray(omega, dtype=float).reshape(t, -1) if t else np.zeros((0, 1))
    nu = np.asarray(nu, dtype=float).reshape(t, -1) if t else np.zeros((0, 1))
    prior_lag, lags = cost_terms(t)
    value = float(spec.rho_low(float(np.linalg.norm(chi0_minus_prior)), prior_lag))
    if t:
        value = max(value, float(np.max(spec.rho_low(np.linalg.norm(omega, axis=1), lags))))
        value = max(value, float(np.max(spec.rho_low(np.linalg.norm(nu, axis=1), lags))))
    return value


@dataclass(frozen=True)
class SolverSettings:
    grid_points: int = 401
    grid_budget: int = 200_000
    grid_max_dim: int = 4
    grid_keep: int = 3
    starts: int = 0
    refine_iterations: int = 200
    tolerance: float = 1e-8
    feasibility_tolerance: float = 1e-9
    search_radius: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_points", "grid_budget", "refine_iterations", "search_radius", "tolerance"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"solver setting {name} must be positive")
        if self.starts < 0 or self.grid_keep < 1 or self.grid_max_dim < 0:
            raise PreconditionError("invalid multi-start settings")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class EstimationProblem:
    model: SystemModel
    certificate: IossCertificate
    cost: CostSpec
    horizon: Union[int, str] = FULL
    solver: SolverSettings = field(default_factory=SolverSettings)
    prior_policy: str = "filtering"

    def __post_init__(self):
        if self.horizon != FULL and not (isinstance(self.horizon, int) and self.horizon >= 1):
            raise PreconditionError("horizon must be a positive integer or 'full'")
        if self.prior_policy != "filtering":
            raise PreconditionError("only the filtering prior is supported")


@dataclass(frozen=True)
class WindowSolution:
    xhat: np.ndarray
    cost: float
    chi0: np.ndarray
    omega: np.ndarray
    nu: np.ndarray
    chi: np.ndarray


class _Window:
    """One instance of the window problem with cached rollouts."""

    def __init__(self, model: SystemModel, rho: klc.BoundFunction, prior, y, tol: float):
        self.model = model
        self.rho = rho
        self.prior = np.asarray(prior, dtype=float).reshape(model.n)
        self.y = np.asarray(y, dtype=float).reshape(-1, model.p)
        self.L = self.y.shape[0]
        self.dim = model.n + model.g * self.L
        self.tol = tol
        self.prior_lag, self.lags = cost_terms(self.L)
        self.term_lags = np.concatenate([[self.prior_lag], self.lags, self.lags])
        self._cache_key = None

    def split(self, z):
        n = self.model.n
        return z[..., :n], z[..., n:].reshape(z.shape[:-1] + (self.L, self.model.g))

    def rollout(self, z):
        chi0, omega = self.split(z)
        chis = [chi0]
        for k in range(self.L):
            chis.append(self.model.f(chis[-1], omega[..., k, :]))
        return np.stack(chis, axis=-2)

    def residuals(self, chis):
        return self.y - self.model.h(chis[..., : self.L, :])

    def term_norms(self, z):
        chi0, omega = self.split(z)
        chis = self.rollout(z)
        nu = self.residuals(chis)
        norms = np.concatenate(
            [
                np.linalg.norm(chi0 - self.prior, axis=-1)[..., None],
                np.linalg.norm(omega, axis=-1),
                np.linalg.norm(nu, axis=-1),
            ],
            axis=-1,
        )
        return norms, chis, nu

    def v_feasible(self, nu):
        V = self.model.V
        ok = (nu >= V.lower - self.tol) & (nu <= V.upper + self.tol)
        return np.all(ok.reshape(ok.shape[:-2] + (-1,)), axis=-1)

    def cost(self, z):
        """True cost with rejection; broadcasts over leading axes of ``z``."""
        norms, _, nu = self.term_norms(z)
        values = np.max(self.rho(norms, self.term_lags), axis=-1)
        if self.L:
            values = np.where(self.v_feasible(nu), values, np.inf)
        return values

    def unconstrained_cost(self, z):
        norms, _, _ = self.term_norms(z)
        return float(np.max(self.rho(norms, self.term_lags)))

    # -- epigraph pieces -------------------------------------------------

    def _evaluate(self, x):
        key = x.tobytes()
        if key == self._cache_key:
            return self._cache
        model, L, n, g = self.model, self.L, self.model.n, self.model.g
        z, gam = x[:-1], x[-1]
        chi0, omega = self.split(z)
        chis = self.rollout(z)
        nu = self.residuals(chis)

        Jnu = self.residual_jacobian(chis, omega)
        d0 = chi0 - self.prior
        norms = np.concatenate([[np.linalg.norm(d0)], np.linalg.norm(omega, axis=1), np.linalg.norm(nu, axis=1)])
        unit = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        grad_norm = np.zeros((2 * L + 1, self.dim))
        grad_norm[0, :n] = d0 * unit[0]
        rows = np.arange(L)
        grad_norm[1 + rows[:, None], n + rows[:, None] * g + np.arange(g)] = omega * unit[1 : L + 1, None]
        grad_norm[L + 1 :] = np.einsum("kp,kpd->kd", nu * unit[L + 1 :, None], Jnu)
        rho = np.asarray(self.rho(norms, self.term_lags)) / self.scale
        drho = np.asarray(self.rho.ds(norms, self.term_lags)) / self.scale
        cons = gam - rho**2
        jac = np.zeros((norms.size, self.dim + 1))
        jac[:, :-1] = -2.0 * (rho * drho)[:, None] * grad_norm
        jac[:, -1] = 1.0

        # residual bounds nu in V
        V = model.V
        v_cons, v_jac = [], []
        flat_nu = nu.reshape(-1)
        flat_J = Jnu.reshape(-1, self.dim)
        lo = np.tile(V.lower, L)
        hi = np.tile(V.upper, L)
        fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
        if fin_lo.any():
            v_cons.append(flat_nu[fin_lo] - lo[fin_lo])
            v_jac.append(flat_J[fin_lo])
        if fin_hi.any():
            v_cons.append(hi[fin_hi] - flat_nu[fin_hi])
            v_jac.append(-flat_J[fin_hi])
        if v_cons:
            vc = np.concatenate(v_cons)
            vj = np.concatenate(v_jac)
            cons = np.concatenate([cons, vc])
            jac = np.vstack([jac, np.hstack([vj, np.zeros((vj.shape[0], 1))])])

        self._cache_key, self._cache = key, (cons, jac)
        return self._cache

    def residual_jacobian(self, chis, omega):
        """``d nu / dz`` of shape (L, p, dim) via forward sensitivities of the rollout."""
        model, L, n, g = self.model, self.L, self.model.n, self.model.g
        if not L:
            return np.zeros((0, model.p, self.dim))
        S = np.zeros((L, n, self.dim))
        S[0, :, :n] = np.eye(n)
        Fx, Fw = model.f_jac(chis[: L - 1], omega[: L - 1])
        for k in range(L - 1):
            S[k + 1] = Fx[k] @ S[k]
            S[k + 1, :, n + k * g : n + (k + 1) * g] += Fw[k]
        return -np.einsum("kpn,knd->kpd", model.h_jac(chis[:L]), S)

    def repair(self, z_start, bounds, margin: float = 1e-3):
        """Move ``z`` into the set where every residual lies inside V (phase one)."""
        model, L, n, g = self.model, self.L, self.model.n, self.model.g
        width = np.where(np.isfinite(model.V.upper - model.V.lower), model.V.upper - model.V.lower, 0.0)
        lo = np.tile(model.V.lower + margin * width, L)
        hi = np.tile(model.V.upper - margin * width, L)

        def violation(z):
            nu = self.residuals(self.rollout(z)).reshape(-1)
            return nu - np.clip(nu, lo, hi)

        def jac(z):
            chis = self.rollout(z)
            nu = self.residuals(chis).reshape(-1)
            J = self.residual_jacobian(chis, self.split(z)[1]).reshape(-1, self.dim)
            return J * ((nu < lo) | (nu > hi))[:, None]

        lb = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
        ub = np.array([np.inf if b[1] is None else b[1] for b in bounds])
        z0 = np.clip(z_start, lb, ub)
        res = least_squares(violation, z0, jac=jac, bounds=(lb, ub), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
        return res.x

    def refine(self, z_start, settings: SolverSettings, bounds):
        gam0 = self.unconstrained_cost(z_start) / self.scale
        x0 = np.append(z_start, gam0**2 * 1.01)
        constraint = {
            "type": "ineq",
            "fun": lambda x: self._evaluate(x)[0],
            "jac": lambda x: self._evaluate(x)[1],
        }
        objective_grad = np.zeros(self.dim + 1)
        objective_grad[-1] = 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                lambda x: (x[-1], objective_grad),
                x0,
                jac=True,
                method="SLSQP",
                bounds=bounds + [(0.0, None)],
                constraints=[constraint],
                options={"maxiter": settings.refine_iterations, "ftol": settings.tolerance * 1e-2},
            )
        z = np.clip(res.x[:-1], [b[0] if b[0] is not None else -np.inf for b in bounds],
                    [b[1] if b[1] is not None else np.inf for b in bounds])
        # status 8: the line search stalled at numerical precision
        return z, res.status in (0, 8)

    def polish(self, z, settings: SolverSettings, bounds, radius: float = 1e-2, iterations: int = 500):
        """Trust-region sequential LP on the epigraph; robust where SLSQP's QP degenerates.

        Converged when the linearized problem predicts no relative decrease
        beyond ``tolerance * 1e-2``, i.e. ``z`` is first-order stationary.
        """
        lb = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
        ub = np.array([np.inf if b[1] is None else b[1] for b in bounds])
        c = np.zeros(self.dim + 1)
        c[-1] = 1.0
        merit = float(self.cost(z) / self.scale) ** 2
        if not math.isfinite(merit):
            return z, False
        for _ in range(iterations):
            cons, jac = self._evaluate(np.append(z, merit))
            step_bounds = list(zip(np.maximum(-radius, lb - z), np.minimum(radius, ub - z))) + [(None, None)]
            res = linprog(c, A_ub=-jac, b_ub=cons, bounds=step_bounds, method="highs")
            if res.status != 0:
                return z, False
            predicted = -res.fun
            if predicted <= settings.tolerance * 1e-2 * merit:
                return z, True
            trial = np.clip(z + res.x[:-1], lb, ub)
            value = float(self.cost(trial) / self.scale) ** 2
            if value < merit - 0.1 * predicted:
                if value < merit - 0.75 * predicted:
                    radius = min(2.0 * radius, 1.0)
                z, merit = trial, value
            else:
                radius *= 0.25
                if radius < 1e-12:
                    return z, False
        return z, False


def _bounds(model: SystemModel, L: int):
    lo = np.concatenate([model.X.lower, np.tile(model.W.lower, L)])
    hi = np.concatenate([model.X.upper, np.tile(model.W.upper, L)])
    return [(None if not np.isfinite(a) else float(a), None if not np.isfinite(b) else float(b)) for a, b in zip(lo, hi)]


def _chi0_box(win: _Window, settings: SolverSettings):
    """Box around the prior that holds every candidate cheaper than the zero start."""
    model = win.model
    z0 = np.concatenate([win.prior, np.zeros(model.g * win.L)])
    radius = settings.search_radius
    base = float(win.cost(z0))
    if math.isfinite(base):
        try:
            radius = float(win.rho.inverse(base, win.prior_lag)) if base > 0 else 0.0
        except Exception:
            radius = settings.search_radius
        radius = min(radius, settings.search_radius * max(1.0, float(np.linalg.norm(win.prior))))
    lo = np.maximum(win.prior - radius, model.X.lower)
    hi = np.minimum(win.prior + radius, model.X.upper)
    return lo, hi


def _sublevel_box(win: _Window, value: float, settings: SolverSettings):
    """Bounding box of ``{z : cost(z) <= value}`` intersected with X and W."""
    model, L = win.model, win.L
    radii = np.full(L + 1, settings.search_radius)
    if math.isfinite(value):
        for k, lag in enumerate(np.concatenate([[win.prior_lag], win.lags])):
            try:
                radii[k] = min(float(win.rho.inverse(value, lag)), settings.search_radius)
            except EstimationError:
                pass
    lo = np.concatenate([np.maximum(win.prior - radii[0], model.X.lower)] + [np.maximum(-r, model.W.lower) for r in radii[1:]])
    hi = np.concatenate([np.minimum(win.prior + radii[0], model.X.upper)] + [np.minimum(r, model.W.upper) for r in radii[1:]])
    return lo, hi


def _grid_starts(win: _Window, settings: SolverSettings, chi_lo, chi_hi):
    model = win.model
    per_dim = int(min(settings.grid_points, math.floor(settings.grid_budget ** (1.0 / win.dim) + 1e-9)))
    per_dim = max(per_dim, 2)
    lows = np.concatenate([chi_lo, np.tile(model.W.lower, win.L)])
    highs = np.concatenate([chi_hi, np.tile(model.W.upper, win.L)])
    axes = [np.linspace(a, b, per_dim) if b > a else np.array([a]) for a, b in zip(lows, highs)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, win.dim)
    costs = np.concatenate([win.cost(chunk) for chunk in np.array_split(mesh, max(1, mesh.shape[0] // 50_000))])
    order = np.argsort(costs, kind="stable")[: settings.grid_keep]
    return [mesh[i] for i in order if np.isfinite(costs[i])]


def solve_window(problem: EstimationProblem, y_window, prior, start_index: int = 0, guess=None) -> WindowSolution:
    """Solve one estimation window.

    ``guess`` is an optional extra start ``(chi0, omega...)``; the result is a
    deterministic function of the inputs, ``settings.seed`` and ``start_index``.
    """
    model, settings = problem.model, problem.solver
    prior = np.asarray(prior, dtype=float).reshape(model.n)
    win = _Window(model, problem.cost.rho_low, prior, y_window, settings.feasibility_tolerance)
    L = win.L

    if L == 0:
        return WindowSolution(prior.copy(), 0.0, prior.copy(), np.zeros((0, model.g)), np.zeros((0, model.p)), prior[None].copy())

    z_zero = np.concatenate([prior, np.zeros(model.g * L)])
    base = win.unconstrained_cost(z_zero)
    if base == 0.0:
        candidates = [(0.0, z_zero)]
        converged = True
    else:
        win.scale = base
        chi_lo, chi_hi = _chi0_box(win, settings)
        starts = [z_zero]
        if guess is not None:
            starts.append(np.asarray(guess, dtype=float).reshape(win.dim))
        if win.dim <= settings.grid_max_dim:
            starts += _grid_starts(win, settings, chi_lo, chi_hi)
        bounds = _bounds(model, L)
        candidates = []
        converged = False

        def refine(z):
            nonlocal converged
            refined, ok = win.refine(z, settings, bounds)
            converged |= ok
            candidates.append((float(win.cost(refined)), refined))
            candidates.append((float(win.cost(z)), z))

        for z in starts:
            refine(z)
        # any cheaper point lies in the sublevel box of the incumbent
        rng = stream(settings.seed, start_index, L)
        for _ in range(settings.starts):
            lo, hi = _sublevel_box(win, min(c for c, _ in candidates), settings)
            refine(rng.uniform(lo, hi))
        if not converged:
            # restart from the best point reached, then from a repaired one
            refine(min(candidates, key=lambda item: (item[0], win.unconstrained_cost(item[1])))[1])
        if not converged or not any(math.isfinite(c) for c, _ in candidates):
            refine(win.repair(min(candidates, key=lambda item: (item[0], win.unconstrained_cost(item[1])))[1], bounds))
        if not converged:
            polished, converged = win.polish(min(candidates, key=lambda item: item[0])[1], settings, bounds)
            candidates.append((float(win.cost(polished)), polished))

    best_cost, best_z = min(candidates, key=lambda item: item[0])
    if not math.isfinite(best_cost):
        raise InfeasibleError("no candidate keeps the measurement residuals inside V")
    if not converged:
        raise SolverError("no local refinement converged within the iteration budget")
    chis = win.rollout(best_z)
    chi0, omega = win.split(best_z)
    return WindowSolution(chis[-1].copy(), best_cost, chi0.copy(), omega.copy(), win.residuals(chis), chis)


# --------------------------------------------------------------------------
# online estimation
# --------------------------------------------------------------------------


@dataclass
class WindowEstimate:
    t: int
    start: int
    prior: np.ndarray
    solution: WindowSolution
    guess: Optional[np.ndarray] = None

    @property
    def xhat(self):
        return self.solution.xhat

    @property
    def cost(self):
        return self.solution.cost


@dataclass
class EstimateTrace:
    entries: list = field(default_factory=list)
    reference: Optional[Trajectory] = None

    @property
    def xhat(self) -> np.ndarray:
        return np.array([e.xhat for e in self.entries])

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.cost for e in self.entries])

    @property
    def errors(self) -> Optional[np.ndarray]:
        if self.reference is None:
            return None
        return np.linalg.norm(self.reference.x[: len(self.entries)] - self.xhat, axis=1)

    def write_csv(self, path) -> None:
        n = self.xhat.shape[1]
        errs = self.errors
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"xhat{i}" for i in range(n)] + ["V_opt", "err"])
            for k, e in enumerate(self.entries):
                err = "" if errs is None else repr(float(errs[k]))
                writer.writerow([e.t] + [repr(float(v)) for v in e.xhat] + [repr(float(e.cost)), err])


def _run(problem: EstimationProblem, trajectory: Trajectory, xbar0, horizon_of) -> EstimateTrace:
    xbar0 = np.asarray(xbar0, dtype=float).reshape(problem.model.n)
    trace = EstimateTrace(reference=trajectory)
    for t in range(trajectory.length + 1):
        T = horizon_of(t)
        start = max(0, t - T)
        prior = xbar0 if start == 0 else trace.entries[start].xhat
        guess = _shifted_guess(problem.model, trace.entries[-1], start) if t > 1 else None
        sol = solve_window(problem, trajectory.y[start:t], prior, start, guess)
        trace.entries.append(WindowEstimate(t, start, prior, sol, guess))
    return trace


def _shifted_guess(model: SystemModel, previous: WindowEstimate, start: int):
    """Previous window solution moved to the new window, padded with zero disturbance."""
    sol = previous.solution
    shift = start - previous.start
    omega = np.vstack([sol.omega[shift:], np.zeros((1, model.g))])
    z = np.concatenate([sol.chi[shift], omega.reshape(-1)])
    lo = np.concatenate([model.X.lower, np.tile(model.W.lower, omega.shape[0])])
    hi = np.concatenate([model.X.upper, np.tile(model.W.upper, omega.shape[0])])
    return np.clip(z, lo, hi)


def run_mhe(problem: EstimationProblem, trajectory: Trajectory, xbar0) -> EstimateTrace:
    """Moving-horizon estimates with the filtering prior ``xbar_{t-T} = xhat*_{t-T}``."""
    if problem.horizon == FULL:
        return run_fie(problem, trajectory, xbar0)
    T = problem.horizon
    return _run(problem, trajectory, xbar0, lambda t: min(t, T))


def run_fie(problem: EstimationProblem, trajectory: Trajectory, xbar0, cap: int = FIE_CAP) -> EstimateTrace:
    if trajectory.length > cap:
        raise CapExceeded(f"full-information estimation is capped at t <= {cap}")
    return _run(problem, trajectory, xbar0, lambda t: t)
