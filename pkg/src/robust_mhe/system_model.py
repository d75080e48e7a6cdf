"""Discrete-time systems, deviation sequences and i-IOSS certificate checks.

Systems are ``x+ = f(x, w)``, ``y = h(x) + v`` with box constraint sets.
Dynamics come from a small registry of named built-ins, each shipped with an
exp-i-IOSS certificate whose constants are derived analytically and then
validated by Monte Carlo (:func:`validate_certificate`).

Registry functions broadcast over leading axes so the estimator can evaluate
many candidates at once.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kl_calculus as klc
from .errors import ConfigError, ConstraintError, LengthMismatch, PreconditionError

_TOL = 1e-12


def stream(seed: int, *index: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *index)``.

    Streams depend only on their key, so results are the same whatever order
    or process the work runs in.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, index)])))


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise PreconditionError("box needs matching bounds with lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width, dim: int) -> "Box":
        half = np.broadcast_to(np.asarray(half_width, dtype=float), (dim,))
        return cls(-half, half.copy())

    @classmethod
    def unbounded(cls, dim: int) -> "Box":
        return cls.symmetric(np.inf, dim)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    @property
    def radius(self) -> float:
        """Largest Euclidean norm of a point in the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def contains(self, x, tol: float = _TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def sample_uniform(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if not self.bounded:
            raise PreconditionError("cannot sample an unbounded box")
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def sample_corner(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if not self.bounded:
            raise PreconditionError("cannot sample an unbounded box")
        shape = (self.dim,) if size is None else (size, self.dim)
        pick = rng.integers(0, 2, size=shape).astype(bool)
        return np.where(pick, self.upper, self.lower)

    def to_dict(self):
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}


@dataclass(frozen=True)
class SystemModel:
    """``x+ = f(x, w)``, ``y = h(x) + v`` with constraint boxes X, W, V."""

    name: str
    n: int
    g: int
    p: int
    f: Callable
    h: Callable
    f_jac: Callable  # (x, w) -> (df/dx, df/dw)
    h_jac: Callable  # x -> dh/dx
    X: Box
    W: Box
    V: Box
    delta_w: float
    delta_v: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.X.dim, self.W.dim, self.V.dim) != (self.n, self.g, self.p):
            raise PreconditionError("box dimensions do not match the model")
        if self.W.radius > self.delta_w * (1 + 1e-12) or self.V.radius > self.delta_v * (1 + 1e-12):
            raise PreconditionError("delta_w/delta_v must dominate the W/V box radii")


@dataclass(frozen=True)
class Trajectory:
    """States ``x[0..t]``, disturbances ``w[0..t-1]``, noises and outputs ``v, y[0..t-1]``."""

    x: np.ndarray
    w: np.ndarray
    v: np.ndarray
    y: np.ndarray

    @property
    def length(self) -> int:
        return self.w.shape[0]

    def prefix(self, t: int) -> "Trajectory":
        return Trajectory(self.x[: t + 1], self.w[:t], self.v[:t], self.y[:t])

    def residual(self, model: SystemModel) -> float:
        """Largest deviation from the model equations (re-simulation check)."""
        if self.length == 0:
            return 0.0
        dx = np.max(np.abs(model.f(self.x[:-1], self.w) - self.x[1:]))
        dy = np.max(np.abs(model.h(self.x[:-1]) + self.v - self.y))
        return float(max(dx, dy))


@dataclass(frozen=True)
class IossCertificate:
    """KL function ``alpha`` asserting the i-IOSS inequality for a model.

    ``delta0 = None`` means the certificate is global; otherwise it covers
    initial-state pairs no further apart than ``delta0``.
    """

    alpha: klc.BoundFunction
    delta0: Optional[float] = None

    @property
    def is_global(self) -> bool:
        return self.delta0 is None

    @property
    def exp_form(self) -> Optional[tuple]:
        if isinstance(self.alpha, klc.ExpPower) and self.alpha.a == 1:
            return (self.alpha.c, self.alpha.lam)
        return None

    def with_lambda_scaled(self, factor: float) -> "IossCertificate":
        """Copy with the exponential decay rate multiplied by ``factor``."""
        a = self.alpha
        if not isinstance(a, klc.ExpPower):
            raise PreconditionError("only exponential certificates have a decay rate")
        return IossCertificate(klc.ExpPower(a.c, a.a, a.lam * factor, a.s_max), self.delta0)

    def to_dict(self):
        return {"alpha": self.alpha.to_dict(), "delta0": self.delta0}

    @classmethod
    def from_dict(cls, data: dict) -> "IossCertificate":
        unknown = set(data) - {"alpha", "delta0"}
        if unknown:
            raise ConfigError(f"unknown certificate keys {sorted(unknown)}")
        return cls(klc.from_dict(data["alpha"]), data.get("delta0"))


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------


def _scalar_boxes(delta_w, delta_v):
    return Box.unbounded(1), Box.symmetric(delta_w, 1), Box.symmetric(delta_v, 1)


def _contraction(delta_w=0.05, delta_v=0.05):
    X, W, V = _scalar_boxes(delta_w, delta_v)

    def f(x, w):
        return 0.5 * x + w

    def f_jac(x, w):
        shape = np.shape(x)[:-1]
        return np.full(shape + (1, 1), 0.5), np.ones(shape + (1, 1))

    return SystemModel("contraction", 1, 1, 1, f, _identity, f_jac, _identity_jac, X, W, V, delta_w, delta_v)


def _sin_contraction(delta_w=0.05, delta_v=0.05):
    X, W, V = _scalar_boxes(delta_w, delta_v)

    def f(x, w):
        return 0.5 * np.sin(x) + w

    def f_jac(x, w):
        x = np.asarray(x, dtype=float)
        return (0.5 * np.cos(x))[..., None], np.ones(x.shape[:-1] + (1, 1))

    return SystemModel("sin-contraction", 1, 1, 1, f, _identity, f_jac, _identity_jac, X, W, V, delta_w, delta_v)


def _rotation_contraction(delta_w=0.05, delta_v=0.05, theta=0.01):
    # W is the square inscribed in the delta_w disc
    X = Box.unbounded(2)
    W = Box.symmetric(delta_w / math.sqrt(2.0), 2)
    V = Box.symmetric(delta_v, 1)
    A = 0.9 * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])

    def f(x, w):
        return np.asarray(x, dtype=float) @ A.T + w

    def h(x):
        return np.asarray(x, dtype=float)[..., :1]

    def f_jac(x, w):
        shape = np.shape(x)[:-1]
        return np.broadcast_to(A, shape + (2, 2)), np.broadcast_to(np.eye(2), shape + (2, 2))

    def h_jac(x):
        return np.broadcast_to(np.array([[1.0, 0.0]]), np.shape(x)[:-1] + (1, 2))

    return SystemModel(
        "rotation-contraction", 2, 2, 1, f, h, f_jac, h_jac, X, W, V, delta_w, delta_v, {"theta": theta}
    )


def _identity(x):
    return np.asarray(x, dtype=float)


def _identity_jac(x):
    return np.ones(np.shape(x)[:-1] + (1, 1))


def _geometric_certificate(rate: float) -> IossCertificate:
    # |e_t| <= rate^t |e_0| + sum_k rate^(t-k-1) |dw_k|.  With lam = sqrt(rate)
    # the sum is at most max_k lam^(t-k-1)|dw_k| / (1 - rate/lam), and a sum of
    # two terms is at most twice their max.
    lam = math.sqrt(rate)
    c = max(2.0, 1.0 / (1.0 - rate / lam)) * 2.0
    return IossCertificate(klc.ExpPower(c, 1.0, lam))


REGISTRY = {
    "contraction": (_contraction, lambda **_: _geometric_certificate(0.5)),
    "sin-contraction": (_sin_contraction, lambda **_: _geometric_certificate(0.5)),
    "rotation-contraction": (_rotation_contraction, lambda **_: _geometric_certificate(0.9)),
}


def make_system(name: str, delta_w: float = 0.05, delta_v: float = 0.05, **params) -> SystemModel:
    try:
        factory, _ = REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; known: {sorted(REGISTRY)}") from None
    try:
        return factory(delta_w=delta_w, delta_v=delta_v, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc


def shipped_certificate(name: str, **params) -> IossCertificate:
    if name not in REGISTRY:
        raise ConfigError(f"unknown system {name!r}")
    return REGISTRY[name][1](**params)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def simulate(model: SystemModel, x0, w, v) -> Trajectory:
    """Roll the plant forward; states are not projected into X."""
    x0 = np.asarray(x0, dtype=float).reshape(model.n)
    w = np.asarray(w, dtype=float).reshape(-1, model.g)
    v = np.asarray(v, dtype=float).reshape(-1, model.p)
    if w.shape[0] != v.shape[0]:
        raise LengthMismatch("w and v must have the same length")
    if not model.X.contains(x0):
        raise ConstraintError(f"x0 = {x0} outside X")
    for name, seq, box in (("w", w, model.W), ("v", v, model.V)):
        for k, item in enumerate(seq):
            if not box.contains(item):
                raise ConstraintError(f"{name}[{k}] = {item} outside its box")
    t = w.shape[0]
    x = np.empty((t + 1, model.n))
    x[0] = x0
    for k in range(t):
        x[k + 1] = model.f(x[k], w[k])
    y = model.h(x[:-1]) + v if t else np.empty((0, model.p))
    return Trajectory(x, w, v, y.reshape(t, model.p))


def pi_sequence(traj1: Trajectory, traj2: Trajectory, model: Optional[SystemModel] = None) -> list:
    """Deviation vectors ``pi_0 .. pi_2t`` between two trajectories.

    Output entries are ``h(x2) - h(x1)``; without a model the noise-free
    outputs are recovered as ``y - v``.
    """
    if traj1.length != traj2.length:
        raise LengthMismatch(f"trajectory lengths differ: {traj1.length} vs {traj2.length}")
    t = traj1.length
    if model is not None:
        h1, h2 = model.h(traj1.x[:t]), model.h(traj2.x[:t])
    else:
        h1, h2 = traj1.y - traj1.v, traj2.y - traj2.v
    out = [traj1.x[0] - traj2.x[0]]
    out.extend(traj1.w[k] - traj2.w[k] for k in range(t))
    out.extend(h2[k] - h1[k] for k in range(t))
    return out


def iota(i: int, t: int) -> int:
    """Time index of ``pi_i`` in a sequence of length ``2t + 1``."""
    if not 0 <= i <= 2 * t:
        raise IndexError(f"index {i} outside 0..{2 * t}")
    if i == 0:
        return -1
    return i - 1 if i <= t else i - t - 1


@dataclass(frozen=True)
class IossReport:
    holds: bool
    worst_margin: float
    worst_t: int
    errors: np.ndarray = field(repr=False)
    bounds: np.ndarray = field(repr=False)


def ioss_bounds(alpha: klc.BoundFunction, pi_norms_x0, w_norms, h_norms) -> np.ndarray:
    """Right-hand side of the i-IOSS inequality for every prefix length.

    Entry ``t`` is ``max_i alpha(|pi_i|, t - iota(pi_i) - 1)`` over the
    length-``t`` prefix.
    """
    w_norms = np.asarray(w_norms, dtype=float)
    h_norms = np.asarray(h_norms, dtype=float)
    T = w_norms.size
    ts = np.arange(T + 1)
    prior = np.asarray(alpha(np.full(T + 1, float(pi_norms_x0)), ts.astype(float)))
    if T == 0:
        return prior
    lag = ts[:, None] - np.arange(T)[None, :] - 1  # t - tau - 1
    valid = lag >= 0
    lagc = np.where(valid, lag, 0).astype(float)
    terms = np.maximum(alpha(np.broadcast_to(w_norms, lag.shape), lagc), alpha(np.broadcast_to(h_norms, lag.shape), lagc))
    terms = np.where(valid, terms, 0.0)
    return np.maximum(prior, terms.max(axis=1))


def check_ioss(model: SystemModel, cert: IossCertificate, traj1: Trajectory, traj2: Trajectory, slack: float = 1e-10) -> IossReport:
    """Check the certificate inequality on every prefix of a trajectory pair."""
    if traj1.length != traj2.length:
        raise LengthMismatch("trajectory lengths differ")
    d0 = float(np.linalg.norm(traj1.x[0] - traj2.x[0]))
    if not cert.is_global and d0 > cert.delta0:
        raise PreconditionError(f"|x0 difference| = {d0} exceeds the certificate radius {cert.delta0}")
    t = traj1.length
    w_norms = np.linalg.norm(traj1.w - traj2.w, axis=1) if t else np.zeros(0)
    h_norms = np.linalg.norm(model.h(traj2.x[:t]) - model.h(traj1.x[:t]), axis=1) if t else np.zeros(0)
    bounds = ioss_bounds(cert.alpha, d0, w_norms, h_norms)
    errors = np.linalg.norm(traj1.x - traj2.x, axis=1)
    margins = bounds - errors
    worst = int(np.argmin(margins))
    return IossReport(bool(np.all(margins >= -slack)), float(margins[worst]), worst, errors, bounds)


@dataclass(frozen=True)
class CertificateValidation:
    pairs: int
    violations: int
    worst_margin: float
    counterexample: Optional[dict]

    @property
    def passed(self) -> bool:
        return self.violations == 0


def sample_pair(model: SystemModel, rng: np.random.Generator, t: int, x0_range: float, corner: bool):
    """Two trajectories with independent initial states and disturbances."""
    x_box = Box.symmetric(x0_range, model.n)
    draw = (lambda box, size=None: box.sample_corner(rng, size)) if corner else (lambda box, size=None: box.sample_uniform(rng, size))
    trajs = []
    for _ in range(2):
        x0 = x_box.sample_uniform(rng)
        trajs.append(simulate(model, x0, draw(model.W, t).reshape(t, model.g), draw(model.V, t).reshape(t, model.p)))
    return trajs


def validate_certificate(
    model: SystemModel,
    cert: IossCertificate,
    pairs: int = 1000,
    t_max: int = 40,
    seed: int = 0,
    x0_range: float = 2.0,
) -> CertificateValidation:
    """Monte-Carlo check of a certificate over seeded trajectory pairs.

    Even-indexed pairs draw disturbances uniformly from the boxes, odd ones
    from box corners.  The first violating pair is kept as counterexample.
    """
    violations = 0
    worst = math.inf
    counterexample = None
    for k in range(pairs):
        report, ce = check_pair(model, cert, k, t_max, seed, x0_range)
        worst = min(worst, report.worst_margin)
        if not report.holds:
            violations += 1
            if counterexample is None:
                counterexample = ce
    return CertificateValidation(pairs, violations, worst, counterexample)


def check_pair(model: SystemModel, cert: IossCertificate, k: int, t_max: int = 40, seed: int = 0, x0_range: float = 2.0):
    """i-IOSS check on the ``k``-th seeded pair; returns the report and a counterexample dict."""
    rng = stream(seed, k)
    x_range = x0_range if cert.is_global else min(x0_range, cert.delta0 / (2 * math.sqrt(model.n)))
    t1, t2 = sample_pair(model, rng, t_max, x_range, corner=bool(k % 2))
    report = check_ioss(model, cert, t1, t2)
    counterexample = {
        "pair": k,
        "t": report.worst_t,
        "margin": report.worst_margin,
        "x0": [t1.x[0].tolist(), t2.x[0].tolist()],
        "w": [t1.w.tolist(), t2.w.tolist()],
        "v": [t1.v.tolist(), t2.v.tolist()],
    }
    return report, counterexample


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columns ``t, x*, w*, v*, y*``; the final state row leaves w/v/y empty."""
    n, g, p = traj.x.shape[1], traj.w.shape[1], traj.v.shape[1]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"w{i}" for i in range(g)]
    header += [f"v{i}" for i in range(p)] + [f"y{i}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(traj.length + 1):
            row = [k] + [repr(float(v)) for v in traj.x[k]]
            if k < traj.length:
                row += [repr(float(v)) for v in np.concatenate([traj.w[k], traj.v[k], traj.y[k]])]
            else:
                row += [""] * (g + 2 * p)
            writer.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: i for i, name in enumerate(header)}
    pick = lambda prefix: [cols[c] for c in header if c[0] == prefix and c[1:].isdigit()]
    xi, wi, vi, yi = pick("x"), pick("w"), pick("v"), pick("y")
    x = np.array([[float(r[i]) for i in xi] for r in body])
    rest = body[:-1]
    grab = lambda idx: np.array([[float(r[i]) for i in idx] for r in rest]).reshape(len(rest), len(idx))
    return Trajectory(x, grab(wi), grab(vi), grab(yi))


