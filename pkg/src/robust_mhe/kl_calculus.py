"""Comparison-function algebra.

Parametric and tabulated KL functions ``beta(s, tau)`` together with the
operations the estimator and the horizon formulas are built from: evaluation,
inversion in the first argument, n-fold composition, the ``oplus`` (max)
operator, Lipschitz-at-origin slopes and the minimal contraction discount
``tau_min``.

All functions are immutable and evaluate elementwise on numpy arrays.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, IterationLimit, PreconditionError, RangeError

#: Default cap on the discount scanned by :func:`tau_min`.
TAU_CAP = 10**6
#: Absolute tolerance on ``s`` used by bisection inverses.
INVERSE_TOL = 1e-12
#: Number of uniform grid points used by numeric feasibility checks.
GRID_POINTS = 10**4

_DOMAIN_SLACK = 1e-12


def _result(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


# --------------------------------------------------------------------------
# K- and L-function descriptors
# --------------------------------------------------------------------------


class LFunction(ABC):
    """A nonincreasing function of the discount ``tau`` tending to zero."""

    @abstractmethod
    def __call__(self, tau): ...

    @abstractmethod
    def to_dict(self) -> dict: ...

    @staticmethod
    def from_dict(data: dict) -> "LFunction":
        data = dict(data)
        kind = data.pop("kind", None)
        try:
            if kind == "exp":
                return ExpDecay(**_rename(data, {"lambda": "lam"}))
            if kind == "frac":
                return FracDecay(**data)
            if kind == "tabulated":
                return TabulatedDecay(tau=tuple(data.pop("tau")), values=tuple(data.pop("values")), **data)
        except TypeError as exc:
            raise ConfigError(f"bad L-function descriptor: {exc}") from exc
        raise ConfigError(f"unknown L-function kind {kind!r}")


@dataclass(frozen=True)
class ExpDecay(LFunction):
    """``coef * lam**tau``."""

    coef: float
    lam: float

    def __post_init__(self):
        if not self.coef > 0 or not 0 < self.lam < 1:
            raise PreconditionError(f"ExpDecay needs coef > 0 and lam in (0, 1), got {self}")

    def __call__(self, tau):
        return _result(self.coef * np.power(self.lam, np.asarray(tau, dtype=float)))

    def to_dict(self):
        return {"kind": "exp", "coef": self.coef, "lambda": self.lam}


@dataclass(frozen=True)
class FracDecay(LFunction):
    """``coef * (tau + 1)**(-b)``."""

    coef: float
    b: float

    def __post_init__(self):
        if not self.coef > 0 or not self.b > 0:
            raise PreconditionError(f"FracDecay needs coef > 0 and b > 0, got {self}")

    def __call__(self, tau):
        return _result(self.coef * np.power(np.asarray(tau, dtype=float) + 1.0, -self.b))

    def to_dict(self):
        return {"kind": "frac", "coef": self.coef, "b": self.b}


@dataclass(frozen=True)
class TabulatedDecay(LFunction):
    """Right-continuous step function through ``(tau[j], values[j])``."""

    tau: tuple
    values: tuple

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if tau.ndim != 1 or tau.shape != values.shape or tau.size == 0:
            raise PreconditionError("TabulatedDecay needs matching 1-d tau/values")
        if tau[0] != 0 or np.any(np.diff(tau) <= 0):
            raise PreconditionError("tau grid must start at 0 and be strictly increasing")
        if np.any(np.diff(values) > 0) or np.any(values < 0):
            raise PreconditionError("tabulated L-function must be nonnegative and nonincreasing")

    def __call__(self, tau):
        grid = np.asarray(self.tau, dtype=float)
        idx = np.searchsorted(grid, np.asarray(tau, dtype=float), side="right") - 1
        return _result(np.asarray(self.values, dtype=float)[np.clip(idx, 0, None)])

    def to_dict(self):
        return {"kind": "tabulated", "tau": list(self.tau), "values": list(self.values)}


@dataclass(frozen=True)
class KPower:
    """K-function ``c * s**a``."""

    c: float
    a: float

    def __post_init__(self):
        if not self.c > 0 or not self.a > 0:
            raise PreconditionError(f"KPower needs c > 0 and a > 0, got {self}")

    def __call__(self, s):
        return _result(self.c * np.power(np.asarray(s, dtype=float), self.a))

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.a == 1:
            return _result(np.full_like(s, self.c))
        return _result(self.c * self.a * np.power(s, self.a - 1))

    def inverse(self, v):
        return _result(np.power(np.asarray(v, dtype=float) / self.c, 1.0 / self.a))

    def to_dict(self):
        return {"kind": "power", "c": self.c, "a": self.a}

    @staticmethod
    def from_dict(data: dict) -> "KPower":
        data = dict(data)
        if data.pop("kind", "power") != "power":
            raise ConfigError("only power K-functions are supported")
        try:
            return KPower(**data)
        except TypeError as exc:
            raise ConfigError(f"bad K-function descriptor: {exc}") from exc


# --------------------------------------------------------------------------
# KL functions
# --------------------------------------------------------------------------


class BoundFunction(ABC):
    """A KL comparison function ``beta(s, tau)`` on ``[0, s_max]``.

    ``s_max = None`` means the domain in ``s`` is unbounded.
    """

    s_max: Optional[float]

    def __call__(self, s, tau):
        s = np.asarray(s, dtype=float)
        tau = np.asarray(tau, dtype=float)
        self._check_domain(s)
        if np.any(tau < 0):
            raise DomainError("tau must be nonnegative")
        return _result(self._eval(s, tau))

    def ds(self, s, tau):
        """Derivative in ``s`` (right derivative at kinks)."""
        s = np.asarray(s, dtype=float)
        self._check_domain(s)
        return _result(self._ds(s, np.asarray(tau, dtype=float)))

    def inverse(self, v, tau):
        """Solve ``beta(s, tau) = v`` for ``s``."""
        v = np.asarray(v, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if np.any(v < 0):
            raise RangeError("cannot invert a negative value")
        if self.s_max is not None:
            top = self._eval(np.asarray(self.s_max, dtype=float), tau)
            if np.any(v > top * (1 + 1e-12) + 1e-300):
                raise RangeError(f"value exceeds beta(s_max, tau) = {np.max(top)}")
        return _result(self._inverse(v, tau))

    def _check_domain(self, s):
        if np.any(s < 0) or (self.s_max is not None and np.any(s > self.s_max * (1 + _DOMAIN_SLACK))):
            raise DomainError(f"s outside [0, {self.s_max}]: {np.max(s)!r}")

    @abstractmethod
    def _eval(self, s: np.ndarray, tau: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _ds(self, s: np.ndarray, tau: np.ndarray) -> np.ndarray: ...

    def _inverse(self, v, tau):
        # bisection fallback; bracket grows until it covers v
        v, tau = np.broadcast_arrays(v, tau)
        lo = np.zeros(v.shape)
        hi = np.ones(v.shape) if self.s_max is None else np.full(v.shape, float(self.s_max))
        if self.s_max is None:
            for _ in range(2000):
                short = self._eval(hi, tau) < v
                if not np.any(short):
                    break
                hi = np.where(short, hi * 2.0, hi)
        while np.any(hi - lo > INVERSE_TOL):
            mid = 0.5 * (lo + hi)
            below = self._eval(mid, tau) < v
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= INVERSE_TOL * np.maximum(1.0, hi)):
                break
        return np.where(v == 0, 0.0, 0.5 * (lo + hi))

    @abstractmethod
    def scaled(self, factor: float) -> "BoundFunction":
        """Return ``s, tau -> self(factor * s, tau)`` in the same family."""

    @abstractmethod
    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class ExpPower(BoundFunction):
    """``c * s**a * lam**tau``."""

    c: float
    a: float
    lam: float
    s_max: Optional[float] = None

    def __post_init__(self):
        if not self.c > 0 or not self.a >= 1 or not 0 < self.lam < 1:
            raise PreconditionError(f"ExpPower needs c > 0, a >= 1, lam in (0, 1): {self}")
        if self.s_max is not None and not self.s_max > 0:
            raise PreconditionError("s_max must be positive")

    def decay(self, tau):
        return np.power(self.lam, tau)

    def _eval(self, s, tau):
        return self.c * np.power(s, self.a) * np.power(self.lam, tau)

    def _ds(self, s, tau):
        if self.a == 1:
            return self.c * np.power(self.lam, tau) * np.ones_like(s)
        return self.c * self.a * np.power(s, self.a - 1) * np.power(self.lam, tau)

    def _inverse(self, v, tau):
        return np.power(v / (self.c * np.power(self.lam, tau)), 1.0 / self.a)

    def scaled(self, factor):
        s_max = None if self.s_max is None else self.s_max / factor
        return ExpPower(self.c * factor**self.a, self.a, self.lam, s_max)

    def to_dict(self):
        return {"family": "exp_power", "c": self.c, "a": self.a, "lambda": self.lam, "s_max": self.s_max}


@dataclass(frozen=True)
class FracPower(BoundFunction):
    """``c * s**a * (tau + 1)**(-b)``."""

    c: float
    a: float
    b: float
    s_max: Optional[float] = None

    def __post_init__(self):
        if not self.c > 0 or not self.a >= 1 or not self.b > 0:
            raise PreconditionError(f"FracPower needs c > 0, a >= 1, b > 0: {self}")
        if self.s_max is not None and not self.s_max > 0:
            raise PreconditionError("s_max must be positive")

    def decay(self, tau):
        return np.power(np.asarray(tau, dtype=float) + 1.0, -self.b)

    def _eval(self, s, tau):
        return self.c * np.power(s, self.a) * self.decay(tau)

    def _ds(self, s, tau):
        if self.a == 1:
            return self.c * self.decay(tau) * np.ones_like(s)
        return self.c * self.a * np.power(s, self.a - 1) * self.decay(tau)

    def _inverse(self, v, tau):
        return np.power(v / (self.c * self.decay(tau)), 1.0 / self.a)

    def scaled(self, factor):
        s_max = None if self.s_max is None else self.s_max / factor
        return FracPower(self.c * factor**self.a, self.a, self.b, s_max)

    def to_dict(self):
        return {"family": "frac_power", "c": self.c, "a": self.a, "b": self.b, "s_max": self.s_max}


@dataclass(frozen=True)
class SeparableProduct(BoundFunction):
    """``k(s) * l(tau)`` for a power K-function and any L-function."""

    k: KPower
    l: LFunction
    s_max: Optional[float] = None

    def _eval(self, s, tau):
        return np.asarray(self.k(s)) * np.asarray(self.l(tau))

    def _ds(self, s, tau):
        return np.asarray(self.k.derivative(s)) * np.asarray(self.l(tau))

    def _inverse(self, v, tau):
        return np.asarray(self.k.inverse(v / np.asarray(self.l(tau))))

    def scaled(self, factor):
        s_max = None if self.s_max is None else self.s_max / factor
        return SeparableProduct(KPower(self.k.c * factor**self.k.a, self.k.a), self.l, s_max)

    def to_dict(self):
        return {"family": "separable", "k": self.k.to_dict(), "l": self.l.to_dict(), "s_max": self.s_max}


@dataclass(frozen=True)
class Tabulated(BoundFunction):
    """Gridded KL data.

    Piecewise linear in ``s``; piecewise constant, right-continuous in ``tau``
    (the last column holds for all larger discounts).  ``values[i][j]`` is the
    value at ``(s[i], tau[j])``.
    """

    s: tuple
    tau: tuple
    values: tuple
    s_max: Optional[float] = field(default=None, init=False)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        tau = np.asarray(self.tau, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if s.ndim != 1 or tau.ndim != 1 or vals.shape != (s.size, tau.size) or s.size < 2:
            raise PreconditionError("tabulated grid shapes do not match")
        if s[0] != 0 or np.any(np.diff(s) <= 0):
            raise PreconditionError("s grid must start at 0 and be strictly increasing")
        if tau[0] != 0 or np.any(np.diff(tau) <= 0):
            raise PreconditionError("tau grid must start at 0 and be strictly increasing")
        if np.any(vals[0] != 0):
            raise PreconditionError("tabulated values must vanish at s = 0")
        if np.any(np.diff(vals, axis=0) <= 0):
            raise PreconditionError("tabulated values must be strictly increasing in s")
        if np.any(np.diff(vals, axis=1) > 0):
            raise PreconditionError("tabulated values must be nonincreasing in tau")
        object.__setattr__(self, "s_max", float(s[-1]))

    @property
    def _grid(self):
        return np.asarray(self.s, dtype=float), np.asarray(self.tau, dtype=float), np.asarray(self.values, dtype=float)

    def _columns(self, tau):
        return np.clip(np.searchsorted(np.asarray(self.tau, dtype=float), tau, side="right") - 1, 0, None)

    def _eval(self, s, tau):
        sg, _, vals = self._grid
        s, tau = np.broadcast_arrays(s, tau)
        cols = self._columns(tau)
        out = np.empty(s.shape)
        for j in np.unique(cols):
            mask = cols == j
            out[mask] = np.interp(s[mask], sg, vals[:, j])
        return out

    def _ds(self, s, tau):
        sg, _, vals = self._grid
        s, tau = np.broadcast_arrays(s, tau)
        cols = self._columns(tau)
        seg = np.clip(np.searchsorted(sg, s, side="right") - 1, 0, sg.size - 2)
        slopes = np.diff(vals, axis=0) / np.diff(sg)[:, None]
        return slopes[seg, cols]

    def scaled(self, factor):
        return Tabulated(tuple(float(x) / factor for x in self.s), self.tau, self.values)

    def to_dict(self):
        return {
            "family": "tabulated",
            "s": [float(x) for x in self.s],
            "tau": [float(x) for x in self.tau],
            "values": [[float(x) for x in row] for row in self.values],
        }


def _rename(data: dict, mapping: dict) -> dict:
    return {mapping.get(k, k): v for k, v in data.items()}


_FAMILY_KEYS = {
    "exp_power": {"c", "a", "lambda", "s_max"},
    "frac_power": {"c", "a", "b", "s_max"},
    "separable": {"k", "l", "s_max"},
    "tabulated": {"s", "tau", "values"},
}


def from_dict(data: dict) -> BoundFunction:
    """Build a :class:`BoundFunction` from its JSON form."""
    data = dict(data)
    family = data.pop("family", None)
    if family not in _FAMILY_KEYS:
        raise ConfigError(f"unknown KL family {family!r}")
    unknown = set(data) - _FAMILY_KEYS[family]
    if unknown:
        raise ConfigError(f"unknown keys for {family}: {sorted(unknown)}")
    try:
        if family == "exp_power":
            return ExpPower(data["c"], data.get("a", 1.0), data["lambda"], data.get("s_max"))
        if family == "frac_power":
            return FracPower(data["c"], data.get("a", 1.0), data["b"], data.get("s_max"))
        if family == "separable":
            return SeparableProduct(KPower.from_dict(data["k"]), LFunction.from_dict(data["l"]), data.get("s_max"))
        return Tabulated(
            tuple(data["s"]), tuple(data["tau"]), tuple(tuple(row) for row in data["values"])
        )
    except KeyError as exc:
        raise ConfigError(f"missing key {exc} for {family}") from exc


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def eval_bound(f: BoundFunction, s, tau):
    return f(s, tau)


def oplus(a, b):
    """Binary max."""
    return max(a, b)


def compose_n(f: BoundFunction, g_value: float, t: float, n: int) -> float:
    """Apply ``f(., t)`` ``n`` times starting from ``g_value``."""
    if n < 0:
        raise PreconditionError("n must be nonnegative")
    value = float(g_value)
    for _ in range(n):
        value = float(f(value, t))
    return value


def inverse_first_arg(f: BoundFunction, v: float, tau: float):
    return f.inverse(v, tau)


def discounted_max(f: BoundFunction, norms, discounts) -> float:
    """``max_i f(norms[i], discounts[i])``; zero for an empty sequence."""
    norms = np.asarray(norms, dtype=float)
    if norms.size == 0:
        return 0.0
    return float(np.max(f(norms, np.asarray(discounts, dtype=float))))


@dataclass(frozen=True)
class MaxCombination:
    """Pointwise maximum of discount-shifted bound functions."""

    terms: tuple  # of (BoundFunction, int offset)

    def __call__(self, s, tau):
        tau = np.asarray(tau, dtype=float)
        values = [np.asarray(f(s, tau + offset)) for f, offset in self.terms]
        return _result(np.maximum.reduce(values))


def lipschitz_at_origin(beta: BoundFunction, s_high: float) -> Optional[LFunction]:
    """Slope bound ``a(tau)`` with ``beta(s, tau) <= a(tau) * s`` on ``[0, s_high]``.

    Returns None when no finite slope exists.  For tabulated data the
    divergence test looks at the local power-law exponent between the first
    two positive grid points: an exponent below one means ``beta(s)/s`` grows
    without bound as ``s -> 0``.
    """
    if not s_high > 0:
        raise PreconditionError("s_high must be positive")
    if isinstance(beta, ExpPower):
        return ExpDecay(beta.c * s_high ** (beta.a - 1), beta.lam)
    if isinstance(beta, FracPower):
        return FracDecay(beta.c * s_high ** (beta.a - 1), beta.b)
    if isinstance(beta, SeparableProduct):
        if beta.k.a < 1:
            return None
        scale = beta.k.c * s_high ** (beta.k.a - 1)
        l = beta.l
        if isinstance(l, ExpDecay):
            return ExpDecay(l.coef * scale, l.lam)
        if isinstance(l, FracDecay):
            return FracDecay(l.coef * scale, l.b)
        return TabulatedDecay(l.tau, tuple(float(v) * scale for v in l.values))
    if isinstance(beta, Tabulated):
        sg, tg, vals = beta._grid
        if sg.size >= 3:
            exponent = np.log(vals[2] / vals[1]) / np.log(sg[2] / sg[1])
            if np.any(exponent < 1 - 1e-9):
                return None
        pts = np.append(sg[(sg > 0) & (sg < s_high)], min(s_high, sg[-1]))
        ratios = beta(pts[:, None], tg[None, :]) / pts[:, None]
        slopes = np.maximum.accumulate(np.max(ratios, axis=0)[::-1])[::-1]
        return TabulatedDecay(tuple(tg.tolist()), tuple(slopes.tolist()))
    raise TypeError(f"unsupported bound function {type(beta).__name__}")


def _closed_form_feasible(beta, eta, s_high):
    # beta(s, tau)/s = c s^(a-1) decay(tau) is nondecreasing in s for a >= 1,
    # so the contraction can only fail at the upper endpoint.
    scale = beta.c * s_high ** (beta.a - 1)
    return lambda taus: scale * beta.decay(taus) <= eta


def _grid_feasible(beta, eta, s_low, s_high):
    s = np.unique(np.concatenate([np.linspace(s_low, s_high, GRID_POINTS), [s_low, s_high]]))
    return lambda taus: np.all(beta(s[:, None], taus[None, :]) <= eta * s[:, None], axis=0)


def _first_feasible(feasible, limit: int, chunk: int) -> Optional[int]:
    start = 0
    while start <= limit:
        stop = min(limit, start + chunk - 1)
        taus = np.arange(start, stop + 1, dtype=float)
        ok = np.asarray(feasible(taus))
        if ok.any():
            return start + int(np.argmax(ok))
        start = stop + 1
        chunk = min(chunk * 2, 1 << 16)
    return None


def tau_min(beta: BoundFunction, eta: float, s_low: float, s_high: float, cap: int = TAU_CAP) -> int:
    """Smallest integer ``tau`` with ``beta(s, tau) <= eta * s`` on ``[s_low, s_high]``."""
    if not 0 < eta < 1:
        raise PreconditionError("eta must lie in (0, 1)")
    if not (0 <= s_low <= s_high and s_high > 0):
        raise PreconditionError("need 0 <= s_low <= s_high with s_high > 0")
    if beta.s_max is not None and s_high > beta.s_max:
        raise DomainError("s_high exceeds the domain of beta")
    if s_low == 0 and lipschitz_at_origin(beta, s_high) is None:
        raise PreconditionError("s_low = 0 requires beta to be Lipschitz at the origin")

    limit = cap
    if s_low > 0:
        # any tau with beta(s_high, tau) <= eta*s_low is feasible, so it bounds the scan
        upper = _first_feasible(lambda taus: beta(s_high, taus) <= eta * s_low, cap, 256)
        if upper is not None:
            limit = upper

    if isinstance(beta, (ExpPower, FracPower)):
        feasible, chunk = _closed_form_feasible(beta, eta, s_high), 1024
    else:
        feasible, chunk = _grid_feasible(beta, eta, s_low, s_high), 16
    found = _first_feasible(feasible, limit, chunk)
    if found is None:
        raise IterationLimit(f"no feasible tau up to the cap {cap}")
    return found


def near_integer(x: float, tol: float = 1e-9) -> float:
    """Snap ``x`` to the nearest integer when within ``tol`` (guards floor/ceil)."""
    r = round(x)
    return float(r) if abs(x - r) <= tol * max(1.0, abs(x)) else x


def log_base(x: float, base: float) -> float:
    return near_integer(math.log(x) / math.log(base))


def is_kl_on_grid(f: BoundFunction, s_points: Sequence[float], taus: Sequence[float]) -> bool:
    """Sampled K (strictly increasing in s, zero at zero) and L (nonincreasing) check."""
    s = np.sort(np.asarray(s_points, dtype=float))
    t = np.sort(np.asarray(taus, dtype=float))
    vals = np.asarray(f(s[:, None], t[None, :]))
    zero_ok = np.all(vals[s == 0] == 0)
    k_ok = np.all(np.diff(vals[s > 0], axis=0) > 0) if np.count_nonzero(s > 0) > 1 else True
    l_ok = np.all(np.diff(vals, axis=1) <= 0)
    return bool(zero_ok and k_ok and l_ok)

