"""Sufficient horizon sizes and the MHE error-bound maps.

Includes the exponential-stability horizon, the contraction horizon
``min{tau : beta_x(s, tau) <= eta s}``, closed forms for power-law bounds and
the large-t analysis of how the error bound factor changes with the horizon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kl_calculus as klc
from .errors import ConfigError, PreconditionError

METHODS = ("rges_formula", "tau_min", "closed_form_exp", "closed_form_frac")


@dataclass(frozen=True)
class Monotonicity:
    decreasing: bool
    threshold: float


@dataclass(frozen=True)
class HorizonReport:
    T_min: int
    method: str
    inputs: dict = field(default_factory=dict)
    raw: Optional[float] = None
    monotonicity: Optional[Monotonicity] = None

    def __post_init__(self):
        if not (isinstance(self.T_min, int) and self.T_min >= 1):
            raise PreconditionError("T_min must be a positive integer")
        if self.method not in METHODS:
            raise PreconditionError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.monotonicity is None:
            out.pop("monotonicity")
        if self.raw is None:
            out.pop("raw")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HorizonReport":
        data = dict(data)
        unknown = set(data) - {"T_min", "method", "inputs", "raw", "monotonicity"}
        if unknown:
            raise ConfigError(f"unknown horizon report keys {sorted(unknown)}")
        mono = data.pop("monotonicity", None)
        try:
            return cls(monotonicity=Monotonicity(**mono) if mono is not None else None, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def rges_min_horizon(c_x: float, lam: float) -> int:
    """``max(1, floor(log_lam(1/c_x)) + 1)``."""
    if not c_x > 0 or not 0 < lam < 1:
        raise PreconditionError("need c_x > 0 and lam in (0, 1)")
    if c_x <= 1:
        return 1
    T = max(1, math.floor(klc.log_base(1.0 / c_x, lam)) + 1)
    # the per-step contraction that makes floor(t/T) blocks harmless
    assert c_x ** (1.0 / T) * lam <= 1.0 + 1e-12, (c_x, lam, T)
    return T


def ras_min_horizon(beta_x: klc.BoundFunction, eta: float, epsilon: float, s_bar: float) -> int:
    if epsilon < 0 or not s_bar > 0:
        raise PreconditionError("need epsilon >= 0 and s_bar > 0")
    if epsilon > eta * s_bar:
        raise PreconditionError("epsilon must not exceed eta * s_bar")
    return max(1, klc.tau_min(beta_x, eta, epsilon / eta, s_bar))


def _check_family(family: str, c: float, a: float, b: float):
    if family not in ("exp", "frac"):
        raise PreconditionError(f"unknown family {family!r}")
    if not c > 0 or a < 1:
        raise PreconditionError("need c > 0 and a >= 1")
    if family == "exp" and not 0 < b < 1:
        raise PreconditionError("exponential decay rate must lie in (0, 1)")
    if family == "frac" and not b > 0:
        raise PreconditionError("power-law decay exponent must be positive")


def closed_form_raw(family: str, c: float, a: float, b: float, eta: float, s_bar: float) -> int:
    """Unclamped closed-form horizon; may be zero or negative."""
    _check_family(family, c, a, b)
    if not 0 < eta < 1 or not s_bar > 0:
        raise PreconditionError("need eta in (0, 1) and s_bar > 0")
    gain = c * s_bar ** (a - 1)
    if family == "exp":
        return math.ceil(klc.log_base(eta / gain, b))
    return math.ceil(klc.near_integer((gain / eta) ** (1.0 / b) - 1.0))


def closed_form_horizon(family: str, c: float, a: float, b: float, eta: float, s_bar: float) -> int:
    return max(closed_form_raw(family, c, a, b, eta, s_bar), 1)


def closed_form_report(family: str, c: float, a: float, b: float, eta: float, s_bar: float) -> HorizonReport:
    raw = closed_form_raw(family, c, a, b, eta, s_bar)
    inputs = {"family": family, "c": c, "a": a, "b": b, "eta": eta, "s_bar": s_bar}
    return HorizonReport(max(raw, 1), f"closed_form_{family}", inputs, raw=float(raw))


@dataclass(frozen=True)
class RgesBounds:
    """Bound maps of an exponentially stable MHE with horizon ``T``.

    ``x(s, t) = c_x^(floor(t/T)+1) s lam^t`` and
    ``w(s, t, tau) = c_x^floor((t-tau)/T) c_w s lam^(t-tau-1)`` (same for v).
    """

    c_x: float
    c_w: float
    c_v: float
    lam: float
    T: int

    def __post_init__(self):
        if not self.T >= 1:
            raise PreconditionError("T must be >= 1")

    def x(self, s, t):
        t = np.asarray(t, dtype=float)
        return self.c_x ** (np.floor(t / self.T) + 1) * np.asarray(s, dtype=float) * self.lam**t

    def _gap(self, coef, s, t, tau):
        gap = np.asarray(t, dtype=float) - np.asarray(tau, dtype=float)
        return self.c_x ** np.floor(gap / self.T) * coef * np.asarray(s, dtype=float) * self.lam ** (gap - 1)

    def w(self, s, t, tau):
        return self._gap(self.c_w, s, t, tau)

    def v(self, s, t, tau):
        return self._gap(self.c_v, s, t, tau)

    def error_bound(self, d0: float, w_norms, v_norms, t: int) -> float:
        """Max of the three maps over the first ``t`` disturbance norms."""
        bound = float(self.x(d0, t))
        if t:
            tau = np.arange(t)
            bound = max(bound, float(np.max(self.w(np.asarray(w_norms[:t]), t, tau))))
            bound = max(bound, float(np.max(self.v(np.asarray(v_norms[:t]), t, tau))))
        return bound


def rges_bound_functions(c_x: float, c_w: float, c_v: float, lam: float, T: int) -> RgesBounds:
    return RgesBounds(c_x, c_w, c_v, lam, T)


def contraction_rate(bounds: RgesBounds, t_max: int = 200) -> float:
    """``max_t (c_x^floor(t/T) lam^t)^(1/t)``; below one when T is long enough."""
    t = np.arange(1, t_max + 1, dtype=float)
    return float(np.max((bounds.c_x ** np.floor(t / bounds.T) * bounds.lam**t) ** (1.0 / t)))


def s_bar(beta_x, beta_w, beta_v, delta0: float, delta_w: float, delta_v: float) -> float:
    """Largest initial-window uncertainty: ``beta_x(d0,0) (+) beta_w(dw,0) (+) beta_v(dv,0)``."""
    values = [float(beta_x(delta0, 0)), float(beta_w(delta_w, 0)), float(beta_v(delta_v, 0))]
    if not all(math.isfinite(v) for v in values):
        raise PreconditionError("s_bar needs finite bounds on the prior error and the disturbances")
    return max(values)


def error_bound_factor(eta: float, phi: klc.LFunction, T: int, T_low: int, t: int) -> float:
    """``(eta phi(T - T_low))^floor(t/T)``."""
    if T < T_low or T < 1:
        raise PreconditionError("need T >= max(T_low, 1)")
    if not 0 < eta < 1:
        raise PreconditionError("eta must lie in (0, 1)")
    if abs(float(phi(0)) - 1.0) > 1e-12:
        raise PreconditionError("phi must satisfy phi(0) = 1")
    return float((eta * float(phi(T - T_low))) ** (t // T))


def exp_threshold(b1: float, eta: float) -> int:
    return 1 + math.ceil(klc.log_base(eta, b1))


def frac_threshold(b2: float, eta: float, T: int) -> float:
    # from the sign of kappa with phi(T) = (T+1)^(-b2)
    return eta ** (-1.0 / b2) * (T + 1) * math.exp(-T / (T + 1)) - 1.0


def monotonicity_condition(family: str, b: float, eta: float, T_low: int, T: Optional[int] = None) -> Monotonicity:
    """Sufficient condition for the large-t bound factor to decrease in ``T``."""
    if not 0 < eta < 1:
        raise PreconditionError("eta must lie in (0, 1)")
    if family == "exp":
        if not 0 < b < 1:
            raise PreconditionError("b must lie in (0, 1)")
        threshold = exp_threshold(b, eta)
        ok = T_low >= threshold and (T is None or T >= T_low)
        return Monotonicity(bool(ok), float(threshold))
    if family == "frac":
        if not b > 0 or T is None:
            raise PreconditionError("power-law condition needs b > 0 and a horizon T")
        threshold = frac_threshold(b, eta, T)
        return Monotonicity(bool(T >= T_low > threshold), threshold)
    raise PreconditionError(f"unknown family {family!r}")


def kappa(family: str, b: float, eta: float, T: float, T_low: float) -> float:
    """``phi'(T) - phi(T)/T * ln(eta phi(T) / phi(T_low))``; negative means decreasing."""
    if family == "exp":
        phi = lambda x: b**x
        dphi = b**T * math.log(b)
    elif family == "frac":
        phi = lambda x: (x + 1.0) ** (-b)
        dphi = -b * (T + 1.0) ** (-b - 1.0)
    else:
        raise PreconditionError(f"unknown family {family!r}")
    return dphi - phi(T) / T * math.log(eta * phi(T) / phi(T_low))


def fitted_exp_constants(alpha: klc.ExpPower, rho: klc.ExpPower):
    """Constants ``(c', lam')`` with ``alpha(2s, t) (+) rho(s, t) <= c' s lam'^t``."""
    if alpha.a != 1 or rho.a != 1:
        raise PreconditionError("exponential fitting needs linear-in-s bounds")
    return max(2 * alpha.c, rho.c), max(alpha.lam, rho.lam)
