"""Convex energy densities of linear growth and their derived scalar functions.

A density is a function ``g`` of ``t = |Z|`` with ``g'(0) = 0``, ``g'' > 0``,
linear growth, and an integrable ``s g''(s)``.  Everything downstream is
expressed through

* ``xi(t) = g'(t) / t``
* ``bracket(t) = g(t) - t g'(t)``
* ``vartheta(t) = bracket(t) - xi(t)``
* ``theta(t)``, the conformality defect factor.

All evaluation methods are vectorised over ``t``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

# below this, g'(t)/t is replaced by the trapezoid average of g''
XI_TAYLOR_T = 1e-6
# below this, (g''(t) - xi(t)) / t loses too many digits; use g''' instead
XI_PRIME_TAYLOR_T = 1e-4
G3_FD_STEP = 1e-4
TAIL_EXPONENT_MARGIN = 1e-2
SLOPE_TOL = 1e-8
LIMIT_TOL = 1e-8

ArrayFn = Callable[[np.ndarray], np.ndarray]


class DensityValidationError(ValueError):
    """The density violates the standing hypotheses (convexity, growth, integrability)."""

    def __init__(self, message: str, failures: Sequence[str] = ()):
        super().__init__(message)
        self.failures = list(failures)


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


@dataclass(frozen=True)
class EnergyDensity:
    kind: str
    eval_g: ArrayFn
    eval_g1: ArrayFn
    eval_g2: ArrayFn
    eval_g3: Optional[ArrayFn] = None
    eval_bracket: Optional[ArrayFn] = None
    eval_h: Optional[ArrayFn] = None
    mu_exponent: Optional[float] = None
    growth_bounds: tuple[float, float, float, float] = (1.0, 1.0, 0.0, 1.0)
    normalization_shift: float = 0.0
    slope_at_infinity: float = 1.0
    ellipticity_constants: Optional[tuple[float, float]] = None
    params: dict = field(default_factory=dict, compare=False)

    # -- primitives -------------------------------------------------------
    def g(self, t):
        return _out(self.eval_g(np.asarray(t, dtype=float)))

    def g1(self, t):
        return _out(self.eval_g1(np.asarray(t, dtype=float)))

    def g2(self, t):
        return _out(self.eval_g2(np.asarray(t, dtype=float)))

    def g3(self, t):
        t = np.asarray(t, dtype=float)
        if self.eval_g3 is not None:
            return _out(self.eval_g3(t))
        lo = np.maximum(t - G3_FD_STEP, 0.0)
        hi = t + G3_FD_STEP
        return _out((self.eval_g2(hi) - self.eval_g2(lo)) / (hi - lo))

    def bracket(self, t):
        """``g(t) - t g'(t)``."""
        t = np.asarray(t, dtype=float)
        if self.eval_bracket is not None:
            return _out(self.eval_bracket(t))
        return _out(self.eval_g(t) - t * self.eval_g1(t))

    # -- derived quantities -------------------------------------------------
    def xi(self, t):
        t = np.asarray(t, dtype=float)
        small = t < XI_TAYLOR_T
        safe = np.where(small, 1.0, t)
        ratio = self.eval_g1(safe) / safe
        taylor = 0.5 * (self.eval_g2(np.zeros_like(t)) + self.eval_g2(t))
        return _out(np.where(small, taylor, ratio))

    def xi_prime(self, t):
        t = np.asarray(t, dtype=float)
        small = t < XI_PRIME_TAYLOR_T
        safe = np.where(small, 1.0, t)
        direct = (self.eval_g2(safe) - np.asarray(self.xi(safe))) / safe
        # xi'(t) = t^-2 int_0^t r g'''(r) dr; the weight r has its centroid at 2t/3
        taylor = 0.5 * np.asarray(self.g3(2.0 * t / 3.0))
        return _out(np.where(small, taylor, direct))

    def vartheta(self, t):
        return _out(np.asarray(self.bracket(t)) - np.asarray(self.xi(t)))

    def h(self, t):
        """Slope deficit ``1 - g'(t)``."""
        t = np.asarray(t, dtype=float)
        if self.eval_h is not None:
            return _out(self.eval_h(t))
        return _out(1.0 - self.eval_g1(t))

    def remainder(self, t):
        """``R(t)`` with ``t R(t) = g'(t) [g(t) - t g'(t)]``."""
        return _out(np.asarray(self.xi(t)) * np.asarray(self.bracket(t)))

    def theta(self, t):
        """Conformality defect factor ``[1 - g g'/t] + [B - xi] [2 + B]``, ``B = g - t g'``.

        ``1 - g g'/t`` is evaluated as ``h (1 + g') - B xi`` (using
        ``g = B + t g'``), which avoids cancelling two O(1) terms at large t.
        """
        t = np.asarray(t, dtype=float)
        g1 = np.asarray(self.g1(t))
        xi = np.asarray(self.xi(t))
        br = np.asarray(self.bracket(t))
        h = np.asarray(self.h(t))
        return _out(h * (1.0 + g1) - br * xi + (br - xi) * (2.0 + br))

    def theta_tilde(self, t):
        """The same factor in its unsimplified form, ``-xi [2(1+g) - xi t^2] + (1 + g - xi t^2)^2``.

        ``xi t^2`` is written ``t g'`` and the squared term as ``(1 + B)^2``.
        """
        t = np.asarray(t, dtype=float)
        g = np.asarray(self.g(t))
        g1 = np.asarray(self.g1(t))
        xi = np.asarray(self.xi(t))
        core = 1.0 + np.asarray(self.bracket(t))
        return _out(-xi * (2.0 * (1.0 + g) - t * g1) + core**2)


@dataclass(frozen=True)
class DensityDiagnostics:
    t: float
    xi: float
    vartheta: float
    h: float
    remainder: float
    bracket: float
    theta: float


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    partial_integral: float = math.nan
    tail_exponent: float = math.nan
    tail_bound: float = math.nan

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": dict(self.checks),
            "failures": list(self.failures),
            "partial_integral": _json_float(self.partial_integral),
            "tail_exponent": _json_float(self.tail_exponent),
            "tail_bound": _json_float(self.tail_bound),
        }


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


# -- built-in families ------------------------------------------------------

def minimal_density() -> EnergyDensity:
    """``sqrt(1 + t^2)``: the area integrand."""

    def g(t):
        return np.hypot(1.0, t)

    def g1(t):
        return t / np.hypot(1.0, t)

    def g2(t):
        return np.hypot(1.0, t) ** -3

    def g3(t):
        return -3.0 * t * np.hypot(1.0, t) ** -5

    def bracket(t):
        return 1.0 / np.hypot(1.0, t)

    def h(t):
        r = np.hypot(1.0, t)
        return 1.0 / (r * (r + t))

    return EnergyDensity(
        kind="minimal",
        eval_g=g,
        eval_g1=g1,
        eval_g2=g2,
        eval_g3=g3,
        eval_bracket=bracket,
        eval_h=h,
        mu_exponent=3.0,
        growth_bounds=(1.0, 1.0, 0.0, 1.0),
        slope_at_infinity=1.0,
        ellipticity_constants=(1.0, 1.0),
    )


def mu_density(mu: float) -> EnergyDensity:
    """``t + (1+t)^(2-mu) / (mu-2)`` for ``mu > 1``, ``mu != 2``.

    No integrability check happens here; see :func:`make_builtin`.
    """
    mu = float(mu)
    if not mu > 1.0 or mu == 2.0:
        raise ValueError(f"the mu family needs mu > 1 and mu != 2, got {mu!r}")
    m2 = mu - 2.0

    def g(t):
        return t + (1.0 + t) ** (2.0 - mu) / m2

    def g1(t):
        return -np.expm1((1.0 - mu) * np.log1p(t))

    def g2(t):
        return (mu - 1.0) * (1.0 + t) ** (-mu)

    def g3(t):
        return -mu * (mu - 1.0) * (1.0 + t) ** (-mu - 1.0)

    def bracket(t):
        return (1.0 + t) ** (1.0 - mu) * ((mu - 1.0) * t + 1.0) / m2

    def h(t):
        return (1.0 + t) ** (1.0 - mu)

    if mu > 2.0:
        growth = (1.0, 1.0, 0.0, 1.0 / m2)
        ellipticity = ((mu - 1.0) / m2, 1.0)
    else:
        # g >= t/2 - b with b attained where g'(t) = 1/2
        ts = 2.0 ** (1.0 / (mu - 1.0)) - 1.0
        growth = (0.5, 1.0, float(0.5 * ts - g(ts)), 0.0)
        ellipticity = None
    return EnergyDensity(
        kind="mu",
        eval_g=g,
        eval_g1=g1,
        eval_g2=g2,
        eval_g3=g3,
        eval_bracket=bracket,
        eval_h=h,
        mu_exponent=mu,
        growth_bounds=growth,
        slope_at_infinity=1.0,
        ellipticity_constants=ellipticity,
        params={"mu": mu},
    )


def mu_hat_density(mu: float, unit_slope: bool = False) -> EnergyDensity:
    """Double integral of ``(1 + tau^2)^(-mu/2)`` for ``mu > 2``.

    ``g'`` is an incomplete beta function, ``g''`` is the integrand, and
    ``g`` follows from integrating ``s g''(s)`` by parts in closed form.  The
    slope at infinity is ``B(1/2, (mu-1)/2) / 2``, which equals one only for
    ``mu = 3``; ``unit_slope=True`` divides the density by it.
    """
    mu = float(mu)
    if not mu > 2.0:
        raise ValueError(f"the mu_hat family needs mu > 2, got {mu!r}")
    a, b = 0.5, 0.5 * (mu - 1.0)
    slope = 0.5 * float(special.beta(a, b))
    if abs(slope - 1.0) <= 1e-14:
        slope = 1.0
    scale = 1.0 / slope if unit_slope else 1.0
    m2 = mu - 2.0

    def g1(t):
        t2 = t * t
        near = slope * special.betainc(a, b, t2 / (1.0 + t2))
        # complement form keeps digits when t2/(1+t2) rounds towards 1
        far = slope * (1.0 - special.betainc(b, a, 1.0 / (1.0 + t2)))
        return scale * np.where(t <= 1.0, near, far)

    def h(t):
        t2 = t * t
        tail = scale * slope * special.betainc(b, a, 1.0 / (1.0 + t2))
        return np.where(t <= 1.0, 1.0 - g1(t), (1.0 - scale * slope) + tail)

    def g2(t):
        return scale * (1.0 + t * t) ** (-0.5 * mu)

    def g3(t):
        return -scale * mu * t * (1.0 + t * t) ** (-0.5 * mu - 1.0)

    def bracket(t):
        # g - t g' = -int_0^t s g''(s) ds
        return scale * np.expm1((1.0 - 0.5 * mu) * np.log1p(t * t)) / m2

    def g(t):
        return t * g1(t) + bracket(t)

    eff_slope = slope * scale
    growth = (eff_slope, eff_slope, scale * (1.0 / m2 + max(slope, 1.0 / (mu - 1.0))), 0.0)
    ellipticity = None
    if eff_slope == 1.0:
        # valid once the shift K = -1/(mu-2) (scaled) has been removed
        ellipticity = (scale / m2, scale / (mu - 1.0))
    return EnergyDensity(
        kind="mu_hat",
        eval_g=g,
        eval_g1=g1,
        eval_g2=g2,
        eval_g3=g3,
        eval_bracket=bracket,
        eval_h=h,
        mu_exponent=mu,
        growth_bounds=growth,
        slope_at_infinity=eff_slope,
        ellipticity_constants=ellipticity,
        params={"mu": mu, "unit_slope": unit_slope},
    )


BUILTIN_KINDS = ("minimal", "mu", "mu_hat")


def make_builtin(kind: str, mu: Optional[float] = None, *, unit_slope: bool = False) -> EnergyDensity:
    """Construct and validate one of the built-in families.

    Raises :class:`DensityValidationError` if ``mu <= 2`` (``s g''(s)`` is
    then not integrable) or if validation fails for any other reason.
    """
    if kind == "minimal":
        d = minimal_density()
    elif kind in ("mu", "mu_hat"):
        if mu is None:
            raise ValueError(f"density kind {kind!r} needs a mu parameter")
        mu = float(mu)
        if mu <= 2.0:
            msg = (f"mu = {mu!r} <= 2: int_0^inf s g''(s) ds diverges, "
                   "so g(t) - t g'(t) has no finite limit")
            raise DensityValidationError(msg, ["integrability"])
        d = mu_density(mu) if kind == "mu" else mu_hat_density(mu, unit_slope=unit_slope)
    else:
        raise ValueError(f"unknown density kind {kind!r}; expected one of {BUILTIN_KINDS}")
    report = validate(d)
    if not report.passed:
        raise DensityValidationError("; ".join(report.failures), report.failures)
    return d


def density_from_config(cfg: dict) -> EnergyDensity:
    """Build a density from ``{"kind": ..., "mu": ..., "unit_slope": ...}``.

    Unlike :func:`make_builtin` this does not reject ``mu <= 2`` up front, so
    that :func:`validate` can report on it; the caller decides what to do.
    """
    kind = cfg.get("kind")
    mu = cfg.get("mu")
    if kind == "minimal":
        return minimal_density()
    if kind == "mu":
        if mu is None:
            raise ValueError("density kind 'mu' needs a mu parameter")
        return mu_density(mu)
    if kind == "mu_hat":
        if mu is None:
            raise ValueError("density kind 'mu_hat' needs a mu parameter")
        return mu_hat_density(mu, unit_slope=bool(cfg.get("unit_slope", False)))
    raise ValueError(f"unknown density kind {kind!r}; expected one of {BUILTIN_KINDS}")


# -- validation and normalisation -------------------------------------------

def default_sample_grid() -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-4, 4, 801)])


def validate(d: EnergyDensity, sample_grid: Optional[Sequence[float]] = None) -> ValidationReport:
    """Check the standing hypotheses on a sample grid; never raises."""
    rep = ValidationReport()
    t = default_sample_grid() if sample_grid is None else np.asarray(sample_grid, dtype=float)

    if t.size == 0 or np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] < 1e3:
        rep.checks["sample_grid"] = False
        rep.failures.append("sample_grid: need a nonempty increasing grid in [0, T] with T >= 1e3")
        return rep
    rep.checks["sample_grid"] = True

    g = np.asarray(d.g(t))
    g1 = np.asarray(d.g1(t))
    g2 = np.asarray(d.g2(t))

    ok = abs(d.g1(0.0)) <= 1e-12
    rep.checks["g1_at_zero"] = ok
    if not ok:
        rep.failures.append(f"g1_at_zero: g'(0) = {d.g1(0.0)!r} != 0")

    pos = t > 0
    ok = bool(np.all(g2[pos] > 0))
    rep.checks["convexity"] = ok
    if not ok:
        bad = t[pos][g2[pos] <= 0][0]
        rep.failures.append(f"convexity: g''({bad!r}) <= 0")

    a, A, b, B = d.growth_bounds
    slack = 1e-12 * (1.0 + np.abs(g))
    ok = a > 0 and A > 0 and b >= 0 and B >= 0 and bool(
        np.all(a * t - b <= g + slack) and np.all(g <= A * t + B + slack))
    rep.checks["growth"] = ok
    if not ok:
        rep.failures.append(f"growth: a t - b <= g(t) <= A t + B fails for (a, A, b, B) = {d.growth_bounds}")

    # int_0^T s g''(s) ds = g(0) - [g(T) - T g'(T)] (integration by parts)
    T = t[-1]
    rep.partial_integral = float(d.g(0.0) - d.bracket(T))
    tail = t[(t >= T / 10.0) & (t > 0)]
    sg2 = tail * np.asarray(d.g2(tail))
    if tail.size >= 2 and np.all(sg2 > 0):
        p = float(np.polyfit(np.log(tail), np.log(sg2), 1)[0])
        rep.tail_exponent = p
        finite = p < -1.0 - TAIL_EXPONENT_MARGIN
        rep.tail_bound = float(T * d.g2(T) * T / (-p - 1.0)) if finite else math.inf
    else:
        finite = False
    rep.checks["integrability"] = finite
    if not finite:
        rep.failures.append(
            f"integrability: s g''(s) decays like s^{rep.tail_exponent:.4g}, "
            "so int_0^inf s g''(s) ds is not finite")

    br = g - t * g1 if d.eval_bracket is None else np.asarray(d.bracket(t))
    steps = np.diff(br)
    ok = bool(np.all(steps <= 1e-12 * np.maximum(1.0, np.abs(br[1:]))))
    rep.checks["bracket_monotone"] = ok
    if not ok:
        rep.failures.append("bracket_monotone: g(t) - t g'(t) increases somewhere on the grid")
    return rep


def _aitken_limit(fn: Callable[[float], float], t_ref: float, levels: int = 3) -> float:
    """Limit of ``fn`` at infinity by iterated Aitken extrapolation.

    ``fn`` is sampled on the geometric sequence ``t_ref * 2**k``; each Aitken
    sweep removes one power-law correction term.
    """
    seq = [float(fn(t_ref * 2.0**k)) for k in range(2 * levels + 1)]
    while len(seq) >= 3:
        nxt = []
        for b0, b1, b2 in zip(seq, seq[1:], seq[2:]):
            d1, d2 = b1 - b0, b2 - b1
            denom = d2 - d1
            nxt.append(b2 if denom == 0.0 else b2 - d2 * d2 / denom)
        seq = nxt
    return seq[-1]


def bracket_limit(d: EnergyDensity, t_ref: float = 1e6) -> float:
    """Estimate ``lim_{t->inf} [g(t) - t g'(t)]``."""
    return _aitken_limit(d.bracket, t_ref)


def normalize(d: EnergyDensity, t_ref: float = 1e6) -> EnergyDensity:
    """Shift ``g`` by ``K = lim [g - t g']`` so that the limit becomes zero.

    The density must already have unit slope at infinity; rescaling would
    change every derived quantity, so it is left to the caller.
    """
    if abs(d.slope_at_infinity - 1.0) > SLOPE_TOL:
        raise DensityValidationError(
            f"g'_inf = {d.slope_at_infinity!r}; rescale the density to unit slope first",
            ["slope_at_infinity"])
    K = bracket_limit(d, t_ref)
    if not math.isfinite(K):
        raise DensityValidationError("g(t) - t g'(t) has no finite limit", ["integrability"])
    if abs(K) <= 1e-14 * max(1.0, abs(float(d.g(0.0)))):
        return d

    g0, br0 = d.eval_g, d.bracket

    def g(t):
        return g0(t) - K

    def bracket(t):
        return np.asarray(br0(t)) - K

    out = replace(d, eval_g=g, eval_bracket=bracket,
                  normalization_shift=d.normalization_shift + K)
    residual = bracket_limit(out, t_ref)
    if abs(residual) > LIMIT_TOL:
        raise DensityValidationError(
            f"normalised limit of g - t g' is {residual!r}, not 0", ["normalization"])
    return out


def diagnostics(d: EnergyDensity, t: float) -> DensityDiagnostics:
    t = float(t)
    return DensityDiagnostics(
        t=t,
        xi=d.xi(t),
        vartheta=d.vartheta(t),
        h=d.h(t),
        remainder=d.remainder(t),
        bracket=d.bracket(t),
        theta=d.theta(t),
    )


DIAGNOSTIC_COLUMNS = ("t", "g", "g1", "g2", "xi", "vartheta", "h", "R", "theta")


def diagnostics_table(d: EnergyDensity, ts: Sequence[float]) -> np.ndarray:
    t = np.asarray(ts, dtype=float)
    cols = [t, d.g(t), d.g1(t), d.g2(t), d.xi(t), d.vartheta(t), d.h(t), d.remainder(t), d.theta(t)]
    return np.column_stack([np.broadcast_to(c, t.shape) for c in cols])


def write_diagnostics_csv(d: EnergyDensity, ts: Sequence[float], path) -> None:
    table = diagnostics_table(d, ts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for row in table:
            w.writerow([f"{v:.17g}" for v in row])
