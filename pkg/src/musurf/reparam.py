"""The gradient map ``Lambda = id + grad E``, its inverse, the reparametrization
``chi = (Lambda^-1, u o Lambda^-1)`` and the conformality defect ``Theta``.

Pointwise closed forms, with ``t = |grad u|`` and ``B = g - t g'``::

    D Lambda   = [[1 + phi1, phi2], [psi1, 1 + psi2]]
    det        = (1 + B) (1 + B + xi t^2)
    X          = (1 + g - xi u_x^2, -xi u_x u_y, u_x (1 + B))
    Y          = (-xi u_x u_y, 1 + g - xi u_y^2, u_y (1 + B))
    X.Y        = u_x u_y Theta(t),  |X|^2 - |Y|^2 = (u_x^2 - u_y^2) Theta(t)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog

from .densities import EnergyDensity
from .fields import GridSpec, ScalarField, gradient, interpolate
from .forms import coefficient_fields
from .potential import PotentialSet
from .solver import SurfaceSolution

INVERSE_TOL = 1e-10
INVERSE_MAX_ITERS = 50
CHI_FD_STEP = 1e-6
ZERO_THETA_TOL = 1e-12


class InversionError(ValueError):
    """Raised when ``Lambda^-1`` cannot be evaluated at a target."""

    def __init__(self, msg, residual=float("nan")):
        super().__init__(msg)
        self.residual = residual


# -- pointwise algebra --------------------------------------------------------

def det_closed_form(d: EnergyDensity, t):
    """``det D Lambda`` as a function of ``t = |grad u|``."""
    t = np.asarray(t, dtype=float)
    B = np.asarray(d.bracket(t))
    return (1.0 + B) * (1.0 + B + np.asarray(d.xi(t)) * t * t)


def det_lower_bound(d: EnergyDensity, t):
    """``1 + xi(t) (1 + t^2)``."""
    t = np.asarray(t, dtype=float)
    return 1.0 + np.asarray(d.xi(t)) * (1.0 + t * t)


def xy_vectors(d: EnergyDensity, ux, uy) -> tuple[np.ndarray, np.ndarray]:
    """``X`` and ``Y`` stacked along a leading axis of length 3."""
    ux = np.asarray(ux, dtype=float)
    uy = np.asarray(uy, dtype=float)
    t = np.hypot(ux, uy)
    g = np.asarray(d.g(t))
    xi = np.asarray(d.xi(t))
    lift = 1.0 + np.asarray(d.bracket(t))
    mixed = -xi * ux * uy
    X = np.stack([1.0 + g - xi * ux * ux, mixed, ux * lift])
    Y = np.stack([mixed, 1.0 + g - xi * uy * uy, uy * lift])
    return X, Y


def defect_identities(d: EnergyDensity, ux, uy) -> dict:
    """Both sides of the two conformality relations and their scaled residuals."""
    ux = np.asarray(ux, dtype=float)
    uy = np.asarray(uy, dtype=float)
    X, Y = xy_vectors(d, ux, uy)
    theta = np.asarray(d.theta(np.hypot(ux, uy)))
    dot = np.sum(X * Y, axis=0)
    diff = np.sum(X * X, axis=0) - np.sum(Y * Y, axis=0)
    scale = np.maximum(1.0, np.linalg.norm(X, axis=0) * np.linalg.norm(Y, axis=0))
    return {
        "dot": dot,
        "diff": diff,
        "dot_rhs": ux * uy * theta,
        "diff_rhs": (ux * ux - uy * uy) * theta,
        "res_dot": (dot - ux * uy * theta) / scale,
        "res_diff": (diff - (ux * ux - uy * uy) * theta) / scale,
        "theta": theta,
    }


def pi_matrix(d: EnergyDensity, ux, uy):
    """Entries ``(p11, p12, p21, p22)`` of the adjugate ``Pi`` of ``D Lambda``."""
    c = coefficient_fields(d, ux, uy)
    return 1.0 + c["psi2"], -c["phi2"], -c["psi1"], 1.0 + c["phi1"]


def inverse_jacobian_error(d: EnergyDensity, ux, uy) -> float:
    """Max entry of ``Pi D Lambda / det - I`` at the given gradients."""
    c = coefficient_fields(d, ux, uy)
    j11, j12, j21, j22 = 1.0 + c["phi1"], c["phi2"], c["psi1"], 1.0 + c["psi2"]
    p11, p12, p21, p22 = pi_matrix(d, ux, uy)
    det = det_closed_form(d, np.hypot(ux, uy))
    e11 = (p11 * j11 + p12 * j21) / det - 1.0
    e12 = (p11 * j12 + p12 * j22) / det
    e21 = (p21 * j11 + p22 * j21) / det
    e22 = (p21 * j12 + p22 * j22) / det - 1.0
    return float(max(np.max(np.abs(e)) for e in (e11, e12, e21, e22)))


def theta_tilde_error(d: EnergyDensity, t) -> float:
    """Max relative gap between the two expressions for the defect factor.

    The gap is measured against the largest of ``|Theta|``, ``|Theta~|`` and
    ``(1 + B)^2``, the size of the terms summed in ``Theta~``.  Where the
    factor itself is tiny (or identically zero) this reports the roundoff of
    the summation instead of dividing noise by noise.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(d.theta(t))
    b = np.asarray(d.theta_tilde(t))
    terms = (1.0 + np.asarray(d.bracket(t))) ** 2
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), terms)
    return float(np.max(np.abs(a - b) / scale))


# -- grid objects -------------------------------------------------------------

def lambda_map(ps: PotentialSet) -> tuple[ScalarField, ScalarField]:
    """``Lambda(x, y) = (x + b, y - a)`` at every node."""
    a, b = ps.param_pair()
    X, Y = ps.spec.mesh()
    return ScalarField(ps.spec, X + b), ScalarField(ps.spec, Y - a)


def det_dlambda(sol: SurfaceSolution, ps: PotentialSet | None = None) -> ScalarField:
    """Closed-form ``det D Lambda`` at every node.

    With ``ps`` the determinant of the finite-difference Jacobian of the
    integrated map is compared on interior nodes and the max gap is stored in
    ``meta["fd_mismatch"]``.
    """
    t = np.hypot(sol.ux.values, sol.uy.values)
    det = det_closed_form(sol.density, t)
    meta = {}
    if ps is not None:
        l1, l2 = lambda_map(ps)
        l1x, l1y = gradient(l1)
        l2x, l2y = gradient(l2)
        fd = l1x.values * l2y.values - l1y.values * l2x.values
        meta["fd_mismatch"] = float(np.max(np.abs(fd - det)[1:-1, 1:-1]))
    return ScalarField(sol.spec, det, meta)


class DecayFit(NamedTuple):
    d1: float
    d2: float
    slope: float
    identically_zero: bool
    t: np.ndarray
    theta: np.ndarray
    envelope: np.ndarray


def decay_fit(d: EnergyDensity, t_range=(1e2, 1e4), n_samples: int = 200) -> DecayFit:
    """Power-law decay of the defect factor on log-spaced samples.

    The slope comes from a least-squares fit of ``log|Theta|`` against
    ``log t`` on the upper decade of the range.  ``(d1, d2) >= 0`` is the
    envelope ``d1 t^(2-mu) + d2 / t`` of smallest ``d1 + d2`` lying above
    ``|Theta|`` at every sample.
    """
    t_min, t_max = map(float, t_range)
    if not (t_min >= 1.0 and t_max > t_min):
        raise ValueError("decay_fit needs 1 <= t_min < t_max")
    if n_samples < 4:
        raise ValueError("decay_fit needs at least 4 samples")
    t = np.logspace(math.log10(t_min), math.log10(t_max), n_samples)
    theta = np.asarray(d.theta(t), dtype=float)
    mag = np.abs(theta)
    if np.max(mag) <= ZERO_THETA_TOL:
        return DecayFit(0.0, 0.0, float("nan"), True, t, theta, np.zeros_like(t))

    upper = t >= t_max / 10.0
    if np.count_nonzero(upper) < 2 or np.any(mag[upper] == 0.0):
        raise ValueError("defect factor vanishes on the fit window; cannot fit a slope")
    slope = float(np.polyfit(np.log(t[upper]), np.log(mag[upper]), 1)[0])

    mu = d.mu_exponent if d.mu_exponent is not None else 3.0
    basis = np.column_stack([t ** (2.0 - mu), 1.0 / t])
    res = linprog(c=[1.0, 1.0], A_ub=-basis, b_ub=-mag, bounds=[(0, None), (0, None)],
                  method="highs")
    if not res.success:
        raise RuntimeError(f"envelope fit failed: {res.message}")
    d1, d2 = (float(v) for v in res.x)
    return DecayFit(d1, d2, slope, False, t, theta, basis @ res.x)


@dataclass(frozen=True, eq=False)
class ReparamResult:
    lambda1: ScalarField
    lambda2: ScalarField
    detDL: ScalarField
    image_bounds: tuple
    chi_samples: list
    defect_dot: ScalarField
    defect_diff: ScalarField
    decay_fit: tuple
    jac: tuple
    c_constant: float
    lower_bound_margin: ScalarField
    linear_bound_margin: ScalarField
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def spec(self) -> GridSpec:
        return self.detDL.spec

    def bound_violations(self, tol: float = 1e-10) -> dict:
        inner = (slice(1, -1), slice(1, -1))
        return {
            "det_lower_bound": int(np.count_nonzero(self.lower_bound_margin.values[inner] < -tol)),
            "det_linear_bound": int(np.count_nonzero(self.linear_bound_margin.values[inner] < -tol)),
        }


def conformality_defect(sol: SurfaceSolution) -> tuple[ScalarField, ScalarField]:
    """Scaled residuals of the two conformality relations at every node.

    ``meta`` of the first field carries the quantities divided by
    ``(det D Lambda)^2``, which are the relations for ``D chi`` itself.
    """
    spec = sol.spec
    ident = defect_identities(sol.density, sol.ux.values, sol.uy.values)
    det = det_closed_form(sol.density, np.hypot(sol.ux.values, sol.uy.values))
    meta = {
        "dot_scaled": ScalarField(spec, ident["dot"] / det**2),
        "diff_scaled": ScalarField(spec, ident["diff"] / det**2),
        "theta": ScalarField(spec, ident["theta"]),
    }
    return ScalarField(spec, ident["res_dot"], meta), ScalarField(spec, ident["res_diff"])


def build_reparam(sol: SurfaceSolution, ps: PotentialSet, decay_range=(1e2, 1e4),
                  decay_samples: int = 200) -> ReparamResult:
    l1, l2 = lambda_map(ps)
    det = det_dlambda(sol, ps)
    spec = sol.spec
    t = np.hypot(sol.ux.values, sol.uy.values)
    c = coefficient_fields(sol.density, sol.ux.values, sol.uy.values)
    jac = tuple(ScalarField(spec, v) for v in
                (1.0 + c["phi1"], c["phi2"], c["psi1"], 1.0 + c["psi2"]))
    c_const = float(np.min(det.values / (1.0 + t)))
    lower = ScalarField(spec, det.values - det_lower_bound(sol.density, t))
    linear = ScalarField(spec, det.values - c_const * (1.0 + t))
    dot, diff = conformality_defect(sol)
    bounds = (float(l1.values.min()), float(l2.values.min()),
              float(l1.values.max()), float(l2.values.max()))
    fit = decay_fit(sol.density, decay_range, decay_samples)
    return ReparamResult(
        lambda1=l1, lambda2=l2, detDL=det, image_bounds=bounds, chi_samples=[],
        defect_dot=dot, defect_diff=diff, decay_fit=fit, jac=jac, c_constant=c_const,
        lower_bound_margin=lower, linear_bound_margin=linear,
        meta={"det_fd_mismatch": det.meta.get("fd_mismatch")},
    )


def _lambda_at(rr: ReparamResult, x: float, y: float) -> np.ndarray:
    return np.array([interpolate(rr.lambda1, x, y), interpolate(rr.lambda2, x, y)])


def _jac_at(rr: ReparamResult, x: float, y: float) -> np.ndarray:
    j11, j12, j21, j22 = (interpolate(f, x, y) for f in rr.jac)
    return np.array([[j11, j12], [j21, j22]])


def lambda_inverse(rr: ReparamResult, ps: PotentialSet, target, tol: float = INVERSE_TOL,
                   max_iters: int = INVERSE_MAX_ITERS) -> tuple[float, float]:
    """Solve ``Lambda(x, y) = target`` by Newton's method.

    ``Lambda`` is the bicubic interpolant of the nodal map; the Jacobian is
    the interpolated analytic matrix.  The start is the node whose image is
    closest to the target and iterates are kept inside the grid rectangle.
    """
    spec = rr.spec
    tx, ty = float(target[0]), float(target[1])
    x0, y0, x1, y1 = rr.image_bounds
    if not (x0 <= tx <= x1 and y0 <= ty <= y1):
        raise InversionError(f"target ({tx!r}, {ty!r}) lies outside the image hull")
    dist = (rr.lambda1.values - tx) ** 2 + (rr.lambda2.values - ty) ** 2
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    p = np.array(spec.node(int(i), int(j)))
    goal = np.array([tx, ty])
    res = np.inf
    for _ in range(max_iters + 1):
        r = _lambda_at(rr, p[0], p[1]) - goal
        res = float(np.hypot(r[0], r[1]))
        if res <= tol:
            return float(p[0]), float(p[1])
        step = np.linalg.solve(_jac_at(rr, p[0], p[1]), r)
        p = p - step
        p[0] = min(max(p[0], spec.x0), spec.x1)
        p[1] = min(max(p[1], spec.y0), spec.y1)
    raise InversionError(f"Newton did not reach {tol:g} in {max_iters} iterations "
                         f"(residual {res:.3g})", res)


class ChiSample(NamedTuple):
    chi: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    det: float
    fd_mismatch: float


def chi_and_jacobian(rr: ReparamResult, ps: PotentialSet, sol: SurfaceSolution, target,
                     fd_step: float = CHI_FD_STEP) -> ChiSample:
    """``chi`` at ``target`` with the columns ``X``, ``Y`` of ``det * D chi``.

    ``fd_mismatch`` is the max gap between ``(X Y) / det`` and central
    differences of ``chi`` (through the interpolated inverse) with step
    ``fd_step``; when a stencil point falls outside the image it is ``nan``.
    """
    def chi_at(tt):
        x, y = lambda_inverse(rr, ps, tt)
        return np.array([x, y, interpolate(sol.u, x, y)])

    x, y = lambda_inverse(rr, ps, target)
    ux = interpolate(sol.ux, x, y)
    uy = interpolate(sol.uy, x, y)
    X, Y = xy_vectors(sol.density, ux, uy)
    det = float(det_closed_form(sol.density, math.hypot(ux, uy)))
    chi = np.array([x, y, interpolate(sol.u, x, y)])
    tx, ty = float(target[0]), float(target[1])
    try:
        cx = (chi_at((tx + fd_step, ty)) - chi_at((tx - fd_step, ty))) / (2.0 * fd_step)
        cy = (chi_at((tx, ty + fd_step)) - chi_at((tx, ty - fd_step))) / (2.0 * fd_step)
        mismatch = float(max(np.max(np.abs(cx - X / det)), np.max(np.abs(cy - Y / det))))
    except InversionError:
        mismatch = float("nan")
    return ChiSample(chi, X, Y, det, mismatch)


# -- probes -------------------------------------------------------------------

def expansivity_probe(rr: ReparamResult, n_pairs: int = 1000, seed: int = 0) -> dict:
    """``|Lambda(p) - Lambda(q)| > |p - q|`` on random pairs of distinct nodes."""
    rng = np.random.default_rng(seed)
    spec = rr.spec
    n = spec.nx * spec.ny
    a = rng.integers(0, n, n_pairs)
    b = rng.integers(0, n - 1, n_pairs)
    b = np.where(b >= a, b + 1, b)
    X, Y = spec.mesh()
    xs, ys = X.ravel(), Y.ravel()
    l1, l2 = rr.lambda1.values.ravel(), rr.lambda2.values.ravel()
    dp = np.hypot(xs[a] - xs[b], ys[a] - ys[b])
    dl = np.hypot(l1[a] - l1[b], l2[a] - l2[b])
    ratio = dl / dp
    return {"pairs": int(n_pairs), "violations": int(np.count_nonzero(dl <= dp)),
            "min_ratio": float(ratio.min())}


def ball_inclusion_probe(rr: ReparamResult, ps: PotentialSet, point, n_targets: int = 64,
                         seed: int = 0) -> dict:
    """Invert targets in ``B_r(Lambda(p))`` with ``r`` half the distance of ``p`` to the boundary."""
    spec = rr.spec
    px, py = float(point[0]), float(point[1])
    r = 0.5 * min(px - spec.x0, spec.x1 - px, py - spec.y0, spec.y1 - py)
    if not r > 0:
        raise ValueError("probe point must lie strictly inside the grid")
    centre = _lambda_at(rr, px, py)
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2.0 * math.pi, n_targets)
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, n_targets))
    # include points on the rim, the hardest case
    rad[: n_targets // 4] = r * (1.0 - 1e-12)
    failures = 0
    max_res = 0.0
    for a_, r_ in zip(ang, rad):
        tgt = centre + r_ * np.array([math.cos(a_), math.sin(a_)])
        try:
            x, y = lambda_inverse(rr, ps, tgt)
        except InversionError:
            failures += 1
            continue
        max_res = max(max_res, float(np.linalg.norm(_lambda_at(rr, x, y) - tgt)))
    return {"radius": r, "targets": int(n_targets), "failures": failures, "max_residual": max_res}


def roundtrip_probe(rr: ReparamResult, ps: PotentialSet, n: int = 1000, seed: int = 0,
                    margin: int = 1) -> dict:
    """Round trips ``Lambda(Lambda^-1(t))`` for images of random interior points."""
    spec = rr.spec
    rng = np.random.default_rng(seed)
    lo_x, hi_x = spec.x0 + margin * spec.h, spec.x1 - margin * spec.h
    lo_y, hi_y = spec.y0 + margin * spec.h, spec.y1 - margin * spec.h
    worst = 0.0
    failures = 0
    for _ in range(n):
        p = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
        tgt = _lambda_at(rr, *p)
        try:
            x, y = lambda_inverse(rr, ps, tgt)
        except InversionError:
            failures += 1
            continue
        worst = max(worst, float(np.linalg.norm(_lambda_at(rr, x, y) - tgt)))
    return {"n": int(n), "failures": failures, "max_error": worst}
