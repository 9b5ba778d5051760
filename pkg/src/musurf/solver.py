"""Dirichlet problems for ``div{ xi(|grad u|) grad u } = 0`` on a rectangle.

The discrete energy integrates ``g(|grad u|)`` exactly over the piecewise
linear interpolant of the nodal values, averaged over the two diagonal
triangulations of each cell.  (Nodal central differences would leave the
four even/odd sub-lattices decoupled in the interior.)  Its gradient and
Hessian with respect to the interior nodal values are assembled exactly
and minimised by damped Newton with backtracking.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .densities import EnergyDensity
from .fields import DomainError, GridSpec, ScalarField, gradient, hessian, interior_only

log = logging.getLogger(__name__)

FLAT_T = 1e-8


class SolverError(RuntimeError):
    """The energy became NaN or the iteration could not proceed."""


@dataclass(frozen=True)
class SolveConfig:
    tol_gradient: float = 1e-11
    max_iters: int = 100
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    min_step: float = 1e-12

    def __post_init__(self):
        if not self.tol_gradient > 0:
            raise ValueError("tol_gradient must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class SurfaceSolution:
    density: EnergyDensity
    u: ScalarField
    ux: ScalarField
    uy: ScalarField
    uxx: ScalarField
    uxy: ScalarField
    uyy: ScalarField
    energy: float
    residual_norm: float
    converged: bool = True
    iterations: int = 0
    grad_norm: float = math.nan
    energy_history: tuple = ()
    newton_steps: int = 0
    gradient_steps: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def spec(self) -> GridSpec:
        return self.u.spec

    @property
    def grad_abs(self) -> np.ndarray:
        return np.hypot(self.ux.values, self.uy.values)


# -- energy discretisation -----------------------------------------------------

def energy_operators(spec: GridSpec) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Piecewise-linear gradients on both diagonal triangulations of every cell.

    Returns ``(Gx, Gy, w)``: each row of ``Gx``/``Gy`` is the constant gradient
    of the linear interpolant on one triangle, ``w`` its quadrature weight
    (``h^2/4``: four triangles per cell, two splittings averaged).  Operators
    act on C-order flattened ``(nx, ny)`` arrays.
    """
    nx, ny = spec.shape
    if nx < 3 or ny < 3:
        raise ValueError("grid needs at least 3 nodes per direction")
    h = spec.h
    idx = np.arange(nx * ny).reshape(nx, ny)
    sw, se = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    nw, ne = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    # (x-difference pair, y-difference pair) per triangle, as (plus, minus)
    tris = [
        ((se, sw), (ne, se)),  # SW-SE-NE
        ((ne, nw), (nw, sw)),  # SW-NE-NW
        ((se, sw), (nw, sw)),  # SW-SE-NW
        ((ne, nw), (ne, se)),  # SE-NE-NW
    ]
    m = sw.size
    rows = np.arange(4 * m).reshape(4, m)

    def assemble(pairs):
        r = np.concatenate([np.concatenate([rows[k], rows[k]]) for k in range(4)])
        c = np.concatenate([np.concatenate(p) for p in pairs])
        v = np.concatenate([np.concatenate([np.full(m, 1.0 / h), np.full(m, -1.0 / h)]) for _ in range(4)])
        return sp.csr_matrix((v, (r, c)), shape=(4 * m, nx * ny))

    Gx = assemble([t[0] for t in tris])
    Gy = assemble([t[1] for t in tris])
    w = np.full(4 * m, 0.25 * h * h)
    return Gx, Gy, w


class _Energy:
    """Discrete energy with exact derivatives in the interior unknowns."""

    def __init__(self, d: EnergyDensity, spec: GridSpec):
        self.d = d
        self.spec = spec
        self.Gx, self.Gy, self.w = energy_operators(spec)
        self.interior = np.flatnonzero(spec.interior_mask().ravel())
        self.GxI = self.Gx[:, self.interior].tocsc()
        self.GyI = self.Gy[:, self.interior].tocsc()

    def value(self, u: np.ndarray) -> float:
        t = np.hypot(self.Gx @ u, self.Gy @ u)
        return float(self.w @ np.asarray(self.d.g(t)))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        ux, uy = self.Gx @ u, self.Gy @ u
        xi = np.asarray(self.d.xi(np.hypot(ux, uy)))
        return self.GxI.T @ (self.w * xi * ux) + self.GyI.T @ (self.w * xi * uy)

    def hessian(self, u: np.ndarray) -> sp.csc_matrix:
        ux, uy = self.Gx @ u, self.Gy @ u
        a11, a12, a22 = flux_jacobian(self.d, ux, uy)
        W = self.w
        H = (self.GxI.T @ sp.diags(W * a11) @ self.GxI
             + self.GxI.T @ sp.diags(W * a12) @ self.GyI
             + self.GyI.T @ sp.diags(W * a12) @ self.GxI
             + self.GyI.T @ sp.diags(W * a22) @ self.GyI)
        return H.tocsc()


def flux_jacobian(d: EnergyDensity, ux, uy):
    """Entries of the Hessian of ``Z -> g(|Z|)``: ``xi I + (xi'/t) Z Z^T``.

    The rank-one part is written as ``xi'(t) * (Z Z^T / t)`` so that it tends
    to zero at flat points instead of forming ``0/0``.
    """
    ux = np.asarray(ux, dtype=float)
    uy = np.asarray(uy, dtype=float)
    t = np.hypot(ux, uy)
    xi = np.asarray(d.xi(t))
    xip = np.asarray(d.xi_prime(t))
    flat = t < FLAT_T
    inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, t))
    return xi + xip * ux * ux * inv, xip * ux * uy * inv, xi + xip * uy * uy * inv


# -- public operations --------------------------------------------------------

def discrete_energy(d: EnergyDensity, u: ScalarField) -> float:
    """``int g(|grad u|)`` for the piecewise-linear interpolant of ``u``."""
    return _Energy(d, u.spec).value(u.values.ravel())


def discrete_energy_gradient(d: EnergyDensity, u: ScalarField) -> ScalarField:
    """Derivative of :func:`discrete_energy` w.r.t. interior nodal values (0 on the boundary)."""
    E = _Energy(d, u.spec)
    out = np.zeros(u.spec.nx * u.spec.ny)
    out[E.interior] = E.gradient(u.values.ravel())
    return ScalarField(u.spec, out.reshape(u.spec.shape))


def harmonic_extension(spec: GridSpec, boundary_values: np.ndarray) -> np.ndarray:
    """Five-point discrete harmonic extension of the boundary ring of ``boundary_values``."""
    nx, ny = spec.shape
    u = np.array(boundary_values, dtype=float)
    mi, mj = nx - 2, ny - 2
    if mi <= 0 or mj <= 0:
        return u
    L = (sp.kron(_lap1d(mi), sp.identity(mj)) + sp.kron(sp.identity(mi), _lap1d(mj))).tocsc()
    rhs = np.zeros((mi, mj))
    rhs[0, :] += u[0, 1:-1]
    rhs[-1, :] += u[-1, 1:-1]
    rhs[:, 0] += u[1:-1, 0]
    rhs[:, -1] += u[1:-1, -1]
    u[1:-1, 1:-1] = spla.spsolve(L, rhs.ravel()).reshape(mi, mj)
    return u


def _lap1d(m: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format="csr")


def surface_from_field(d: EnergyDensity, u: ScalarField, **extra) -> SurfaceSolution:
    """Wrap a nodal field (e.g. an analytic sample) with its derivative fields."""
    ux, uy = gradient(u)
    uxx, uxy, uyy = hessian(u)
    partial = SurfaceSolution(d, u, ux, uy, uxx, uxy, uyy, energy=discrete_energy(d, u),
                              residual_norm=math.nan, **extra)
    res = strong_residual(partial)
    return _with(partial, residual_norm=res.max_abs(interior=True))


def _with(sol: SurfaceSolution, **changes) -> SurfaceSolution:
    return replace(sol, **changes)


def solve_dirichlet(
    d: EnergyDensity,
    spec: GridSpec,
    boundary: Callable[[np.ndarray, np.ndarray], np.ndarray],
    cfg: Optional[SolveConfig] = None,
    initial: Optional[np.ndarray] = None,
) -> SurfaceSolution:
    """Minimise the discrete energy with Dirichlet data ``boundary(x, y)``.

    ``initial`` optionally supplies interior values (full ``(nx, ny)``
    array; its boundary ring is overwritten).  The default start is the
    discrete harmonic extension of the boundary data.

    Non-convergence is reported through ``converged=False`` on the returned
    solution, which holds the best iterate found.
    """
    cfg = cfg or SolveConfig()
    X, Y = spec.mesh()
    bvals = np.broadcast_to(np.asarray(boundary(X, Y), dtype=float), spec.shape).copy()
    ring = ~spec.interior_mask()
    if not np.all(np.isfinite(bvals[ring])):
        raise ValueError("boundary data are not finite on the boundary nodes")
    if initial is None:
        u0 = harmonic_extension(spec, np.where(ring, bvals, 0.0))
    else:
        u0 = np.array(initial, dtype=float)
        u0[ring] = bvals[ring]

    E = _Energy(d, spec)
    u = u0.ravel().copy()
    idx = E.interior
    J = E.value(u)
    if not math.isfinite(J):
        raise SolverError("initial energy is not finite")
    history = [J]
    n_newton = n_grad = 0
    converged = False
    grad = E.gradient(u)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if gnorm <= cfg.tol_gradient:
            converged = True
            it -= 1
            break
        H = E.hessian(u)
        try:
            step = -spla.spsolve(H, grad)
            ok = np.all(np.isfinite(step)) and float(grad @ step) < 0
        except RuntimeError:
            ok = False
        if ok:
            n_newton += 1
        else:
            step = -grad
            n_grad += 1
        slope = float(grad @ step)
        alpha = 1.0
        while True:
            trial = u.copy()
            trial[idx] += alpha * step
            J_new = E.value(trial)
            if math.isnan(J_new):
                raise SolverError(f"energy became NaN at iteration {it} (step length {alpha!r})")
            if J_new <= J + cfg.sufficient_decrease * alpha * slope:
                break
            alpha *= cfg.shrink
            if alpha < cfg.min_step:
                break
        if alpha < cfg.min_step:
            log.debug("line search stalled at iteration %d, |grad| = %.3e", it, gnorm)
            break
        u, J = trial, J_new
        history.append(J)
        grad = E.gradient(u)
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    else:
        converged = gnorm <= cfg.tol_gradient

    if not converged:
        log.warning("solver stopped after %d iterations with |grad|_max = %.3e", it, gnorm)
    field_u = ScalarField(spec, u.reshape(spec.shape))
    return surface_from_field(
        d, field_u, converged=converged, iterations=it, grad_norm=gnorm,
        energy_history=tuple(history), newton_steps=n_newton, gradient_steps=n_grad)


def strong_residual(sol: SurfaceSolution) -> ScalarField:
    """Expanded form of ``div{xi grad u}`` at interior nodes (boundary ring is 0).

    ``u_xx [xi + (xi'/t) u_x^2] + u_yy [xi + (xi'/t) u_y^2] + u_xy 2 u_x u_y xi'/t``.
    """
    a11, a12, a22 = flux_jacobian(sol.density, sol.ux.values, sol.uy.values)
    r = sol.uxx.values * a11 + sol.uyy.values * a22 + sol.uxy.values * 2.0 * a12
    return ScalarField(sol.spec, interior_only(r))


# -- analytic oracles and named boundary data ---------------------------------

HALF_PI = 0.5 * math.pi


def scherk(x, y):
    """Scherk's minimal graph ``log(cos y / cos x)`` on ``|x|, |y| < pi/2``."""
    return np.log(np.cos(y)) - np.log(np.cos(x))


def _check_scherk_domain(spec: GridSpec) -> None:
    if max(abs(spec.x0), abs(spec.x1), abs(spec.y0), abs(spec.y1)) >= HALF_PI:
        raise DomainError("Scherk's surface needs the rectangle inside |x|, |y| < pi/2")


def oracle_solution(kind, spec: GridSpec) -> ScalarField:
    """Nodal samples of an exact solution.

    ``kind`` is ``("affine", a, b, c)`` for ``a x + b y + c`` or ``"scherk"``
    (exact only for the minimal-surface density).
    """
    if kind == "scherk" or (isinstance(kind, tuple) and kind[0] == "scherk"):
        _check_scherk_domain(spec)
        return ScalarField.from_function(spec, scherk)
    if isinstance(kind, tuple) and kind[0] == "affine":
        _, a, b, c = kind
        return ScalarField.from_function(spec, lambda x, y: a * x + b * y + c)
    raise ValueError(f"unknown oracle {kind!r}")


def boundary_function(name: str, params: Optional[dict] = None) -> Callable:
    """Named Dirichlet data: ``affine``, ``saddle``, ``scherk``, ``radial``."""
    p = dict(params or {})
    if name == "affine":
        a, b, c = float(p.get("a", 0.0)), float(p.get("b", 0.0)), float(p.get("c", 0.0))
        return lambda x, y: a * x + b * y + c
    if name == "saddle":
        s = float(p.get("scale", 1.0))
        return lambda x, y: s * (x * x - y * y)
    if name == "scherk":
        return scherk
    if name == "radial":
        s = float(p.get("slope", 1.0))
        return lambda x, y: s * np.hypot(x, y)
    raise ValueError(f"unknown boundary function {name!r}")
