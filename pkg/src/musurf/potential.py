"""Line integration of closed 1-forms: the vector potential ``X* = (a, b, c)``
and the scalar potential ``E`` with ``grad E = (b, -a)``.

Sign convention.  The default ``"param"`` convention integrates
``da = alpha``, ``db = beta``, ``dc = gamma``, so that ``grad b = (phi1, phi2)``
and ``-grad a = (psi1, psi2)``; then ``D^2 E = [[phi1, phi2], [psi1, psi2]]`` is
positive definite.  The ``"theorem"`` convention, ``-dX* = N^ wedge dX``,
flips the sign of all three components.  ``E`` is always built from the
``"param"`` pair, since only that choice gives a convex potential.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .fields import GridSpec, OneFormField, ScalarField, gradient, hessian
from .forms import FormAssembly, coefficient_fields
from .solver import SurfaceSolution

CONVENTIONS = ("param", "theorem")
BOUND_TOL = 1e-10


def resolve_anchor(spec: GridSpec, anchor=None) -> tuple[int, int]:
    """Node indices of ``anchor``.

    ``None`` means the lower-left node.  A pair of ints is taken as node
    indices; anything else as coordinates, which must hit a node.
    """
    if anchor is None:
        return 0, 0
    i, j = anchor
    if isinstance(i, (int, np.integer)) and isinstance(j, (int, np.integer)):
        if not (0 <= i < spec.nx and 0 <= j < spec.ny):
            raise IndexError(f"anchor {anchor!r} is not a node of the grid")
        return int(i), int(j)
    if not spec.contains(float(i), float(j)):
        raise ValueError(f"anchor {anchor!r} lies outside the grid")
    ii, jj = spec.nearest_node(float(i), float(j))
    xn, yn = spec.node(ii, jj)
    if max(abs(xn - float(i)), abs(yn - float(j))) > 1e-9 * max(1.0, spec.h):
        raise ValueError(f"anchor {anchor!r} is not a grid node")
    return ii, jj


def _staircases(form: OneFormField, i0: int, j0: int) -> tuple[np.ndarray, np.ndarray]:
    h = form.spec.h
    # running integrals along every row (in x) and column (in y), zero at the anchor line
    px = cumulative_trapezoid(form.p.values, dx=h, axis=0, initial=0.0)
    px -= px[i0:i0 + 1, :]
    qy = cumulative_trapezoid(form.q.values, dx=h, axis=1, initial=0.0)
    qy -= qy[:, j0:j0 + 1]
    x_first = px[:, j0:j0 + 1] + qy
    y_first = qy[i0:i0 + 1, :] + px
    return x_first, y_first


def integrate_potential(form: OneFormField, anchor=None) -> ScalarField:
    """Integrate ``p dx + q dy`` from ``anchor`` with the trapezoid rule.

    The path runs along the anchor row to ``(x, y0)`` and then up the
    column to ``(x, y)``.  The transposed staircase is integrated too and
    ``meta["path_discrepancy"]`` holds the max difference between the two.
    """
    i0, j0 = resolve_anchor(form.spec, anchor)
    x_first, y_first = _staircases(form, i0, j0)
    disc = float(np.max(np.abs(x_first - y_first)))
    return ScalarField(form.spec, x_first, meta={"path_discrepancy": disc, "anchor": (i0, j0)})


@dataclass(frozen=True, eq=False)
class PotentialSet:
    a: ScalarField
    b: ScalarField
    c: ScalarField
    E: ScalarField
    anchor: tuple
    hessE: tuple
    convention: str = "param"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def spec(self) -> GridSpec:
        return self.E.spec

    def param_pair(self) -> tuple[np.ndarray, np.ndarray]:
        """``(a, b)`` under the ``"param"`` convention whatever was requested."""
        s = 1.0 if self.convention == "param" else -1.0
        return s * self.a.values, s * self.b.values

    def to_csv(self, path) -> None:
        X, Y = self.spec.mesh()
        cols = [X, Y, self.a.values, self.b.values, self.c.values, self.E.values]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "a", "b", "c", "E"])
            for row in zip(*(c.ravel() for c in cols)):
                w.writerow([f"{v:.17g}" for v in row])


def recover_xstar(sol: SurfaceSolution, fa: FormAssembly, anchor=None,
                  convention: str = "param") -> PotentialSet:
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    spec = sol.spec
    i0, j0 = resolve_anchor(spec, anchor)
    a = integrate_potential(fa.alpha, (i0, j0))
    b = integrate_potential(fa.beta, (i0, j0))
    c = integrate_potential(fa.gamma, (i0, j0))
    omega = OneFormField(b, ScalarField(spec, -a.values))
    E = integrate_potential(omega, (i0, j0))
    hess = hessian(E)

    # grad E against (b, -a), interior nodes
    ex, ey = gradient(E)
    grad_err = max(np.max(np.abs(ex.values - b.values)[1:-1, 1:-1]),
                   np.max(np.abs(ey.values + a.values)[1:-1, 1:-1]))
    meta = {
        "path_discrepancy": {k: f.meta["path_discrepancy"] for k, f in
                             (("a", a), ("b", b), ("c", c), ("E", E))},
        "grad_E_mismatch": float(grad_err),
    }
    if convention == "theorem":
        a, b, c = (ScalarField(spec, -f.values, f.meta) for f in (a, b, c))
    return PotentialSet(a=a, b=b, c=c, E=E, anchor=(i0, j0), hessE=hess,
                        convention=convention, meta=meta)


@dataclass
class HessReport:
    min_eig_min: float
    bound_violations: int
    fd_mismatch_max: float
    min_margin: float = float("nan")
    symmetry_error: float = 0.0
    min_eig: ScalarField | None = None
    bound: ScalarField | None = None

    def to_json(self) -> dict:
        return {
            "min_eig_min": self.min_eig_min,
            "bound_violations": self.bound_violations,
            "fd_mismatch_max": self.fd_mismatch_max,
        }


def min_eigenvalue(m11, m12, m22):
    """Smaller eigenvalue of symmetric 2x2 matrices, elementwise."""
    half_tr = 0.5 * (m11 + m22)
    return half_tr - np.hypot(0.5 * (m11 - m22), m12)


def check_hessE(ps: PotentialSet, sol: SurfaceSolution, tol: float = BOUND_TOL) -> HessReport:
    """Positive definiteness of ``D^2 E`` at interior nodes.

    The analytic matrix ``[[phi1, phi2], [psi1, psi2]]`` is symmetrized and
    its smallest eigenvalue compared with ``g - t g'``.
    """
    d = sol.density
    ux, uy = sol.ux.values, sol.uy.values
    cf = coefficient_fields(d, ux, uy)
    off = 0.5 * (cf["phi2"] + cf["psi1"])
    lam = min_eigenvalue(cf["phi1"], off, cf["psi2"])
    bound = np.asarray(d.bracket(np.hypot(ux, uy)))
    inner = (slice(1, -1), slice(1, -1))
    margin = (lam - bound)[inner]
    exx, exy, eyy = ps.hessE
    fd = max(
        np.max(np.abs(exx.values - cf["phi1"])[inner]),
        np.max(np.abs(exy.values - cf["phi2"])[inner]),
        np.max(np.abs(eyy.values - cf["psi2"])[inner]),
    )
    spec = sol.spec
    return HessReport(
        min_eig_min=float(np.min(lam[inner])),
        bound_violations=int(np.count_nonzero(margin < -tol)),
        fd_mismatch_max=float(fd),
        min_margin=float(np.min(margin)),
        symmetry_error=float(np.max(np.abs(cf["phi2"] - cf["psi1"]))),
        min_eig=ScalarField(spec, lam),
        bound=ScalarField(spec, bound),
    )
