import math

import numpy as np
import pytest

from musurf.fields import GridSpec, OneFormField, ScalarField
from musurf.forms import assemble_forms
from musurf.potential import check_hessE, integrate_potential, min_eigenvalue, recover_xstar, resolve_anchor
from musurf.solver import surface_from_field

from conftest import log2_ratios

SPEC = GridSpec.square(-1.0, 1.0, 21)
ORIGIN = (0.0, 0.0)


def form(spec, p, q):
    return OneFormField(ScalarField.from_function(spec, p), ScalarField.from_function(spec, q))


def surface(d, fn, spec=SPEC):
    return surface_from_field(d, ScalarField.from_function(spec, fn))


def test_anchor_resolution():
    assert resolve_anchor(SPEC) == (0, 0)
    assert resolve_anchor(SPEC, (3, 4)) == (3, 4)
    assert resolve_anchor(SPEC, ORIGIN) == (10, 10)
    with pytest.raises(ValueError):
        resolve_anchor(SPEC, (0.05, 0.0))
    with pytest.raises(ValueError):
        resolve_anchor(SPEC, (2.0, 0.0))
    with pytest.raises(IndexError):
        resolve_anchor(SPEC, (21, 0))


def test_integrate_exact_forms():
    X, Y = SPEC.mesh()
    dx = integrate_potential(form(SPEC, lambda x, y: 1 + 0 * x, lambda x, y: 0 * x), ORIGIN)
    np.testing.assert_allclose(dx.values, X, atol=1e-14)
    # trapezoid integration is exact on the linear coefficients of d(xy)
    dxy = integrate_potential(form(SPEC, lambda x, y: y, lambda x, y: x))
    np.testing.assert_allclose(dxy.values, X * Y - 1.0, atol=1e-14)
    assert dxy.meta["path_discrepancy"] <= 1e-14


def test_path_discrepancy_detects_a_non_closed_form():
    X, Y = SPEC.mesh()
    f = integrate_potential(form(SPEC, lambda x, y: y, lambda x, y: 0 * x))
    # the two staircases disagree by (x - x0)(y - y0)
    assert f.meta["path_discrepancy"] == pytest.approx(4.0, abs=1e-13)
    np.testing.assert_allclose(f.values, -(X + 1.0), atol=1e-14)


def test_path_discrepancy_converges_for_smooth_closed_forms():
    disc = []
    for n in (21, 41, 81):
        spec = GridSpec.square(-1.0, 1.0, n)
        f = integrate_potential(form(spec, lambda x, y: np.exp(x) * np.sin(y), lambda x, y: np.exp(x) * np.cos(y)))
        disc.append(f.meta["path_discrepancy"])
    assert np.all(log2_ratios(disc) > 1.9)


@pytest.mark.parametrize("label", ["minimal", "mu3"])
def test_constant_height_gives_the_identity_potentials(builtins, label):
    ps = recover_xstar(sol := surface(builtins[label], lambda x, y: 0 * x + 0.3), assemble_forms(sol), ORIGIN)
    X, Y = SPEC.mesh()
    np.testing.assert_allclose(ps.b.values, X, atol=1e-14)
    np.testing.assert_allclose(ps.a.values, -Y, atol=1e-14)
    np.testing.assert_allclose(ps.c.values, 0.0, atol=1e-14)
    np.testing.assert_allclose(ps.E.values, 0.5 * (X * X + Y * Y), atol=1e-14)
    rep = check_hessE(ps, sol)
    assert rep.min_eig_min == pytest.approx(1.0, abs=1e-14)
    assert rep.bound_violations == 0 and rep.fd_mismatch_max <= 1e-12


def test_theorem_convention_flips_signs(g_mu3):
    sol = surface(g_mu3, lambda x, y: x * y)
    fa = assemble_forms(sol)
    p = recover_xstar(sol, fa)
    t = recover_xstar(sol, fa, convention="theorem")
    for f, g in ((p.a, t.a), (p.b, t.b), (p.c, t.c)):
        np.testing.assert_array_equal(f.values, -g.values)
    np.testing.assert_array_equal(p.E.values, t.E.values)
    for u, v in zip(p.param_pair(), t.param_pair()):
        np.testing.assert_array_equal(u, v)
    with pytest.raises(ValueError):
        recover_xstar(sol, fa, convention="other")


def test_hessE_for_linear_heights(g_min, g_mu3):
    rep = check_hessE(*_ps_and_sol(g_min, lambda x, y: x))
    # D^2 E = diag(sqrt 2, 1/sqrt 2); the smaller eigenvalue equals the bound g - t g'
    assert rep.min_eig_min == pytest.approx(1 / math.sqrt(2), abs=1e-14)
    assert rep.bound_violations == 0 and rep.fd_mismatch_max <= 1e-12
    ps, sol = _ps_and_sol(g_mu3, lambda x, y: 2 * x)
    rep = check_hessE(ps, sol)
    assert rep.min_eig_min == pytest.approx(5 / 9, abs=1e-14)
    np.testing.assert_allclose(ps.hessE[0].values, 7 / 3, atol=1e-12)
    np.testing.assert_allclose(ps.hessE[2].values, 5 / 9, atol=1e-12)


def _ps_and_sol(d, fn):
    sol = surface(d, fn)
    return recover_xstar(sol, assemble_forms(sol)), sol


def test_min_eigenvalue_closed_form():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(3, 40))
    want = [np.linalg.eigvalsh([[a, b], [b, c]])[0] for a, b, c in m.T]
    np.testing.assert_allclose(min_eigenvalue(*m), want, atol=1e-14)


def test_hessE_on_solved_panel(solved_cases):
    for name, sol in solved_cases.items():
        ps = recover_xstar(sol, assemble_forms(sol))
        rep = check_hessE(ps, sol)
        assert rep.bound_violations == 0, name
        assert rep.min_eig_min > 0, name
        assert rep.symmetry_error == 0.0
        assert set(rep.to_json()) == {"min_eig_min", "bound_violations", "fd_mismatch_max"}


def test_scherk_potentials_converge(scherk_samples):
    mismatch, disc = [], []
    for s in scherk_samples.values():
        ps = recover_xstar(s, assemble_forms(s), ORIGIN)
        mismatch.append(check_hessE(ps, s).fd_mismatch_max)
        disc.append(max(ps.meta["path_discrepancy"].values()))
    assert np.all(np.diff(mismatch) < 0)
    # irregular per halving (about 3.3 then 1.8), second order over both
    assert math.log2(disc[0] / disc[-1]) / 2 >= 1.8


def test_potential_csv(tmp_path, g_min):
    ps, _ = _ps_and_sol(g_min, lambda x, y: 0 * x)
    ps.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x,y,a,b,c,E" and len(lines) == 1 + SPEC.nx * SPEC.ny
    assert lines[1] == "-1,-1,0,0,0,0"
