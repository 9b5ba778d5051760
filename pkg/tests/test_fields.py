import numpy as np
import pytest

from musurf.fields import (DomainError, GridError, GridSpec, OneFormField, ScalarField, diff,
                           exterior_derivative, gradient, hessian, interpolate)


@pytest.fixture
def spec():
    return GridSpec.square(-1.0, 1.0, 21)


def field(spec, fn):
    return ScalarField.from_function(spec, fn)


def test_gridspec_checks():
    with pytest.raises(GridError):
        GridSpec(0, 0, 1, 2, 11, 11)
    with pytest.raises(GridError):
        GridSpec(1, 0, 0, 1, 11, 11)
    g = GridSpec(0, 0, 2, 1, 21, 11)
    assert g.h == pytest.approx(0.1)
    assert g.nearest_node(0.96, 0.31) == (10, 3)


def test_scalar_field_rejects_nonfinite_and_is_readonly(spec):
    with pytest.raises(ValueError):
        ScalarField(spec, np.full(spec.shape, np.nan))
    f = field(spec, lambda x, y: x)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


def test_gradient_of_constant_and_affine_is_exact(spec):
    cx, cy = gradient(field(spec, lambda x, y: 0 * x + 5.0))
    assert np.all(cx.values == 0) and np.all(cy.values == 0)
    fx, fy = gradient(field(spec, lambda x, y: 3 * x + 2 * y))
    np.testing.assert_allclose(fx.values, 3.0, atol=1e-13)
    np.testing.assert_allclose(fy.values, 2.0, atol=1e-13)


def test_gradient_of_quadratic_is_exact_everywhere():
    spec = GridSpec.square(0.0, 1.0, 11)
    fx, _ = gradient(field(spec, lambda x, y: x * x))
    X, _ = spec.mesh()
    np.testing.assert_allclose(fx.values, 2 * X, atol=1e-13)


def test_edge_error_matches_central_error():
    # on a cubic both stencils are off by exactly h^2 f'''/6, edges included
    x = np.linspace(0.0, 1.0, 9)
    h = x[1] - x[0]
    d = diff(x**3 - 2 * x**2, h, 0)
    np.testing.assert_allclose(d, 3 * x**2 - 4 * x + h**2, atol=1e-12)


def test_hessian_exactness(spec):
    zero = hessian(field(spec, lambda x, y: 1 + x - 4 * y))
    for f in zero:
        np.testing.assert_allclose(f.values, 0.0, atol=1e-11)
    _, fxy, _ = hessian(field(spec, lambda x, y: x * y))
    np.testing.assert_allclose(fxy.values[1:-1, 1:-1], 1.0, atol=1e-11)
    fxx, fxy, fyy = hessian(field(spec, lambda x, y: x * x + y * y))
    for f, want in ((fxx, 2.0), (fxy, 0.0), (fyy, 2.0)):
        np.testing.assert_allclose(f.values[1:-1, 1:-1], want, atol=1e-10)


def test_operators_converge_at_second_order():
    errs = []
    for n in (21, 41, 81):
        spec = GridSpec.square(0.0, 2.0, n)
        f = field(spec, lambda x, y: np.sin(x) * np.cos(y))
        X, Y = spec.mesh()
        fx, fy = gradient(f)
        fxx, fxy, fyy = hessian(f)
        errs.append(max(np.abs(fx.values - np.cos(X) * np.cos(Y)).max(),
                        np.abs(fy.values + np.sin(X) * np.sin(Y)).max(),
                        np.abs(fxx.values + np.sin(X) * np.cos(Y)).max(),
                        np.abs(fxy.values + np.cos(X) * np.sin(Y)).max()))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 4 * 0.8) & (ratios < 4 * 1.2)), ratios


def test_small_grid_is_rejected():
    with pytest.raises(GridError):
        gradient(ScalarField(GridSpec.square(0, 1, 2), np.zeros((2, 2))))


def test_interpolation(spec):
    f = field(spec, lambda x, y: 2 * x - y + 0.5)
    x, y = spec.node(4, 7)
    assert interpolate(f, x, y) == pytest.approx(f.values[4, 7], abs=1e-14)
    assert interpolate(f, 0.025, -0.325) == pytest.approx(2 * 0.025 + 0.325 + 0.5, abs=1e-13)
    cubic = field(spec, lambda x, y: x**3 + 0 * y)
    assert interpolate(cubic, 0.45, 0.05) == pytest.approx(0.45**3, abs=1e-12)
    assert interpolate(cubic, 0.45, 0.05, dx=1) == pytest.approx(3 * 0.45**2, abs=1e-10)
    with pytest.raises(DomainError):
        interpolate(f, 1.5, 0.0)


def test_exterior_derivative_schemes(spec):
    const = OneFormField(field(spec, lambda x, y: 0 * x + 2.0), field(spec, lambda x, y: 0 * x - 1.0))
    lin = OneFormField(field(spec, lambda x, y: 3 * y + x), field(spec, lambda x, y: 5 * x - y))
    for scheme in ("central", "compact"):
        assert np.all(exterior_derivative(const, scheme).values == 0.0)
        dl = exterior_derivative(lin, scheme).values
        np.testing.assert_allclose(dl[1:-1, 1:-1], 2.0, atol=1e-12)
    # the compact stencil leaves the boundary ring at zero
    assert np.all(exterior_derivative(lin, "compact").values[0] == 0.0)
    with pytest.raises(ValueError):
        exterior_derivative(lin, "edges")


def test_exact_forms_are_closed_to_second_order():
    errs = []
    for n in (21, 41, 81):
        spec = GridSpec.square(-1.0, 1.0, n)
        # d of exp(x) sin(y)
        form = OneFormField(field(spec, lambda x, y: np.exp(x) * np.sin(y)),
                            field(spec, lambda x, y: np.exp(x) * np.cos(y)))
        errs.append(np.abs(exterior_derivative(form, "compact").values).max())
    assert np.all(np.log2(np.array(errs[:-1]) / np.array(errs[1:])) > 1.8)


def test_csv_dump(tmp_path):
    spec = GridSpec.square(0, 1, 3)
    f = field(spec, lambda x, y: x + 10 * y)
    f.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x,y,value" and len(lines) == 10
    assert lines[2] == "0,0.5,5"
