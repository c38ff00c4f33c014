import math
from dataclasses import replace

import numpy as np
import pytest

from schrokernel.coefficients import IdentityFree, PolynomialIsotropic
from schrokernel.discretize import assemble, build_grid
from schrokernel.semigroup import EvolverConfig, evolve, kernel_diagonal
from schrokernel.spectral import (
    central_nodes,
    decay_fit,
    eigen_lowest,
    eigen_rho_stability,
    eigenfunction_bound_check,
)

HARMONIC = IdentityFree(d=1, s=2.0)
POLY44 = PolynomialIsotropic(d=1, m=4, s=4)


def mehler_diagonal(t, x):
    """p(t, x, x) for Q = I, V = x^2."""
    s2, c2 = math.sinh(2 * t), math.cosh(2 * t)
    return np.exp(-(x ** 2) * (c2 - 1) / s2) / np.sqrt(2 * np.pi * s2)


@pytest.fixture(scope="module")
def harmonic():
    return eigen_lowest(assemble(HARMONIC, build_grid(1, 12.0, 0.01)), 5)


@pytest.fixture(scope="module")
def poly():
    return eigen_lowest(assemble(POLY44, build_grid(1, 8.0, 0.01)), 5)


def test_hermite_spectrum(harmonic):
    want = -(2 * np.arange(5) + 1.0)
    np.testing.assert_allclose(harmonic.eigenvalues, want, rtol=5e-3)
    assert harmonic.residuals.max() <= 1e-8


def test_dirichlet_sine_modes():
    h = math.pi / 400
    op = assemble(IdentityFree(d=1), build_grid(1, math.pi / 2, h))
    res = eigen_lowest(op, 3)
    n = np.arange(1, 4)
    # exact eigenvalues of the three-point Laplacian on an interval of length pi
    discrete = -(4 / h ** 2) * np.sin(n * h / 2) ** 2
    np.testing.assert_allclose(res.eigenvalues, discrete, rtol=1e-9)
    assert np.all(np.abs(res.eigenvalues + n ** 2) <= n ** 4 * h ** 2 / 12 * 1.01)


def test_poly_spectrum_negative_and_ordered(poly):
    lam = poly.eigenvalues
    assert np.all(lam < 0)
    assert np.all(np.diff(lam) < 0)


@pytest.mark.parametrize("which", ["harmonic", "poly"])
def test_rayleigh_and_orthonormality(which, request):
    res = request.getfixturevalue(which)
    np.testing.assert_allclose(res.rayleigh(), res.eigenvalues, rtol=1e-8)
    assert res.orthonormality_error() <= 1e-8


def test_evolution_of_eigenfunctions(harmonic):
    cfg = EvolverConfig(scheme="CN", tau=1e-3)
    t = 0.5
    for i in range(3):
        psi = harmonic.vectors[:, i]
        u = evolve(harmonic.op, psi, t, cfg)
        want = math.exp(harmonic.eigenvalues[i] * t) * psi
        assert np.linalg.norm(u - want) <= 0.01 * np.linalg.norm(want)


def test_count_limits():
    op = assemble(HARMONIC, build_grid(1, 1.0, 0.1))  # n = 19
    with pytest.raises(ValueError):
        eigen_lowest(op, 2)
    eigen_lowest(op, 1)


def test_csv_export(tmp_path, poly):
    poly.to_csv(tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "index,eigenvalue,residual" and len(rows) == 6


# --- domain saturation ----------------------------------------------------


def test_poly_eigenvalues_saturate():
    tab = eigen_rho_stability(POLY44, [4.0, 6.0, 8.0], 0.02, 5)
    assert tab.report.verdict, tab.drift


def test_harmonic_saturates_to_hermite():
    tab = eigen_rho_stability(HARMONIC, [8.0, 10.0, 12.0], 0.02, 5)
    assert tab.report.verdict
    np.testing.assert_allclose(tab.eigenvalues[-1], -(2 * np.arange(5) + 1.0), rtol=5e-3)


def test_free_laplacian_never_saturates():
    tab = eigen_rho_stability(IdentityFree(d=1), [4.0, 6.0, 8.0], 0.02, 5)
    assert not tab.report.verdict
    # Dirichlet eigenvalues scale like rho^-2
    ratio = tab.eigenvalues[-1][0] / tab.eigenvalues[-2][0]
    assert ratio == pytest.approx((6.0 / 8.0) ** 2, rel=0.01)


# --- eigenfunction bounds -------------------------------------------------


def test_eigenfunction_bound_harmonic_mehler(harmonic):
    nodes = central_nodes(harmonic.grid)
    x = harmonic.grid.coords()[nodes, 0]
    t = 0.5
    diag = mehler_diagonal(t, x)
    for i in range(3):
        assert eigenfunction_bound_check(harmonic, diag, t, i, nodes=nodes).verdict
    # the Mehler diagonal agrees with the computed one away from the far tail
    core = np.flatnonzero(np.abs(x) <= 3.0)[::25]
    comp = kernel_diagonal(harmonic.op, t, EvolverConfig(tau=1e-3, richardson=True), nodes=nodes[core])
    np.testing.assert_allclose(comp, diag[core], rtol=0.01)


def test_eigenfunction_bound_poly(poly):
    nodes = central_nodes(poly.grid)[::10]
    diag = kernel_diagonal(poly.op, 0.5, EvolverConfig(tau=1e-3), nodes=nodes)
    for i in range(3):
        rep = eigenfunction_bound_check(poly, diag, 0.5, i, nodes=nodes)
        assert rep.verdict, rep.line()


def test_eigenfunction_bound_detects_violation(harmonic):
    nodes = central_nodes(harmonic.grid)
    diag = 0.25 * mehler_diagonal(0.5, harmonic.grid.coords()[nodes, 0])
    assert not eigenfunction_bound_check(harmonic, diag, 0.5, 0, nodes=nodes).verdict


# --- decay fits -----------------------------------------------------------


def test_decay_fit_harmonic_gaussian(harmonic):
    fit = decay_fit(harmonic, 0, theta=2.0)
    assert fit.c2 == pytest.approx(0.5, rel=0.01)
    assert fit.residual < 1e-3
    assert fit.verdict


def test_decay_fit_poly_positive_rate():
    res = eigen_lowest(assemble(POLY44, build_grid(1, 4.0, 0.01)), 3)
    fit = decay_fit(res, 0, theta=1.0)
    assert fit.c2 > 0
    assert fit.verdict


def test_decay_fit_rejects_constant_vector(harmonic):
    flat = replace(harmonic, vectors=np.ones_like(harmonic.vectors))
    fit = decay_fit(flat, 0, theta=2.0)
    assert abs(fit.c2) < 1e-9
    assert not fit.verdict


def test_decay_fit_expint_profile():
    res = eigen_lowest(assemble(POLY44, build_grid(1, 4.0, 0.02)), 1)
    fit = decay_fit(res, 0, theta=1.0, profile="expint")
    assert math.isfinite(fit.c2)
    with pytest.raises(ValueError):
        decay_fit(res, 0, theta=1.0, profile="spline")
