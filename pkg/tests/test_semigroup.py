import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schrokernel.coefficients import ExponentialIsotropic, IdentityFree, PolynomialIsotropic
from schrokernel.discretize import assemble, build_grid
from schrokernel.lyapunov import POLYEXP, AuditGrid, LyapunovSpec, RateFunction, calibrate_rate
from schrokernel.semigroup import (
    EvolutionError,
    EvolverConfig,
    check_monotone_rho,
    check_slice,
    check_submarkov,
    check_xi_W,
    evolve,
    evolve_times,
    kernel_column,
    kernel_columns,
    rho_stable_kernels,
    ultracontractivity_probe,
)

BE_R = EvolverConfig(scheme="BE", tau=1e-3, richardson=True)


def heat(t, x, y=0.0):
    return np.exp(-((x - y) ** 2) / (4 * t)) / np.sqrt(4 * np.pi * t)


@pytest.fixture(scope="module")
def free_op():
    return assemble(IdentityFree(d=1), build_grid(1, 10.0, 0.01))


@pytest.fixture(scope="module")
def poly_op():
    return assemble(PolynomialIsotropic(d=1, m=4, s=4), build_grid(1, 4.0, 0.02))


def bump(x, center=0.0, width=0.5):
    r2 = np.sum((np.atleast_2d(x) - center) ** 2, axis=-1) / width ** 2
    return np.clip(1 - r2, 0, None) ** 2


# --- evolution ------------------------------------------------------------


def test_zero_stays_zero(poly_op):
    np.testing.assert_array_equal(evolve(poly_op, np.zeros(poly_op.n), 0.3), 0.0)


def test_gaussian_convolution_oracle(free_op):
    x = free_op.grid.coords()[:, 0]
    f0 = np.exp(-x ** 2 / 0.02) / np.sqrt(0.02 * np.pi)  # variance 0.01
    u = evolve(free_op, f0, 0.2, BE_R)
    var = 0.01 + 0.4
    exact = np.exp(-x ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
    assert np.max(np.abs(u - exact)) / exact.max() <= 0.01


def test_constant_potential_factorizes():
    g = build_grid(1, 3.0, 0.02)
    c = 1.7
    free = assemble(IdentityFree(d=1), g)
    damped = assemble(IdentityFree(d=1, s=0.0, v_scale=c), g)
    f0 = bump(g.coords(), width=1.0)
    cfg = EvolverConfig(scheme="CN", tau=1e-3)
    t = 0.4
    u_free = evolve(free, f0, t, cfg)
    u_damp = evolve(damped, f0, t, cfg)
    # CN step factors are rational in tau*M, so the match is up to O(tau^2)
    np.testing.assert_allclose(u_damp, math.exp(-c * t) * u_free, atol=1e-5 * u_free.max())


def test_cn_more_accurate_than_be(free_op):
    x = free_op.grid.coords()[:, 0]
    f0 = heat(0.05, x)
    exact = heat(0.3, x)
    err = {}
    for scheme in ("BE", "CN"):
        u = evolve(free_op, f0, 0.25, EvolverConfig(scheme=scheme, tau=5e-3))
        err[scheme] = np.max(np.abs(u - exact))
    assert err["CN"] < 0.1 * err["BE"]


def test_semigroup_law_and_self_adjointness(poly_op):
    rng = np.random.default_rng(0)
    f, g = rng.random(poly_op.n), rng.random(poly_op.n)
    cfg = EvolverConfig(tau=1e-3)
    a = evolve(poly_op, evolve(poly_op, f, 0.2, cfg), 0.3, cfg)
    b = evolve(poly_op, f, 0.5, cfg)
    assert np.linalg.norm(a - b) <= 1e-4 * np.linalg.norm(f)
    Tf, Tg = evolve(poly_op, np.stack([f, g], 1), 0.5, cfg).T
    assert Tf @ g == pytest.approx(f @ Tg, rel=1e-10)


def test_evolve_times_rejects_bad_input(poly_op):
    with pytest.raises(ValueError):
        evolve_times(poly_op, np.zeros(poly_op.n), [0.5, 0.2])
    with pytest.raises(ValueError):
        evolve(poly_op, np.zeros(poly_op.n + 1), 0.5)


def test_adaptive_policy_meets_target(free_op):
    x = free_op.grid.coords()[:, 0]
    f0 = heat(0.05, x)
    cfg = EvolverConfig(scheme="CN", tau=0.02, policy="adaptive", target=1e-5)
    u = evolve(free_op, f0, 0.25, cfg)
    # what is left is spatial error, about 1e-5 at h = 0.01
    assert np.max(np.abs(u - heat(0.3, x))) < 5e-5
    with pytest.raises(EvolutionError):
        evolve(free_op, f0, 0.25, EvolverConfig(tau=0.05, policy="adaptive", target=1e-12,
                                                max_halvings=1))


@given(seed=st.integers(0, 2 ** 32 - 1), t=st.floats(0.01, 0.5))
@settings(max_examples=20, deadline=None)
def test_backward_euler_positivity(seed, t):
    op = assemble(PolynomialIsotropic(d=1, m=4, s=4), build_grid(1, 2.0, 0.05))
    rng = np.random.default_rng(seed)
    f = rng.random(op.n) * (rng.random(op.n) < 0.3)
    u = evolve(op, f, t, EvolverConfig(tau=1e-2))
    assert u.min() >= -1e-14 * max(f.max(), 1e-300)


# --- kernel columns -------------------------------------------------------


def test_free_kernel_peak(free_op):
    sl = kernel_column(free_op, [0.0], 0.25, BE_R)
    assert sl.diagonal == pytest.approx(1 / math.sqrt(math.pi), rel=0.02)
    y = free_op.grid.coords()[:, 0]
    win = np.abs(y) <= 3
    assert np.max(np.abs(sl.values[win] - heat(0.25, y[win]))) / heat(0.25, 0.0) <= 0.02


def test_kernel_floor(free_op):
    with pytest.raises(ValueError, match="t_floor"):
        kernel_column(free_op, [0.0], 0.005)


def test_poly_kernel_slices(poly_op):
    rows = kernel_columns(poly_op, [[0.0], [1.0], [2.0]], [0.5, 1.0], EvolverConfig(tau=1e-3))
    for row in rows:
        for sl in row:
            assert check_slice(sl).verdict
            assert sl.mass <= 1 + 1e-6
            assert sl.values.min() >= -1e-12 * sl.values.max()


def test_kernel_symmetry(poly_op):
    a = kernel_column(poly_op, [0.5], 0.5)
    b = kernel_column(poly_op, [1.5], 0.5)
    pa = a.values[poly_op.grid.node([1.5])]
    pb = b.values[poly_op.grid.node([0.5])]
    assert abs(pa - pb) / max(pa, pb) <= 0.01


@pytest.mark.parametrize("t", [0.5, 1.0])
def test_trace_identity(poly_op, t):
    cfg = EvolverConfig(tau=1e-3)
    x0 = poly_op.grid.node([1.0])
    half = kernel_column(poly_op, x0, t / 2, cfg)
    full = kernel_column(poly_op, x0, t, cfg)
    lhs = float(np.sum(half.values ** 2)) * poly_op.grid.cell_volume
    assert lhs == pytest.approx(full.diagonal, rel=0.02)


def test_slice_csv_and_manifest(tmp_path, poly_op):
    sl = kernel_column(poly_op, [0.0], 0.1)
    sl.to_csv(tmp_path / "k.csv", extra_header={"config_hash": "abc"})
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1] == "x,value"
    assert len(lines) == poly_op.n + 2
    man = sl.manifest()
    assert man["t"] == 0.1 and man["x0"] == [0.0] and man["scheme"] == "BE"


# --- semigroup audits -----------------------------------------------------


def test_submarkov_free_dirichlet_loss():
    op = assemble(IdentityFree(d=1), build_grid(1, 2.0, 0.02))
    ones = np.ones(op.n)
    rep = check_submarkov(op, EvolverConfig(tau=1e-3), [ones], times=(0.01,))
    assert rep.verdict
    u = evolve(op, ones, 0.01)
    assert u[op.n // 2] == pytest.approx(1.0, abs=1e-6)
    assert u[0] < 0.5


def test_submarkov_harmonic_strict_decay():
    op = assemble(IdentityFree(d=1, s=2.0), build_grid(1, 4.0, 0.02))
    u = evolve(op, np.ones(op.n), 0.1)
    assert np.all(u < 1.0)


def test_submarkov_poly_random_data(poly_op):
    rng = np.random.default_rng(5)
    samples = [rng.random(poly_op.n) for _ in range(4)]
    rep = check_submarkov(poly_op, EvolverConfig(tau=1e-3), samples, times=(0.1, 0.5, 1.0))
    assert rep.verdict, rep.line()


def test_submarkov_rejects_out_of_range_data(poly_op):
    with pytest.raises(ValueError):
        check_submarkov(poly_op, EvolverConfig(), [2 * np.ones(poly_op.n)])


def test_monotone_rho_free_gap_positive():
    f = IdentityFree(d=1)
    rep = check_monotone_rho(f, 2.0, 4.0, 0.02, lambda x: bump(x), 0.5)
    assert rep.verdict
    g1 = build_grid(1, 2.0, 0.02)
    near_edge = np.abs(g1.coords()[:, 0]) > 1.9
    # the larger box keeps mass the smaller box loses through its boundary
    op1 = assemble(f, g1)
    op2 = assemble(f, build_grid(1, 4.0, 0.02))
    u1 = evolve(op1, bump(g1.coords()), 0.5)
    u2 = evolve(op2, bump(op2.grid.coords()), 0.5)[g1.shared_with(op2.grid)]
    assert np.all((u2 - u1)[near_edge] > 0)


def test_monotone_rho_gap_vanishes():
    f = PolynomialIsotropic(d=1, m=4, s=4)
    small_t = check_monotone_rho(f, 2.0, 4.0, 0.02, lambda x: bump(x), 0.02)
    assert small_t.details["max_gap"] < 1e-6
    same = check_monotone_rho(f, 2.0, 2.0, 0.02, lambda x: bump(x), 0.5)
    assert same.details["max_gap"] == 0.0 and same.details["min_gap"] == 0.0


@pytest.mark.parametrize("field", [PolynomialIsotropic(d=1, m=4, s=4), ExponentialIsotropic(d=1, m=2, s=3)],
                         ids=["poly", "exp"])
def test_monotone_rho_model_families(field):
    assert check_monotone_rho(field, 2.0, 4.0 if field.family == "poly" else 3.0, 0.02,
                              lambda x: bump(x), 0.5).verdict


def test_ultracontractivity_free_1d():
    op = assemble(IdentityFree(d=1), build_grid(1, 5.0, 0.02))
    fit = ultracontractivity_probe(op, [0.05, 0.1, 0.2, 0.4], EvolverConfig(tau=1e-3, richardson=True))
    assert abs(fit.slope + 0.5) <= 0.15
    assert fit.c_fit == pytest.approx((4 * math.pi) ** -0.5, rel=0.05)
    assert fit.report.verdict and fit.monotone


def test_ultracontractivity_free_2d():
    op = assemble(IdentityFree(d=2), build_grid(2, 3.0, 0.05))
    fit = ultracontractivity_probe(op, [0.05, 0.1, 0.2, 0.4], EvolverConfig(tau=2e-3, richardson=True))
    assert abs(fit.slope + 1.0) <= 0.15
    assert fit.report.verdict


def test_ultracontractivity_poly_decays_faster(poly_op):
    fit = ultracontractivity_probe(poly_op, [0.05, 0.1, 0.2, 0.4], EvolverConfig(tau=1e-3))
    assert fit.slope <= -0.5
    assert fit.report.verdict
    assert fit.report.details["mode"] == "bound"


# --- xi_W -----------------------------------------------------------------


def test_xi_W_trivial_weight_is_mass_check(poly_op):
    spec = LyapunovSpec(POLYEXP, 0.0, 0.5, 1.0, 4.0, 4.0)
    slices = kernel_columns(poly_op, [[0.0], [1.0]], [0.5], EvolverConfig())[0]
    rep = check_xi_W(slices, spec, RateFunction(0.0, 0.0, 0.0), tol=0.0)
    masses = [s.mass for s in slices]
    assert rep.verdict
    assert rep.details["xi"] == pytest.approx(masses, rel=1e-12)


def test_xi_W_calibrated_rate():
    f = PolynomialIsotropic(d=1, m=4, s=4)
    spec = LyapunovSpec(POLYEXP, 0.3, 0.5, 1.0, 4.0, 4.0)
    rate = calibrate_rate(spec, f, grid=AuditGrid(d=1))
    op = assemble(f, build_grid(1, 6.0, 0.02))
    slices = [s for row in kernel_columns(op, [[0.0], [1.0], [2.0]], [0.25, 0.5, 1.0]) for s in row]
    assert check_xi_W(slices, spec, rate).verdict
    early = kernel_columns(op, [[2.0]], [0.01])[0]
    assert check_xi_W(early, spec, rate).verdict


def test_rho_stable_kernels_grows_until_stable():
    f = IdentityFree(d=1)
    res = rho_stable_kernels(f, 2.0, 0.02, [[0.0]], [0.5], tol=0.02)
    assert res.drift < 0.01
    assert res.op.grid.rho > 2.0  # the 2.0 box loses too much mass at t = 0.5
