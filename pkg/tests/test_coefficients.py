import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schrokernel.coefficients import (
    CoefficientOverflow,
    Custom,
    ExponentialIsotropic,
    IdentityFree,
    PolynomialIsotropic,
    SmoothedRadialPower,
    ZFunction,
    audit_samples,
    calibrate_hyp11_M,
    check_ellipticity,
    check_hyp11,
    eval_G,
    eval_Q,
    eval_V,
    log_eval_V,
    make_field,
)
from schrokernel.lyapunov import EXPINT, POLYEXP, LyapunovSpec


# --- closed-form values ---------------------------------------------------


def test_eval_Q_poly_2d():
    f = PolynomialIsotropic(d=2, m=2, s=2)
    np.testing.assert_allclose(eval_Q(f, [3.0, 4.0]), 26.0 * np.eye(2), rtol=0, atol=1e-12)


def test_eval_Q_exp_origin_is_identity():
    f = ExponentialIsotropic(d=1, m=2, s=3)
    np.testing.assert_allclose(eval_Q(f, [0.0]), np.eye(1))


def test_eval_Q_poly_at_smoothing_boundary():
    f = PolynomialIsotropic(d=2, m=4, s=4)
    np.testing.assert_allclose(eval_Q(f, [1.0, 0.0]), 2.0 * np.eye(2), atol=1e-14)


def test_eval_V_examples():
    assert eval_V(PolynomialIsotropic(d=2, m=2, s=2), [3.0, 4.0]) == pytest.approx(25.0)
    assert eval_V(PolynomialIsotropic(d=2, m=4, s=4), [0.0, 0.0]) == 0.0
    assert eval_V(ExponentialIsotropic(d=2, m=2, s=3), [1.0, 0.0]) == pytest.approx(math.e)


def test_eval_G_examples():
    np.testing.assert_allclose(eval_G(PolynomialIsotropic(d=2, m=2, s=2), [1.0, 1.0]), [2.0, 2.0])
    np.testing.assert_allclose(eval_G(PolynomialIsotropic(d=1, m=4, s=4), [3.0]), [108.0])
    for f in (PolynomialIsotropic(d=2, m=3, s=3), ExponentialIsotropic(d=2, m=2, s=3)):
        np.testing.assert_array_equal(eval_G(f, [0.0, 0.0]), [0.0, 0.0])


def test_exp_gradient_closed_form():
    f = ExponentialIsotropic(d=2, m=3, s=4)
    x = np.array([1.5, -0.5])
    r = np.linalg.norm(x)
    expected = 3 * r * x * math.exp(r ** 3)
    np.testing.assert_allclose(eval_G(f, x), expected, rtol=1e-12)


# --- overflow handling ----------------------------------------------------


def test_exp_overflow_is_signalled():
    f = ExponentialIsotropic(d=1, m=2, s=3)
    with pytest.raises(CoefficientOverflow):
        eval_V(f, [9.5])
    assert float(log_eval_V(f, [9.5])) == pytest.approx(9.5 ** 3)


def test_log_scale_matches_plain_scale():
    f = ExponentialIsotropic(d=1, m=2, s=3)
    x = np.linspace(-4, 4, 17)[:, None]
    np.testing.assert_allclose(np.exp(f.log_q(x)), f.q(x), rtol=1e-13)
    np.testing.assert_allclose(np.exp(f.log_V(x)), f.V(x), rtol=1e-13)


def test_make_field_rejects_unknown_family():
    with pytest.raises(ValueError):
        make_field("spline", m=1, s=1)


# --- smoothed radial power ------------------------------------------------


@pytest.mark.parametrize("beta", [2.0, 4.0])
def test_smoothing_exact_for_even_integers(beta):
    # the Taylor polynomial of r2^(beta/2) is the function itself
    p = SmoothedRadialPower(beta)
    r = np.linspace(0, 2, 41)
    np.testing.assert_allclose(p.radial(r), r ** beta, atol=1e-14)


def test_smoothing_cubic_origin_value():
    assert SmoothedRadialPower(3.0).origin_value == pytest.approx(0.25)
    assert SmoothedRadialPower(1.0).origin_value == pytest.approx(0.375)


@pytest.mark.parametrize("beta", [0.5, 1.0, 1.5, 2.5, 3.0, 3.5, 5.0])
def test_smoothing_c2_at_junction(beta):
    """One-sided second differences, extrapolated to r = 1, agree across the junction."""
    p = SmoothedRadialPower(beta)
    h = 1e-4

    def d2(r):
        return (p.radial(r + h) - 2 * p.radial(r) + p.radial(r - h)) / h ** 2

    left = 2 * d2(1 - h) - d2(1 - 2 * h)
    right = 2 * d2(1 + h) - d2(1 + 2 * h)
    scale = max(abs(right), 1.0)
    assert abs(left - right) / scale < 1e-6
    # the analytic r2-derivatives match exactly at r2 = 1
    below = np.nextafter(1.0, 0.0)
    assert p.of_r2(below) == pytest.approx(p.of_r2(1.0), abs=1e-14)
    assert p.d_r2(below) == pytest.approx(p.d_r2(1.0), abs=1e-13)
    assert p.d2_r2(below) == pytest.approx(p.d2_r2(1.0), abs=1e-13)


@given(beta=st.floats(0.05, 8.0), r=st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_smoothing_nonnegative(beta, r):
    assert SmoothedRadialPower(beta).radial(r) >= 0.0


@given(beta=st.floats(0.05, 8.0), r=st.floats(1.0, 50.0))
@settings(max_examples=200, deadline=None)
def test_smoothing_exact_outside_unit_ball(beta, r):
    assert SmoothedRadialPower(beta).radial(r) == pytest.approx(r ** beta, rel=1e-12)


# --- invariants over sampled points -------------------------------------


_fields = [
    PolynomialIsotropic(d=2, m=4, s=4),
    PolynomialIsotropic(d=2, m=1, s=2),
    ExponentialIsotropic(d=2, m=2, s=3),
    IdentityFree(d=2, s=2.0),
]


@pytest.mark.parametrize("f", _fields, ids=lambda f: f.describe()["family"])
@given(x=st.lists(st.floats(-4.0, 4.0), min_size=2, max_size=2))
@settings(max_examples=60, deadline=None)
def test_Q_symmetric_and_elliptic(f, x):
    Q = eval_Q(f, x)
    np.testing.assert_array_equal(Q, Q.T)
    assert np.linalg.eigvalsh(Q)[0] >= f.eta
    assert eval_V(f, x) >= 0


def test_check_ellipticity_report():
    rep = check_ellipticity(PolynomialIsotropic(d=2, m=4, s=4), audit_samples(2, 5.0))
    assert rep.verdict
    assert rep.details["symmetry_residual"] == 0.0


@pytest.mark.parametrize("f", [PolynomialIsotropic(d=2, m=4, s=4), PolynomialIsotropic(d=2, m=3, s=2),
                               ExponentialIsotropic(d=2, m=2, s=3)],
                         ids=["poly44", "poly32", "exp23"])
def test_G_matches_central_differences(f):
    rng = np.random.default_rng(3)
    r = rng.uniform(1.1, 5.0, 30)
    ang = rng.uniform(0, 2 * np.pi, 30)
    X = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    step = 1e-5
    fd = np.empty_like(X)
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        # column k of Q differentiated along axis k; isotropic so q suffices
        fd[:, k] = (eval_Q(f, X + e)[:, k, k] - eval_Q(f, X - e)[:, k, k]) / (2 * step)
    G = eval_G(f, X)
    np.testing.assert_allclose(G, fd, rtol=1e-6)


def test_custom_field_numeric_gradient():
    f = Custom(d=1, q_fn=lambda x: 1 + x[..., 0] ** 2, V_fn=lambda x: x[..., 0] ** 2)
    np.testing.assert_allclose(eval_G(f, [[2.0]]), [[4.0]], rtol=1e-7)
    assert eval_V(f, [3.0]) == pytest.approx(9.0)


# --- Z-function audit -----------------------------------------------------


def test_hyp11_poly_finite_M():
    f = PolynomialIsotropic(d=1, m=4, s=4)
    Z = ZFunction(LyapunovSpec(POLYEXP, 0.5, 0.5, 1.0, 4.0, 4.0))
    M_hat, R = calibrate_hyp11_M(f, Z)
    assert math.isfinite(M_hat) and M_hat > 0
    # the maximum is interior: doubling the radius and refining changes nothing
    Z.M = M_hat * (1 + 1e-3)
    rep = check_hyp11(f, Z, audit_samples(1, 2 * R, n_radial=800))
    assert rep.verdict, rep.line()


def test_hyp11_exp_finite_M():
    f = ExponentialIsotropic(d=1, m=2, s=3)
    Z = ZFunction(LyapunovSpec(EXPINT, 0.5, 1.5, 2.0, 2.0, 3.0))
    M_hat, R = calibrate_hyp11_M(f, Z, r_start=3.0)
    assert math.isfinite(M_hat)
    Z.M = M_hat * (1 + 1e-3)
    assert check_hyp11(f, Z, audit_samples(1, R, n_radial=800)).verdict


def test_hyp11_trivial_Z():
    f = IdentityFree(d=1)
    Z = ZFunction(LyapunovSpec(POLYEXP, 0.0, 0.5, 1.0, 4.0, 4.0), M=0.0)
    rep = check_hyp11(f, Z, audit_samples(1, 5.0))
    assert rep.verdict
    assert rep.details["M_hat"] == 0.0


def test_hyp11_fail_names_worst_sample():
    f = PolynomialIsotropic(d=1, m=4, s=4)
    Z = ZFunction(LyapunovSpec(POLYEXP, 0.5, 0.5, 1.0, 4.0, 4.0), M=-1.0)
    rep = check_hyp11(f, Z, audit_samples(1, 5.0))
    assert not rep.verdict
    assert rep.worst_point is not None


def test_Z_grows_along_rays():
    Z = ZFunction(LyapunovSpec(POLYEXP, 0.5, 0.5, 1.0, 4.0, 4.0))
    f = PolynomialIsotropic(d=1, m=4, s=4)
    r = np.linspace(1.0, 20.0, 50)[:, None]
    assert np.all(np.diff(Z.log_Z(r, f)) > 0)
