"""Time-dependent Lyapunov functions W(t, x) = exp(l(t, x)) and their audits.

Two families are supported:

* ``polyexp``: l = eps * t**alpha * |x|_*^beta
* ``expint``:  l = eps * t**alpha * I(|x|_*),  I(r) = int_0^r exp(tau**beta / 2) dtau

All generator evaluations are done on l (log W): W itself is never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import integrate

from .coefficients import CoefficientField, SmoothedRadialPower, as_points, sq_norm
from .reports import MarginReport

POLYEXP = "polyexp"
EXPINT = "expint"


class InadmissibleParameters(ValueError):
    """A parameter set violates one of the admissibility inequalities."""


# ---------------------------------------------------------------------------
# parameter regions


@dataclass(frozen=True)
class ParamRegion:
    family: str
    m: float
    s: float
    beta: float
    beta_range: tuple
    alpha_min: float
    eps_max: float  # eps < eps1 < eps2 < eps_max

    def gamma_interval(self, alpha: float) -> tuple:
        return gamma_interval(self.family, self.m, self.beta, alpha)

    def check_alpha(self, alpha: float):
        if not alpha > self.alpha_min:
            raise InadmissibleParameters(f"alpha > {self.alpha_min:.6g} violated (alpha = {alpha})")

    def check_eps_chain(self, *eps):
        if any(e <= 0 for e in eps):
            raise InadmissibleParameters("eps > 0 violated")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise InadmissibleParameters("eps < eps1 < eps2 violated")
        if eps[-1] >= self.eps_max:
            raise InadmissibleParameters(f"eps2 < 1/beta = {self.eps_max:.6g} violated")


def admissible_params(family: str, m: float, s: float, beta: Optional[float] = None) -> ParamRegion:
    """Parameter region of the weight functions used by the kernel bounds.

    Polynomial coefficients fix beta = (s - m + 2) / 2. Exponential ones allow
    beta in [m/2 + 1, m]; the lower end is returned unless ``beta`` is given.
    """
    if family in ("poly", POLYEXP):
        if not m > 0:
            raise InadmissibleParameters("m > 0 violated")
        if not s > abs(m - 2):
            raise InadmissibleParameters(f"s > |m−2| violated ({s} <= {abs(m - 2)})")
        b = (s - m + 2) / 2.0
        return ParamRegion(POLYEXP, m, s, b, (b, b), b / (b + m - 2), 1.0 / b)
    if family in ("exp", EXPINT):
        if not m >= 2:
            raise InadmissibleParameters("m >= 2 violated")
        if not m < s:
            raise InadmissibleParameters(f"m < s violated ({m} >= {s})")
        lo, hi = m / 2.0 + 1.0, float(m)
        b = lo if beta is None else float(beta)
        if not lo <= b <= hi:
            raise InadmissibleParameters(f"m/2+1 <= beta <= m violated (beta = {b})")
        return ParamRegion(EXPINT, m, s, b, (lo, hi), (2 * b + m - 2) / (2 * m), math.inf)
    raise ValueError(f"unknown family {family!r}")


def gamma_interval(family: str, m: float, beta: float, alpha: float) -> tuple:
    if family == POLYEXP:
        return 1.0 / (beta + m - 2), (alpha + 1) / (2 * beta + m - 2)
    return 1.0 / m, (alpha + 1) / (beta + 1.5 * m - 1)


# ---------------------------------------------------------------------------
# specs and rates


@dataclass(frozen=True)
class LyapunovSpec:
    family: str
    eps: float
    alpha: float
    beta: float
    m: float
    s: float

    def validate(self):
        if self.eps < 0:
            raise InadmissibleParameters("eps >= 0 violated")
        if self.family == POLYEXP:
            lo = max(2.0 - self.m, 0.0)
            if not self.beta > lo:
                raise InadmissibleParameters(f"beta > (2−m)∨0 = {lo:.6g} violated (beta = {self.beta})")
            amin = self.beta / (self.beta + self.m - 2)
        elif self.family == EXPINT:
            if not (self.m / 2 + 1 <= self.beta <= self.m):
                raise InadmissibleParameters(f"m/2+1 <= beta <= m violated (beta = {self.beta})")
            amin = (2 * self.beta + self.m - 2) / (2 * self.m)
        else:
            raise ValueError(f"unknown Lyapunov family {self.family!r}")
        if not self.alpha > amin:
            raise InadmissibleParameters(f"alpha > {amin:.6g} violated (alpha = {self.alpha})")
        return self

    def with_eps(self, eps: float) -> "LyapunovSpec":
        return replace(self, eps=float(eps))

    def gamma_interval(self) -> tuple:
        return gamma_interval(self.family, self.m, self.beta, self.alpha)

    def default_gamma(self) -> float:
        lo, hi = self.gamma_interval()
        return 0.5 * (lo + hi)

    def rate_exponent(self, gamma: float) -> float:
        if self.family == POLYEXP:
            return self.alpha - gamma * (2 * self.beta + self.m - 2)
        return self.alpha - gamma * (self.beta + 1.5 * self.m - 1)

    def describe(self) -> dict:
        return {"family": self.family, "eps": self.eps, "alpha": self.alpha,
                "beta": self.beta, "m": self.m, "s": self.s}


@dataclass(frozen=True)
class RateFunction:
    """h(t) = C * t**p."""

    C: float
    p: float
    gamma: float

    def __call__(self, t):
        return self.C * np.power(np.asarray(t, dtype=float), self.p)

    @classmethod
    def for_spec(cls, spec: LyapunovSpec, gamma: Optional[float] = None, C: float = 0.0):
        gamma = spec.default_gamma() if gamma is None else float(gamma)
        return cls(C=float(C), p=spec.rate_exponent(gamma), gamma=gamma)


def log_xi_budget(rate: RateFunction) -> float:
    """int_0^1 h = C / (p + 1)."""
    if not rate.p > -1:
        raise InadmissibleParameters(f"rate exponent p = {rate.p} <= -1 is not integrable on (0,1)")
    return rate.C / (rate.p + 1.0)


def xi_budget(rate: RateFunction) -> float:
    """exp(int_0^1 h) = exp(C / (p + 1)); inf past double range."""
    lb = log_xi_budget(rate)
    return math.exp(lb) if lb < 709.0 else math.inf


# ---------------------------------------------------------------------------
# the radial profile and its derivatives


def exp_integral(r, beta: float, epsrel: float = 1e-10) -> np.ndarray:
    """I(r) = int_0^r exp(tau**beta / 2) dtau, adaptive quadrature.

    Radii are sorted and integrated segment by segment, so a whole array costs
    one pass over its distinct values.
    """
    r = np.asarray(r, dtype=float)
    flat = r.ravel()
    if np.any(flat < 0):
        raise ValueError("radius must be nonnegative")
    uniq, inv = np.unique(flat, return_inverse=True)
    f = lambda tau: math.exp(0.5 * tau ** beta)
    out = np.empty_like(uniq)
    acc, prev = 0.0, 0.0
    for i, b in enumerate(uniq):
        if b > prev:
            val, _ = integrate.quad(f, prev, b, epsabs=0.0, epsrel=epsrel, limit=200)
            acc += val
            prev = b
        out[i] = acc
    return out[inv].reshape(r.shape)


@dataclass
class LogDerivatives:
    """l, dl/dt, grad l, Hessian of l at a batch of points."""

    value: np.ndarray
    dt: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def _profile(spec: LyapunovSpec, r2: np.ndarray):
    """g(r2), g'(r2), g''(r2) with l = eps t^alpha g(|x|^2)."""
    if spec.family == POLYEXP:
        sm = SmoothedRadialPower(spec.beta)
        return sm.of_r2(r2), sm.d_r2(r2), sm.d2_r2(r2)
    sm = SmoothedRadialPower(1.0)
    psi, dpsi, d2psi = sm.of_r2(r2), sm.d_r2(r2), sm.d2_r2(r2)
    b = spec.beta
    e = np.exp(0.5 * np.power(psi, b))
    g = exp_integral(psi, b)
    g1 = e * dpsi
    g2 = e * (0.5 * b * np.power(psi, b - 1) * dpsi ** 2 + d2psi)
    return g, g1, g2


def _t_scale(spec: LyapunovSpec, t: float):
    t = float(t)
    if t < 0:
        raise ValueError("t >= 0 required")
    s = spec.eps * t ** spec.alpha if t > 0 else 0.0
    st = spec.eps * spec.alpha * t ** (spec.alpha - 1.0) if t > 0 else math.inf
    return s, st


def log_W(spec: LyapunovSpec, t: float, x, d: int = 1) -> np.ndarray:
    """log W(t, x)."""
    x = as_points(x, d)
    s, _ = _t_scale(spec, t)
    if s == 0.0:
        return np.zeros(x.shape[:-1])
    r2 = sq_norm(x)
    if spec.family == POLYEXP:
        g = SmoothedRadialPower(spec.beta).of_r2(r2)
    else:
        g = exp_integral(SmoothedRadialPower(1.0).of_r2(r2), spec.beta)
    return s * g


def log_derivatives(spec: LyapunovSpec, t: float, x, d: int = 1) -> LogDerivatives:
    x = as_points(x, d)
    r2 = sq_norm(x)
    g, g1, g2 = _profile(spec, r2)
    s, st = _t_scale(spec, t)
    eye = np.eye(d)
    grad = (2.0 * s * g1)[..., None] * x
    hess = (2.0 * s * g1)[..., None, None] * eye + (4.0 * s * g2)[..., None, None] * (
        x[..., :, None] * x[..., None, :])
    dt = st * g if t > 0 else np.zeros_like(g)
    return LogDerivatives(value=s * g, dt=dt, grad=grad, hess=hess)


def generator_ratio(ders: LogDerivatives, field: CoefficientField, x, include_time=True,
                    eta_only=False, drift=None) -> np.ndarray:
    """(d_t + A) W / W, or with A replaced by eta*Lap - V when ``eta_only``.

    AW/W = q (tr H + |grad l|^2) + G . grad l - V for Q = q I; an optional
    drift F adds F . grad l.
    """
    x = field.points(x)
    lap = np.trace(ders.hess, axis1=-2, axis2=-1)
    gsq = sq_norm(ders.grad)
    if eta_only:
        out = field.eta * (lap + gsq)
    else:
        G = field.grad_q(x)
        if drift is not None:
            G = G + np.asarray(drift(x), dtype=float)
        out = field.q(x) * (lap + gsq) + np.einsum("...i,...i->...", G, ders.grad)
    out = out - field.V(x)
    if include_time:
        out = out + ders.dt
    return out


def apply_L_ratio(spec: LyapunovSpec, field: CoefficientField, t: float, x, drift=None) -> np.ndarray:
    """LW/W with L = d_t + A (+ F . grad when a drift is given)."""
    ders = log_derivatives(spec, t, x, field.d)
    return generator_ratio(ders, field, x, drift=drift)


def apply_eta_ratio(spec: LyapunovSpec, field: CoefficientField, t: float, x) -> np.ndarray:
    """(d_t W + eta Lap W - V W) / W."""
    ders = log_derivatives(spec, t, x, field.d)
    return generator_ratio(ders, field, x, eta_only=True)


# ---------------------------------------------------------------------------
# audits


@dataclass(frozen=True)
class AuditGrid:
    """Tensor grid of times (geometric in [t_min, 1 - t_min]) and points."""

    d: int = 1
    r_audit: float = 6.0
    n_t: int = 40
    n_r: int = 200
    n_dirs: int = 8
    n_core: int = 21
    t_min: float = 1e-3

    def times(self) -> np.ndarray:
        return np.geomspace(self.t_min, 1.0 - self.t_min, self.n_t)

    def points(self) -> np.ndarray:
        from .coefficients import audit_samples

        return audit_samples(self.d, self.r_audit, self.n_r, self.n_dirs, self.n_core)

    def refined(self, factor: int = 2) -> "AuditGrid":
        return replace(self, n_t=factor * self.n_t, n_r=factor * self.n_r,
                       n_core=factor * self.n_core - 1,
                       n_dirs=self.n_dirs if self.d == 1 else factor * self.n_dirs)

    def describe(self) -> dict:
        return {"d": self.d, "r_audit": self.r_audit, "n_t": self.n_t, "n_r": self.n_r,
                "n_dirs": self.n_dirs, "n_core": self.n_core, "t_min": self.t_min}


def _ratios_on_grid(spec, field, grid: AuditGrid):
    ts = grid.times()
    xs = grid.points()
    r_L = np.empty((ts.size, xs.shape[0]))
    r_E = np.empty_like(r_L)
    for i, t in enumerate(ts):
        ders = log_derivatives(spec, t, xs, field.d)
        r_L[i] = generator_ratio(ders, field, xs)
        r_E[i] = generator_ratio(ders, field, xs, eta_only=True)
    return ts, xs, r_L, r_E


def audit_lyapunov(spec: LyapunovSpec, field: CoefficientField, rate: RateFunction,
                   grid: Optional[AuditGrid] = None) -> MarginReport:
    """Margins h(t) - LW/W and h(t) - (d_t + eta Lap - V)W/W on the grid."""
    spec.validate()
    grid = grid or AuditGrid(d=field.d)
    ts, xs, r_L, r_E = _ratios_on_grid(spec, field, grid)
    h = rate(ts)[:, None]
    m_L, m_E = h - r_L, h - r_E
    margins = np.minimum(m_L, m_E)
    i, j = np.unravel_index(np.argmin(margins), margins.shape)
    rep = MarginReport.from_margins(
        "lyapunov", margins.ravel(),
        grid_descriptor=grid.describe(),
        details={"spec": spec.describe(), "rate": {"C": rate.C, "p": rate.p, "gamma": rate.gamma},
                 "margin_L": float(m_L[i, j]), "margin_eta": float(m_E[i, j]),
                 "min_margin_L": float(m_L.min()), "min_margin_eta": float(m_E.min())},
    )
    rep.worst_point = {"t": float(ts[i]), "x": xs[j].tolist()}
    return rep


def calibrate_rate(spec: LyapunovSpec, field: CoefficientField, gamma: Optional[float] = None,
                   grid: Optional[AuditGrid] = None, safety: float = 1.25) -> RateFunction:
    """Smallest C >= 0 making both Lyapunov inequalities hold on the grid, times ``safety``."""
    spec.validate()
    gamma = spec.default_gamma() if gamma is None else float(gamma)
    lo, hi = spec.gamma_interval()
    if not lo < gamma < hi:
        raise InadmissibleParameters(f"gamma in ({lo:.6g}, {hi:.6g}) violated (gamma = {gamma})")
    grid = grid or AuditGrid(d=field.d)
    p = spec.rate_exponent(gamma)
    ts, _, r_L, r_E = _ratios_on_grid(spec, field, grid)
    need = np.maximum(r_L, r_E).max(axis=1) / ts ** p
    C = max(0.0, float(need.max())) * safety
    return RateFunction(C=C, p=p, gamma=gamma)


# ---------------------------------------------------------------------------
# growth conditions for the polynomial family


def growth_threshold(m: float, eps: float, beta: float) -> float:
    """Radius beyond which m r^-beta - 1/(eps beta) < -1 (requires eps beta < 1)."""
    if not eps * beta < 1:
        raise InadmissibleParameters("eps*beta < 1 violated")
    return (m / (1.0 / (eps * beta) - 1.0)) ** (1.0 / beta)


def growth_proxy(field: CoefficientField, eps: float, beta: float, m: float, x) -> np.ndarray:
    """|x|^(1-beta-m) (G . x/|x| - V / (eps beta |x|^(beta-1))) at |x| >= 1."""
    x = field.points(x)
    r = np.sqrt(sq_norm(x))
    G = field.grad_q(x)
    radial = np.einsum("...i,...i->...", G, x) / r
    return r ** (1 - beta - m) * (radial - field.V(x) / (eps * beta * r ** (beta - 1)))


def check_growth_condition(field: CoefficientField, spec: LyapunovSpec, Lambda: float = 1.0,
                           radii=None) -> MarginReport:
    """Compare the limsup proxy against -Lambda along the first axis."""
    if radii is None:
        K = growth_threshold(spec.m, spec.eps, spec.beta)
        radii = np.array([2.0 * K, 4.0 * K, 8.0 * K])
    radii = np.asarray(radii, dtype=float)
    pts = np.zeros((radii.size, field.d))
    pts[:, 0] = radii
    vals = growth_proxy(field, spec.eps, spec.beta, spec.m, pts)
    return MarginReport.from_margins(
        "growth", -Lambda - vals, points=radii,
        details={"Lambda": Lambda, "proxy": vals.tolist(), "cq_eps_beta": spec.eps * spec.beta},
    )
