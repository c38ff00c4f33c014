"""Coefficient families for A = div(Q grad) - V and their pointwise audits.

Points are arrays whose last axis is the spatial dimension; evaluators return
one value (or vector/matrix) per point. In one dimension a bare float or a 1-d
array of abscissae is accepted as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .reports import MarginReport

LOG_MAX = math.log(np.finfo(float).max)  # ~709.78


class CoefficientOverflow(OverflowError):
    """Plain-scale evaluation of an exponential coefficient left double range."""


def as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != d:
        raise ValueError(f"points have trailing dimension {x.shape[-1]}, expected {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    return x


def sq_norm(x: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", x, x)


class SmoothedRadialPower:
    """C^2 stand-in for |x|^beta, written as phi(|x|^2).

    phi(r2) = r2**(beta/2) for r2 >= 1. On [0, 1] it is the quadratic Taylor
    polynomial at r2 = 1 when that is nonnegative there (exact for beta = 2, 4),
    otherwise a cubic that keeps the same value and two derivatives at r2 = 1
    and takes the value 1/4 at the origin.
    """

    def __init__(self, beta: float):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        b = self.beta / 2.0
        a0, a1, a2 = 1.0, b, b * (b - 1.0) / 2.0
        q_origin = a0 - a1 + a2
        if 1.0 < b < 2.0:
            a3 = q_origin - 0.25
        else:
            a3 = 0.0
        # polynomial in u = r2 - 1
        self.coef = (a0, a1, a2, a3)

    @property
    def origin_value(self) -> float:
        a0, a1, a2, a3 = self.coef
        return a0 - a1 + a2 - a3

    def of_r2(self, r2):
        r2 = np.asarray(r2, dtype=float)
        a0, a1, a2, a3 = self.coef
        u = r2 - 1.0
        inner = a0 + u * (a1 + u * (a2 + u * a3))
        with np.errstate(invalid="ignore", divide="ignore"):
            outer = np.power(np.maximum(r2, 1.0), self.beta / 2.0)
        return np.where(r2 >= 1.0, outer, inner)

    def d_r2(self, r2):
        r2 = np.asarray(r2, dtype=float)
        a0, a1, a2, a3 = self.coef
        u = r2 - 1.0
        inner = a1 + u * (2.0 * a2 + 3.0 * a3 * u)
        b = self.beta / 2.0
        outer = b * np.power(np.maximum(r2, 1.0), b - 1.0)
        return np.where(r2 >= 1.0, outer, inner)

    def d2_r2(self, r2):
        r2 = np.asarray(r2, dtype=float)
        a0, a1, a2, a3 = self.coef
        u = r2 - 1.0
        inner = 2.0 * a2 + 6.0 * a3 * u
        b = self.beta / 2.0
        outer = b * (b - 1.0) * np.power(np.maximum(r2, 1.0), b - 2.0)
        return np.where(r2 >= 1.0, outer, inner)

    def radial(self, r):
        """|x|_*^beta as a function of r = |x|."""
        r = np.asarray(r, dtype=float)
        return self.of_r2(r * r)

    def __call__(self, x, d: int = 1):
        return self.of_r2(sq_norm(as_points(x, d)))


# ---------------------------------------------------------------------------
# coefficient families


@dataclass(frozen=True)
class CoefficientField:
    """Isotropic coefficients Q = q(x) I and potential V >= 0."""

    d: int = 1
    eta: float = 1.0

    family = "abstract"

    # scalar diffusion q and its gradient, potential V
    def q(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_q(self, x) -> np.ndarray:
        return np.log(self.q(x))

    def grad_q(self, x) -> np.ndarray:
        raise NotImplementedError

    def V(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_V(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.V(x))

    def points(self, x) -> np.ndarray:
        return as_points(x, self.d)

    def describe(self) -> dict:
        return {"family": self.family, "d": self.d, "eta": self.eta}


@dataclass(frozen=True)
class PolynomialIsotropic(CoefficientField):
    """Q(x) = (1 + |x|_*^m) I, V(x) = |x|^s."""

    m: float = 2.0
    s: float = 2.0
    family = "poly"

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("m > 0 required")

    @property
    def _smooth(self) -> SmoothedRadialPower:
        return SmoothedRadialPower(self.m)

    def q(self, x):
        x = self.points(x)
        return 1.0 + self._smooth.of_r2(sq_norm(x))

    def grad_q(self, x):
        x = self.points(x)
        return 2.0 * self._smooth.d_r2(sq_norm(x))[..., None] * x

    def V(self, x):
        x = self.points(x)
        return np.power(sq_norm(x), self.s / 2.0)

    def log_V(self, x):
        x = self.points(x)
        with np.errstate(divide="ignore"):
            return (self.s / 2.0) * np.log(sq_norm(x))

    def describe(self):
        return {**super().describe(), "m": self.m, "s": self.s}


@dataclass(frozen=True)
class ExponentialIsotropic(CoefficientField):
    """Q(x) = exp(|x|^m) I, V(x) = exp(|x|^s); plain scale raises past double range."""

    m: float = 2.0
    s: float = 3.0
    family = "exp"

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m >= 2 required")

    def log_q(self, x):
        x = self.points(x)
        return np.power(sq_norm(x), self.m / 2.0)

    def q(self, x):
        return _checked_exp(self.log_q(x), "Q")

    def grad_q(self, x):
        x = self.points(x)
        r2 = sq_norm(x)
        lq = np.power(r2, self.m / 2.0)
        fac = self.m * np.power(r2, self.m / 2.0 - 1.0) if self.m != 2 else 2.0 * np.ones_like(r2)
        return (fac * _checked_exp(lq, "G"))[..., None] * x

    def log_V(self, x):
        x = self.points(x)
        return np.power(sq_norm(x), self.s / 2.0)

    def V(self, x):
        return _checked_exp(self.log_V(x), "V")

    def describe(self):
        return {**super().describe(), "m": self.m, "s": self.s}


@dataclass(frozen=True)
class IdentityFree(CoefficientField):
    """Q = I with V(x) = v_scale * |x|^s (V = 0 when s is None)."""

    s: Optional[float] = None
    v_scale: float = 1.0
    family = "identity"

    def q(self, x):
        x = self.points(x)
        return np.ones(x.shape[:-1])

    def log_q(self, x):
        x = self.points(x)
        return np.zeros(x.shape[:-1])

    def grad_q(self, x):
        x = self.points(x)
        return np.zeros_like(x)

    def V(self, x):
        x = self.points(x)
        if self.s is None:
            return np.zeros(x.shape[:-1])
        if self.s == 0:
            return np.full(x.shape[:-1], float(self.v_scale))
        return self.v_scale * np.power(sq_norm(x), self.s / 2.0)

    def describe(self):
        return {**super().describe(), "s": self.s, "v_scale": self.v_scale}


@dataclass(frozen=True)
class Custom(CoefficientField):
    """User-supplied scalar diffusion q(x) and potential V(x).

    Both callables take an (..., d) array. Without ``grad_q_fn`` the gradient
    of q comes from central differences.
    """

    q_fn: Callable = None
    V_fn: Callable = None
    grad_q_fn: Optional[Callable] = None
    label: str = "custom"
    family = "custom"

    def q(self, x):
        x = self.points(x)
        return np.asarray(self.q_fn(x), dtype=float) * np.ones(x.shape[:-1])

    def V(self, x):
        x = self.points(x)
        return np.asarray(self.V_fn(x), dtype=float) * np.ones(x.shape[:-1])

    def grad_q(self, x):
        x = self.points(x)
        if self.grad_q_fn is not None:
            return np.asarray(self.grad_q_fn(x), dtype=float)
        g = np.empty_like(x)
        for k in range(self.d):
            step = 1e-6 * np.maximum(1.0, np.abs(x[..., k]))
            e = np.zeros(self.d)
            e[k] = 1.0
            xp = x + step[..., None] * e
            xm = x - step[..., None] * e
            g[..., k] = (self.q(xp) - self.q(xm)) / (2.0 * step)
        return g

    def describe(self):
        return {**super().describe(), "label": self.label}


def _checked_exp(log_values, what: str):
    log_values = np.asarray(log_values, dtype=float)
    if np.any(log_values > LOG_MAX):
        raise CoefficientOverflow(
            f"{what} = exp({float(np.max(log_values)):.4g}) exceeds double range; "
            "use the log-scale evaluator or a smaller domain"
        )
    return np.exp(log_values)


def make_field(family: str, d: int = 1, eta: float = 1.0, m=None, s=None, **extra) -> CoefficientField:
    """Build a field from its config block."""
    if family == "poly":
        return PolynomialIsotropic(d=d, eta=eta, m=float(m), s=float(s))
    if family == "exp":
        return ExponentialIsotropic(d=d, eta=eta, m=float(m), s=float(s))
    if family == "identity":
        return IdentityFree(d=d, eta=eta, s=None if s is None else float(s),
                            v_scale=float(extra.get("v_scale", 1.0)))
    if family == "custom":
        return Custom(d=d, eta=eta, q_fn=extra["q_fn"], V_fn=extra["V_fn"],
                      grad_q_fn=extra.get("grad_q_fn"), label=extra.get("label", "custom"))
    raise ValueError(f"unknown coefficient family {family!r}")


# ---------------------------------------------------------------------------
# spec-level operations


def eval_Q(field: CoefficientField, x) -> np.ndarray:
    """Diffusion matrix Q(x), shape (..., d, d)."""
    q = field.q(x)
    return q[..., None, None] * np.eye(field.d)


def log_eval_Q(field: CoefficientField, x) -> np.ndarray:
    """log of the scalar q with Q = q I."""
    return field.log_q(x)


def eval_V(field: CoefficientField, x) -> np.ndarray:
    return field.V(x)


def log_eval_V(field: CoefficientField, x) -> np.ndarray:
    return field.log_V(x)


def eval_G(field: CoefficientField, x) -> np.ndarray:
    """Row divergence G_j = sum_i D_i q_ij; for Q = q I this is grad q."""
    return field.grad_q(x)


def audit_samples(d: int, r_audit: float, n_radial: int = 200, n_dirs: int = 16,
                  n_core: int = 21) -> np.ndarray:
    """Core lattice in |x| <= 1 plus rays through the annulus 1 <= |x| <= r_audit."""
    radii = np.linspace(1.0, r_audit, n_radial)
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif d == 2:
        ang = np.linspace(0.0, 2 * np.pi, n_dirs, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        # Fibonacci sphere
        i = np.arange(n_dirs) + 0.5
        phi = np.arccos(1 - 2 * i / n_dirs)
        th = np.pi * (1 + 5 ** 0.5) * i
        dirs = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
        if d > 3:
            raise ValueError("d <= 3 supported")
    annulus = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    ticks = np.linspace(-1.0, 1.0, n_core)
    mesh = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    core = mesh[sq_norm(mesh) <= 1.0]
    return np.concatenate([core, annulus], axis=0)


def check_ellipticity(field: CoefficientField, samples) -> MarginReport:
    """Margins min eig Q(x) - eta, plus V >= 0 and symmetry."""
    x = field.points(samples)
    Q = eval_Q(field, x)
    sym = float(np.max(np.abs(Q - np.swapaxes(Q, -1, -2))))
    lam = np.linalg.eigvalsh(Q)[..., 0]
    v = field.V(x)
    margins = np.minimum(lam - field.eta, np.where(v >= 0, np.inf, v))
    return MarginReport.from_margins(
        "ellipticity", margins, points=x,
        grid_descriptor={"n_samples": int(x.shape[0])},
        details={"symmetry_residual": sym, "min_V": float(np.min(v))},
    )


@dataclass
class ZFunction:
    """Z(x) = W(1, x) for a Lyapunov spec, with the bound constant M."""

    spec: "object"
    M: float = 0.0

    def log_Z(self, x, field: CoefficientField):
        from .lyapunov import log_W

        return log_W(self.spec, 1.0, x, d=field.d)


def check_hyp11(field: CoefficientField, Z: ZFunction, samples) -> MarginReport:
    """Audit AZ <= M and eta*Lap Z - V Z <= M on the sample set.

    Both left sides are formed analytically as Z * (ratio) in log scale, so
    huge Z paired with a very negative ratio evaluates to -inf, not overflow.
    The reported M_hat is the sample maximum of the two quantities.
    """
    from .lyapunov import log_derivatives, generator_ratio

    x = field.points(samples)
    ders = log_derivatives(Z.spec, 1.0, x, field.d)
    r_A = generator_ratio(ders, field, x, include_time=False)
    r_eta = generator_ratio(ders, field, x, include_time=False, eta_only=True)
    logZ = ders.value
    AZ = _signed_exp(logZ, r_A)
    EZ = _signed_exp(logZ, r_eta)
    m_hat = float(max(np.max(AZ), np.max(EZ)))
    worst = np.maximum(AZ, EZ)
    return MarginReport.from_margins(
        "hyp11", Z.M - worst, points=x,
        grid_descriptor={"n_samples": int(x.shape[0]),
                         "r_max": float(np.sqrt(np.max(sq_norm(x))))},
        details={"M": Z.M, "M_hat": m_hat, "max_AZ": float(np.max(AZ)),
                 "max_etaZ": float(np.max(EZ))},
    )


def calibrate_hyp11_M(field: CoefficientField, Z: ZFunction, r_start: float = 6.0,
                      growth: float = 1.5, max_steps: int = 12) -> tuple:
    """Sample maximum M_hat of AZ and eta*Lap Z - VZ, with the radius grown until
    the maximum sits inside the sampled ball.

    Returns (M_hat, radius). Growth stops early when plain-scale coefficients
    would overflow.
    """
    r = float(r_start)
    m_hat = check_hyp11(field, Z, audit_samples(field.d, r)).details["M_hat"]
    for _ in range(max_steps):
        try:
            bigger = check_hyp11(field, Z, audit_samples(field.d, growth * r)).details["M_hat"]
        except CoefficientOverflow:
            break
        if bigger <= m_hat:
            break
        m_hat, r = bigger, growth * r
    return m_hat, r


def _signed_exp(log_mag, factor):
    """factor * exp(log_mag) without overflow to nan."""
    factor = np.asarray(factor, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        lg = log_mag + np.log(np.abs(factor))
        out = np.sign(factor) * np.exp(np.minimum(lg, LOG_MAX + 1.0))
    return np.where(factor == 0, 0.0, out)
