"""Implicit time stepping of u' = -M u and heat-kernel extraction.

Backward Euler with an M-matrix is exactly positivity preserving, so it is
the scheme for every sign/contraction audit. Crank-Nicolson (with a few
backward-Euler half steps to damp the start) and Richardson extrapolation
are for accuracy comparisons only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import logsumexp

from .coefficients import CoefficientField, CoefficientOverflow
from .discretize import DiscreteOperator, Grid, assemble, build_grid
from .lyapunov import LyapunovSpec, RateFunction, log_W, log_xi_budget
from .reports import MarginReport

BE = "BE"
CN = "CN"


class EvolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvolverConfig:
    scheme: str = BE
    tau: float = 1e-3
    policy: str = "fixed"  # or "adaptive"
    richardson: bool = False
    target: float = 1e-6  # adaptive: error per unit time
    cn_ramp: int = 2
    max_halvings: int = 6

    def __post_init__(self):
        if self.scheme not in (BE, CN):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.tau > 0:
            raise ValueError("tau > 0 required")
        if self.policy not in ("fixed", "adaptive"):
            raise ValueError(f"unknown substep policy {self.policy!r}")

    def describe(self) -> dict:
        return {"scheme": self.scheme, "tau": self.tau, "policy": self.policy,
                "richardson": self.richardson}


class _Factors:
    """LU factors of I + a M, keyed by a."""

    def __init__(self, op: DiscreteOperator):
        self.op = op
        self._eye = sp.identity(op.n, format="csc")
        self._lu = {}

    def solve(self, a: float, rhs: np.ndarray) -> np.ndarray:
        key = float(a)
        lu = self._lu.get(key)
        if lu is None:
            lu = splu((self._eye + key * self.op.matrix).tocsc())
            self._lu[key] = lu
        return lu.solve(rhs)


def _n_steps(t: float, tau: float) -> tuple:
    n = max(1, int(math.ceil(t / tau - 1e-9)))
    return n, t / n


def _advance(factors: _Factors, u: np.ndarray, t: float, scheme: str, tau: float,
             ramp: int, first: bool) -> np.ndarray:
    if t <= 0:
        return u
    n, dt = _n_steps(t, tau)
    M = factors.op.matrix
    for k in range(n):
        if scheme == BE or (first and k < ramp):
            if scheme == BE:
                u = factors.solve(dt, u)
            else:
                u = factors.solve(dt / 2, factors.solve(dt / 2, u))
        else:
            u = factors.solve(dt / 2, u - (dt / 2) * (M @ u))
        if not np.all(np.isfinite(u)):
            raise EvolutionError(f"non-finite state after step {k + 1} of {n} (dt = {dt:.3g})")
    return u


def _evolve_fixed(factors, f0, times, scheme, tau, ramp):
    out = []
    u = np.array(f0, dtype=float)
    prev = 0.0
    for i, t in enumerate(times):
        u = _advance(factors, u, t - prev, scheme, tau, ramp, first=(i == 0 or prev == 0.0))
        out.append(u.copy())
        prev = t
    return out


def _evolve_extrapolated(factors, f0, times, config, tau):
    coarse = _evolve_fixed(factors, f0, times, config.scheme, tau, config.cn_ramp)
    if not config.richardson:
        return coarse, None
    fine = _evolve_fixed(factors, f0, times, config.scheme, tau / 2, 2 * config.cn_ramp)
    order = 1 if config.scheme == BE else 2
    w = 2 ** order
    extrap = [(w * b - a) / (w - 1) for a, b in zip(coarse, fine)]
    est = max(float(np.max(np.abs(b - a))) for a, b in zip(coarse, fine)) / (w - 1)
    return extrap, est


def evolve_times(op: DiscreteOperator, f0: np.ndarray, times: Sequence[float],
                 config: EvolverConfig = EvolverConfig()) -> list:
    """T(t) f0 for each t in increasing ``times``; f0 may be (n,) or (n, k)."""
    times = [float(t) for t in times]
    if any(t <= 0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be positive and increasing")
    f0 = np.asarray(f0, dtype=float)
    if f0.shape[0] != op.n:
        raise ValueError("initial data is not on the operator's grid")
    factors = _Factors(op)
    if config.policy == "fixed":
        out, _ = _evolve_extrapolated(factors, f0, times, config, config.tau)
        return out
    tau = config.tau
    prev = None
    scale = max(float(np.max(np.abs(f0))), np.finfo(float).tiny)
    for halving in range(config.max_halvings + 1):
        cur, _ = _evolve_extrapolated(factors, f0, times, config, tau)
        if prev is not None:
            est = max(float(np.max(np.abs(a - b))) for a, b in zip(prev, cur))
            if est <= config.target * times[-1] * scale:
                return cur
        prev = cur
        tau /= 2
    raise EvolutionError(
        f"error control did not reach {config.target:g} per unit time after "
        f"{config.max_halvings} halvings (last step {2 * tau:.3g})")


def evolve(op: DiscreteOperator, f0: np.ndarray, t: float,
           config: EvolverConfig = EvolverConfig()) -> np.ndarray:
    """Approximate T(t) f0 on the operator's grid."""
    return evolve_times(op, f0, [t], config)[0]


# ---------------------------------------------------------------------------
# kernel slices


@dataclass
class KernelSlice:
    t: float
    x0: int
    values: np.ndarray
    grid: Grid
    config: dict = dc_field(default_factory=dict)
    field: dict = dc_field(default_factory=dict)

    @property
    def x0_coords(self) -> np.ndarray:
        return self.grid.coords()[self.x0]

    @property
    def mass(self) -> float:
        return float(np.sum(self.values)) * self.grid.cell_volume

    @property
    def diagonal(self) -> float:
        return float(self.values[self.x0])

    def manifest(self) -> dict:
        return {"field": self.field, "rho": self.grid.rho, "h": self.grid.h, "d": self.grid.d,
                **self.config, "t": self.t, "x0": self.x0_coords.tolist(),
                "mass": self.mass, "min": float(self.values.min()),
                "max": float(self.values.max())}

    def to_csv(self, path, extra_header: Optional[dict] = None) -> None:
        coords = self.grid.coords()
        names = ["x", "y", "z"][: self.grid.d]
        with open(path, "w", newline="") as fh:
            if extra_header:
                fh.write("# " + json.dumps(extra_header, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(names + ["value"])
            for c, v in zip(coords, self.values):
                w.writerow([f"{ci:.10g}" for ci in c] + [f"{v:.17g}"])


def _node_index(op: DiscreteOperator, x0) -> int:
    if isinstance(x0, (int, np.integer)):
        return int(x0)
    return op.grid.node(x0)


def kernel_columns(op: DiscreteOperator, x0s, times: Sequence[float],
                   config: EvolverConfig = EvolverConfig(), t_floor: Optional[float] = None) -> list:
    """Kernel slices p(t, x0, .) for every x0 and t, from one multi-column evolution.

    Returns a list over times of lists over sources.
    """
    nodes = [_node_index(op, x) for x in x0s]
    floor = 10 * config.tau if t_floor is None else t_floor
    if min(times) < floor:
        raise ValueError(f"t >= t_floor = {floor:g} required")
    hd = op.grid.cell_volume
    F = np.zeros((op.n, len(nodes)))
    F[nodes, np.arange(len(nodes))] = 1.0 / hd
    states = evolve_times(op, F, times, config)
    meta = config.describe()
    fdesc = op.field.describe()
    return [[KernelSlice(t=float(t), x0=i, values=U[:, k].copy(), grid=op.grid,
                         config=meta, field=fdesc)
             for k, i in enumerate(nodes)]
            for t, U in zip(times, states)]


def kernel_column(op: DiscreteOperator, x0, t: float,
                  config: EvolverConfig = EvolverConfig(), t_floor: Optional[float] = None) -> KernelSlice:
    """Evolve the unit point mass at x0 up to time t."""
    return kernel_columns(op, [x0], [t], config, t_floor)[0][0]


def kernel_diagonal(op: DiscreteOperator, t: float, config: EvolverConfig = EvolverConfig(),
                    nodes=None, chunk: int = 256) -> np.ndarray:
    """p(t, x, x) for the given nodes (all nodes by default)."""
    nodes = np.arange(op.n) if nodes is None else np.asarray(nodes)
    out = np.empty(nodes.size)
    hd = op.grid.cell_volume
    for start in range(0, nodes.size, chunk):
        sel = nodes[start:start + chunk]
        F = np.zeros((op.n, sel.size))
        F[sel, np.arange(sel.size)] = 1.0 / hd
        U = evolve(op, F, t, config)
        out[start:start + sel.size] = U[sel, np.arange(sel.size)]
    return out


def check_slice(sl: KernelSlice, tol_mass: float = 1e-6) -> MarginReport:
    """Positivity (min >= -1e-12 max) and sub-Markov mass (<= 1 + tol_mass)."""
    vmax = float(sl.values.max())
    neg = float(sl.values.min()) + 1e-12 * vmax
    mass = 1.0 + tol_mass - sl.mass
    return MarginReport.from_margins(
        "kernel_slice", [neg / max(vmax, 1e-300), mass], points=["positivity", "mass"],
        details={"t": sl.t, "x0": sl.x0_coords.tolist(), "mass": sl.mass,
                 "min": float(sl.values.min()), "max": vmax})


# ---------------------------------------------------------------------------
# semigroup audits


def check_submarkov(op: DiscreteOperator, config: EvolverConfig, samples: Sequence[np.ndarray],
                    times: Sequence[float] = (0.1, 0.5, 1.0), tol: float = 1e-12) -> MarginReport:
    """0 <= T(t) f <= 1 (+ tol) for data 0 <= f <= 1."""
    margins, where = [], []
    maxima = []
    for i, f in enumerate(samples):
        f = np.asarray(f, dtype=float)
        if f.min() < 0 or f.max() > 1:
            raise ValueError("samples must satisfy 0 <= f <= 1")
        for t, u in zip(times, evolve_times(op, f, times, config)):
            margins += [float(u.min()) + tol, 1.0 + tol - float(u.max())]
            where += [(i, t, "min"), (i, t, "max")]
            maxima.append(float(u.max()))
    return MarginReport.from_margins(
        "submarkov", margins, points=where, grid_descriptor=op.grid.describe(),
        details={"times": list(times), "max_value": max(maxima), "config": config.describe()})


def check_monotone_rho(field: CoefficientField, rho1: float, rho2: float, h: float,
                       f: Callable, t: float, config: EvolverConfig = EvolverConfig(),
                       ops=None) -> MarginReport:
    """T^(rho1)(t) f <= T^(rho2)(t) f + 1e-8 ||f||_inf on the shared nodes.

    ``f`` is a callable on (n, d) coordinates; on the smaller box it is
    restricted, on the bigger box it is used as is and must vanish outside
    the smaller box.
    """
    if rho1 > rho2:
        raise ValueError("rho1 <= rho2 required")
    g1 = build_grid(field.d, rho1, h)
    g2 = build_grid(field.d, rho2, h)
    op1, op2 = ops if ops is not None else (assemble(field, g1), assemble(field, g2))
    f1 = np.asarray(f(g1.coords()), dtype=float)
    f2 = np.asarray(f(g2.coords()), dtype=float)
    shared = g1.shared_with(g2)
    outside = np.ones(g2.n, dtype=bool)
    outside[shared] = False
    if f1.min() < 0 or np.any(f2[outside] != 0):
        raise ValueError("f must be nonnegative and supported in the smaller box")
    u1 = evolve(op1, f1, t, config)
    u2 = evolve(op2, f2, t, config)[shared]
    fmax = float(np.max(np.abs(f1)))
    tol = 1e-8 * fmax
    gap = u2 - u1
    rep = MarginReport.from_margins(
        "monotone_rho", gap + tol, points=g1.coords(),
        grid_descriptor={"rho1": rho1, "rho2": rho2, "h": h, "t": t},
        details={"tol": tol, "max_gap": float(gap.max()), "min_gap": float(gap.min())})
    return rep


@dataclass
class UltraFit:
    slope: float
    c_fit: float
    c_calibrated: float
    times: list
    sup_diag: list
    nodes: list
    monotone: bool
    report: MarginReport


def diagonal_probe_nodes(grid: Grid, per_axis: int = 5) -> list:
    """Coarse lattice of nodes with |x| <= rho/2."""
    ticks = np.linspace(-grid.rho / 2, grid.rho / 2, per_axis)
    ticks = np.rint(ticks / grid.h) * grid.h
    mesh = np.stack(np.meshgrid(*([ticks] * grid.d), indexing="ij"), axis=-1).reshape(-1, grid.d)
    keep = np.sqrt(np.sum(mesh ** 2, axis=1)) <= grid.rho / 2 + 1e-12
    return sorted({grid.node(p) for p in mesh[keep]})


def ultracontractivity_probe(op: DiscreteOperator, times: Sequence[float],
                             config: EvolverConfig = EvolverConfig(), nodes=None,
                             slack: float = 0.15, mode: str = "auto") -> UltraFit:
    """Fit sup_x p(t, x, x) ~ c t^slope over ``times``.

    Verdicts by ``mode``:

    * ``"slope"``: slope >= -d/2 - slack
    * ``"two_sided"``: |slope + d/2| <= slack
    * ``"bound"``: sup p(t) t^(d/2) <= (1 + slack) * its value at the first time,
      i.e. decay at least as fast as t^(-d/2)
    * ``"auto"``: two_sided when V vanishes on the grid, bound otherwise
    """
    if mode == "auto":
        mode = "two_sided" if not np.any(op.V_nodes) else "bound"
    if mode not in ("slope", "two_sided", "bound"):
        raise ValueError(f"unknown mode {mode!r}")
    nodes = diagonal_probe_nodes(op.grid) if nodes is None else list(nodes)
    slices = kernel_columns(op, nodes, times, config)
    sup = np.array([max(s.diagonal for s in row) for row in slices])
    t = np.asarray(times, dtype=float)
    slope, icpt = np.polyfit(np.log(t), np.log(sup), 1)
    d = op.grid.d
    scaled = sup * t ** (d / 2)
    c_cal = float(np.max(scaled))
    monotone = bool(np.all(np.diff(sup) <= 0))
    if mode == "slope":
        margins, pts = [slope + d / 2 + slack], [float(slope)]
    elif mode == "two_sided":
        margins, pts = [slack - abs(slope + d / 2)], [float(slope)]
    else:
        margins, pts = np.log1p(slack) + math.log(scaled[0]) - np.log(scaled), t
    rep = MarginReport.from_margins(
        "ultracontractivity", margins, points=pts,
        grid_descriptor={**op.grid.describe(), "nodes": len(nodes)},
        details={"mode": mode, "slope": float(slope), "c_fit": float(math.exp(icpt)),
                 "c_calibrated": c_cal, "monotone_in_t": monotone,
                 "times": list(map(float, times)), "sup_diag": sup.tolist()})
    return UltraFit(float(slope), float(math.exp(icpt)), c_cal, list(map(float, times)),
                    sup.tolist(), nodes, monotone, rep)


def check_xi_W(slices: Sequence[KernelSlice], spec: LyapunovSpec, rate: RateFunction,
               tol: float = 0.05) -> MarginReport:
    """sum_y p(t, x0, y) W(t, y) h^d <= xi_budget * W(0, x0) * (1 + tol), in log scale."""
    log_budget = log_xi_budget(rate)
    margins, where, xis = [], [], []
    for sl in slices:
        d = sl.grid.d
        coords = sl.grid.coords()
        pos = sl.values > 0
        lw = log_W(spec, min(sl.t, 1.0), coords[pos], d=d)
        log_xi = float(logsumexp(np.log(sl.values[pos]) + lw)) + math.log(sl.grid.cell_volume)
        allowed = log_budget + float(log_W(spec, 0.0, sl.x0_coords, d=d)) + math.log1p(tol)
        margins.append(allowed - log_xi)
        where.append({"t": sl.t, "x0": sl.x0_coords.tolist()})
        xis.append(math.exp(log_xi))
    return MarginReport.from_margins(
        "xi_W", margins, points=where,
        details={"log_budget": log_budget, "xi": xis, "tol": tol})


# ---------------------------------------------------------------------------
# truncation control


def _grown_rho(rho: float, h: float, factor: float = 1.5) -> float:
    return math.ceil(factor * rho / h - 1e-9) * h


@dataclass
class StableKernels:
    op: DiscreteOperator
    slices: list
    rho_history: list
    drift: float


def rho_stable_kernels(field: CoefficientField, rho: float, h: float, x0s, times,
                       config: EvolverConfig = EvolverConfig(), tol: float = 0.02,
                       max_growth: int = 3) -> StableKernels:
    """Kernel slices whose values move < tol/2 (relative L-inf) from rho to 1.5 rho.

    rho is enlarged until that holds; the slices on the accepted (smaller) box
    are returned.
    """
    history = []
    op = assemble(field, build_grid(field.d, rho, h))
    cur = kernel_columns(op, x0s, times, config)
    for _ in range(max_growth + 1):
        rho_big = _grown_rho(op.grid.rho, h)
        try:
            big_op = assemble(field, build_grid(field.d, rho_big, h))
        except CoefficientOverflow:
            history.append((op.grid.rho, None))
            return StableKernels(op, cur, history, float("nan"))
        big = kernel_columns(big_op, x0s, times, config)
        shared = op.grid.shared_with(big_op.grid)
        drift = 0.0
        for row_s, row_b in zip(cur, big):
            for a, b in zip(row_s, row_b):
                ref = max(float(np.max(np.abs(b.values))), 1e-300)
                drift = max(drift, float(np.max(np.abs(b.values[shared] - a.values))) / ref)
        history.append((op.grid.rho, drift))
        if drift < 0.5 * tol:
            return StableKernels(op, cur, history, drift)
        op, cur = big_op, big
    raise EvolutionError(f"kernel not stable under domain growth: history {history}")
