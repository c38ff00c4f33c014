"""Low-lying spectrum of A_h = -M, eigenvalue saturation in rho, eigenfunction bounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, splu

from .coefficients import CoefficientField
from .discretize import DiscreteOperator, assemble, build_grid
from .lyapunov import exp_integral
from .reports import MarginReport


class EigenError(RuntimeError):
    pass


@dataclass
class SpectralResult:
    eigenvalues: np.ndarray  # of A_h, decreasing (all < 0 when V != 0)
    vectors: np.ndarray  # columns with sum psi^2 h^d = 1
    residuals: np.ndarray
    op: DiscreteOperator

    @property
    def grid(self):
        return self.op.grid

    def rayleigh(self) -> np.ndarray:
        hd = self.grid.cell_volume
        M = self.op.matrix
        return np.array([-float(v @ (M @ v)) * hd for v in self.vectors.T])

    def orthonormality_error(self) -> float:
        G = self.vectors.T @ self.vectors * self.grid.cell_volume
        return float(np.max(np.abs(G - np.eye(G.shape[0]))))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "eigenvalue", "residual"])
            for i, (lam, r) in enumerate(zip(self.eigenvalues, self.residuals)):
                w.writerow([i, f"{lam:.17g}", f"{r:.3e}"])


def _residuals(M, mu, V) -> np.ndarray:
    return np.linalg.norm(M @ V - V * mu, axis=0)


def _polish(M, mu, V, sweeps: int = 2):
    """Block inverse iteration + Rayleigh-Ritz around the computed cluster."""
    n = M.shape[0]
    shift = 0.5 * float(mu[0]) if mu[0] > 0 else 0.0
    lu = splu((M - shift * sp.identity(n, format="csc")).tocsc())
    for _ in range(sweeps):
        V, _ = np.linalg.qr(lu.solve(V))
        H = V.T @ (M @ V)
        mu, Y = np.linalg.eigh(0.5 * (H + H.T))
        V = V @ Y
    return mu, V


def eigen_lowest(op: DiscreteOperator, count: int, tol: float = 1e-8) -> SpectralResult:
    """The ``count`` eigenvalues of A_h closest to zero (shift-invert Lanczos)."""
    n = op.n
    if count < 1 or count > min(50, n // 10):
        raise ValueError(f"count must be in [1, min(50, n/10) = {min(50, n // 10)}]")
    M = op.matrix.tocsc()
    # fixed start vector so repeated runs are bitwise identical
    v0 = np.random.default_rng(0).standard_normal(n)
    try:
        mu, V = eigsh(M, k=count, sigma=0.0, which="LM", tol=0.0, maxiter=20 * n, v0=v0)
    except ArpackNoConvergence as exc:
        raise EigenError(f"eigensolver did not converge ({len(exc.eigenvalues)} of {count} pairs)") from None
    order = np.argsort(mu)
    mu, V = mu[order], V[:, order]
    res = _residuals(M, mu, V)
    if np.max(res) > tol:
        mu, V = _polish(M, mu, V)
        res = _residuals(M, mu, V)
    # unit Euclidean norm is unit discrete L2 norm after rescaling by h^(-d/2);
    # the residual of a unit vector is the same in both normalizations
    hd = op.grid.cell_volume
    V = V / math.sqrt(hd)
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return SpectralResult(eigenvalues=-mu, vectors=V, residuals=res, op=op)


@dataclass
class StabilityTable:
    rhos: list
    eigenvalues: list  # per rho
    drift: float
    report: MarginReport


def eigen_rho_stability(field: CoefficientField, rhos: Sequence[float], h: float, count: int,
                        tol: float = 1e-4) -> StabilityTable:
    """Eigenvalues at increasing rho; saturation means relative drift < tol at the two largest."""
    rhos = sorted(float(r) for r in rhos)
    if len(rhos) < 2:
        raise ValueError("need at least two domain sizes")
    table = []
    for rho in rhos:
        res = eigen_lowest(assemble(field, build_grid(field.d, rho, h)), count)
        table.append(res.eigenvalues)
    a, b = table[-2], table[-1]
    drift = float(np.max(np.abs(b - a) / np.abs(b)))
    rep = MarginReport.from_margins(
        "eigen_rho_stability", [tol - drift], points=[rhos[-1]],
        grid_descriptor={"h": h, "rho": rhos},
        details={"drift": drift, "eigenvalues": [e.tolist() for e in table]})
    return StabilityTable(rhos, [e.tolist() for e in table], drift, rep)


def central_nodes(grid, fraction: float = 0.5) -> np.ndarray:
    return np.flatnonzero(grid.radius() <= fraction * grid.rho + 1e-12)


def eigenfunction_bound_check(result: SpectralResult, diag: np.ndarray, t: float, index: int,
                              nodes: Optional[np.ndarray] = None, slack: float = 0.05) -> MarginReport:
    """|psi_i(x)| <= exp(-lambda_i t/2) p(t,x,x)^(1/2) (1 + slack) on |x| <= rho/2.

    ``diag`` holds p(t,x,x) either on every node or on ``nodes``.
    """
    grid = result.grid
    window = central_nodes(grid)
    diag = np.asarray(diag, dtype=float)
    if nodes is None:
        if diag.size != grid.n:
            raise ValueError("diag must cover all nodes unless nodes are given")
        nodes = window
        vals = diag[window]
    else:
        nodes = np.asarray(nodes)
        sel = np.isin(nodes, window)
        nodes, vals = nodes[sel], diag[sel]
    if nodes.size == 0:
        raise ValueError("no nodes with |x| <= rho/2")
    lam = float(result.eigenvalues[index])
    psi = np.abs(result.vectors[nodes, index])
    log_allowed = -lam * t / 2.0 + 0.5 * np.log(np.maximum(vals, 1e-300)) + math.log1p(slack)
    with np.errstate(divide="ignore"):
        margins = log_allowed - np.log(psi)
    return MarginReport.from_margins(
        "eigenfunction_bound", margins, points=grid.coords()[nodes],
        grid_descriptor=grid.describe(), details={"t": t, "index": index, "eigenvalue": lam})


@dataclass
class DecayFit:
    c1: float
    c2: float
    residual: float
    verdict: bool
    worst_margin: float
    window: tuple
    nodes: int


def decay_fit(result: SpectralResult, index: int, theta: float, profile: str = "power",
              inflation: float = 1.1, c2_min: float = 1e-6, floor_rel: float = 1e-12) -> DecayFit:
    """Least-squares fit log|psi| = log c1 - c2 P(|x|) on 1 <= |x| <= rho/2.

    P(r) = r^theta (``profile="power"``) or I(r) = int_0^r exp(tau^theta/2)
    (``profile="expint"``). Passes iff c2 > c2_min and |psi| <= inflation *
    c1 exp(-c2 P) on every windowed node.
    """
    grid = result.grid
    r = grid.radius()
    psi = np.abs(result.vectors[:, index])
    keep = (r >= 1.0) & (r <= grid.rho / 2 + 1e-12) & (psi >= floor_rel * psi.max())
    if np.count_nonzero(keep) < 3:
        raise ValueError("decay window holds fewer than 3 nodes above the floor")
    rr = r[keep]
    if profile == "power":
        P = rr ** theta
    elif profile == "expint":
        P = exp_integral(rr, theta)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    y = np.log(psi[keep])
    A = np.stack([np.ones_like(P), -P], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    log_c1, c2 = float(coef[0]), float(coef[1])
    fit = log_c1 - c2 * P
    resid = float(np.sqrt(np.mean((y - fit) ** 2)))
    margins = fit + math.log(inflation) - y
    worst = float(margins.min())
    ok = bool(c2 > c2_min and worst >= 0)
    return DecayFit(math.exp(log_c1), c2, resid, ok, worst, (1.0, grid.rho / 2), int(keep.sum()))
