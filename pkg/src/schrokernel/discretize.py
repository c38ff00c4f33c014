"""Tensor grids on boxes [-rho, rho]^d and the flux-form Dirichlet operator.

Node coordinates are integer multiples of h, so grids with the same spacing
share bit-identical coordinates and coefficient values on common nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .coefficients import CoefficientField, CoefficientOverflow
from .reports import MarginReport

MAX_NODES = 2_000_000


@dataclass(frozen=True)
class Grid:
    d: int
    rho: float
    h: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError("d must be 1, 2 or 3")
        if not (self.rho > self.h > 0):
            raise ValueError("rho > h > 0 required")
        ratio = self.rho / self.h
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError(f"rho/h = {ratio:.12g} is not an integer")

    @property
    def half_count(self) -> int:
        """K with rho = K h."""
        return int(round(self.rho / self.h))

    @property
    def per_axis(self) -> int:
        return 2 * self.half_count - 1

    @property
    def shape(self) -> tuple:
        return (self.per_axis,) * self.d

    @property
    def n(self) -> int:
        return self.per_axis ** self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    def axis_index(self) -> np.ndarray:
        K = self.half_count
        return np.arange(-(K - 1), K, dtype=float)

    def axis_coords(self) -> np.ndarray:
        return self.axis_index() * self.h

    def index_array(self) -> np.ndarray:
        """(n, d) integer offsets of every node, C order."""
        ax = self.axis_index()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def coords(self) -> np.ndarray:
        return self.index_array() * self.h

    def node(self, point) -> int:
        """Flat index of the node nearest to ``point``."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        K = self.half_count
        j = np.rint(p / self.h).astype(int)
        if np.any(np.abs(j) > K - 1):
            raise ValueError(f"{point} is not an interior node")
        return int(np.ravel_multi_index(tuple(j + K - 1), self.shape))

    def shared_with(self, bigger: "Grid") -> np.ndarray:
        """Flat indices in ``bigger`` of this grid's nodes (same h, nested box)."""
        if bigger.d != self.d or not math.isclose(bigger.h, self.h, rel_tol=0, abs_tol=1e-15):
            raise ValueError("grids must share d and h")
        if bigger.half_count < self.half_count:
            raise ValueError("target grid is smaller")
        off = bigger.half_count - self.half_count
        idx = self.index_array().astype(int) + self.half_count - 1 + off
        return np.ravel_multi_index(tuple(idx.T), bigger.shape)

    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coords() ** 2, axis=1))

    def describe(self) -> dict:
        return {"d": self.d, "rho": self.rho, "h": self.h, "n": self.n}


def build_grid(d: int, rho: float, h: float, max_nodes: int = MAX_NODES) -> Grid:
    g = Grid(d, float(rho), float(h))
    if g.n > max_nodes:
        raise MemoryError(f"grid has {g.n} nodes, budget is {max_nodes}")
    return g


@dataclass(frozen=True)
class DiscreteOperator:
    """Sparse symmetric matrix of -A_h (so positive definite) on ``grid``."""

    matrix: sp.csr_matrix
    grid: Grid
    field: CoefficientField
    V_nodes: np.ndarray

    @property
    def eta(self) -> float:
        return self.field.eta

    @property
    def n(self) -> int:
        return self.grid.n


def assemble(field: CoefficientField, grid: Grid) -> DiscreteOperator:
    """Second-order flux form with q sampled at edge midpoints, Dirichlet rows removed."""
    if field.d != grid.d:
        raise ValueError("field and grid dimensions differ")
    idx = grid.index_array()
    h = grid.h
    n = grid.n
    try:
        x = idx * h
        V = field.V(x)
        diag = V.astype(float).copy()
        rows, cols, vals = [], [], []
        flat = np.arange(n)
        strides = np.array([grid.per_axis ** (grid.d - 1 - k) for k in range(grid.d)])
        K = grid.half_count
        for k in range(grid.d):
            right = idx.copy()
            right[:, k] += 0.5
            left = idx.copy()
            left[:, k] -= 0.5
            q_r = field.q(right * h)
            q_l = field.q(left * h)
            diag += (q_r + q_l) / h ** 2
            has_right = idx[:, k] < K - 1
            i = flat[has_right]
            j = i + strides[k]
            w = -q_r[has_right] / h ** 2
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    except CoefficientOverflow as exc:
        raise CoefficientOverflow(
            f"{exc}; assemble on a smaller rho (or rescale the field) to stay in range") from None
    rows.append(flat)
    cols.append(flat)
    vals.append(diag)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    M.sum_duplicates()
    M.sort_indices()
    return DiscreteOperator(matrix=M, grid=grid, field=field, V_nodes=V)


def write_coo(op: DiscreteOperator, path) -> None:
    """Dump the matrix as 'row col value' lines."""
    coo = op.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")


def forward_gradient_sq(grid: Grid, u: np.ndarray) -> float:
    """||grad_h u||^2 with zero Dirichlet padding, every edge counted once."""
    U = np.pad(np.asarray(u, dtype=float).reshape(grid.shape), 1)
    total = 0.0
    for k in range(grid.d):
        diff = np.diff(U, axis=k) / grid.h
        # drop the padding layers on the other axes
        sl = tuple(slice(None) if a == k else slice(1, -1) for a in range(grid.d))
        total += float(np.sum(diff[sl] ** 2))
    return total * grid.cell_volume


def form_check(op: DiscreteOperator, trials: int = 10, rng=None) -> MarginReport:
    """u^T M u h^d >= eta ||grad_h u||^2 for random unit grid functions."""
    if trials < 1:
        raise ValueError("trials >= 1 required")
    rng = np.random.default_rng(rng)
    hd = op.grid.cell_volume
    margins = np.empty(trials)
    scale = np.empty(trials)
    for i in range(trials):
        u = rng.standard_normal(op.n)
        u /= math.sqrt(float(u @ u) * hd)
        form = float(u @ (op.matrix @ u)) * hd
        grad = forward_gradient_sq(op.grid, u)
        margins[i] = form - op.eta * grad
        scale[i] = form
    # rounding in the form is relative to its own size
    tol = 64 * np.finfo(float).eps * float(scale.max())
    return MarginReport.from_margins(
        "form", margins, points=np.arange(trials), tol=tol,
        grid_descriptor=op.grid.describe(), details={"trials": trials, "tol": tol})


# ---------------------------------------------------------------------------
# Nash inequality sanity


def random_bumps(d: int, count: int, rng=None, support: float = 1.5, bumps: int = 3):
    """``count`` random sums of (1 - r^2)^3_+ bumps as callables on (..., d) arrays."""
    rng = np.random.default_rng(rng)
    funcs = []
    for _ in range(count):
        centers = rng.uniform(-support / 2, support / 2, size=(bumps, d))
        widths = rng.uniform(0.2, 0.8, size=bumps)
        amps = rng.uniform(0.1, 1.0, size=bumps)

        def f(x, c=centers, w=widths, a=amps):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape[:-1])
            for ci, wi, ai in zip(c, w, a):
                r2 = np.sum((x - ci) ** 2, axis=-1) / wi ** 2
                out += ai * np.clip(1.0 - r2, 0.0, None) ** 3
            return out

        funcs.append(f)
    return funcs


def nash_ratio(grid: Grid, u: np.ndarray) -> float:
    """||u||_2^(1+2/d) / (||grad_h u||_2 ||u||_1^(2/d))."""
    hd = grid.cell_volume
    l2 = math.sqrt(float(np.sum(u * u)) * hd)
    l1 = float(np.sum(np.abs(u))) * hd
    g = math.sqrt(forward_gradient_sq(grid, u))
    return l2 ** (1 + 2 / grid.d) / (g * l1 ** (2 / grid.d))


def nash_constant(grid: Grid, funcs) -> float:
    """Largest Nash ratio over a family of continuous test functions."""
    x = grid.coords()
    return max(nash_ratio(grid, f(x)) for f in funcs)
