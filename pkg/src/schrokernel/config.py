"""Experiment configuration: TOML in, validated dataclasses out."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .coefficients import CoefficientField, make_field
from .discretize import Grid
from .lyapunov import InadmissibleParameters, LyapunovSpec, admissible_params

FAMILIES = ("poly", "exp", "identity")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldBlock:
    family: str
    d: int = 1
    eta: float = 1.0
    m: Optional[float] = None
    s: Optional[float] = None
    v_scale: float = 1.0


@dataclass(frozen=True)
class DiscretizationBlock:
    rho: float
    h: float
    tau: float = 1e-3
    scheme: str = "BE"
    richardson: bool = False
    rho_refinement: float = 1.5


@dataclass(frozen=True)
class LyapunovBlock:
    eps: tuple = (0.3, 0.5, 0.7)
    alpha: float = 0.5
    beta: Optional[float] = None
    gamma: Optional[float] = None
    Lambda: float = 1.0
    r_audit: float = 6.0
    safety: float = 1.25


@dataclass(frozen=True)
class KernelBlock:
    times: tuple = (0.25, 0.5, 1.0)
    x0: tuple = (0.0, 1.0, 2.0)
    ultra_times: tuple = (0.05, 0.1, 0.2, 0.4)
    monotone_rho: tuple = (2.0, 4.0)
    monotone_t: float = 0.5


@dataclass(frozen=True)
class BoundsBlock:
    k: float = 4.0
    eps: Optional[float] = None
    calibration_times: tuple = (0.5, 1.0)
    holdout_times: tuple = (0.25, 0.75)
    holdout_rho: Optional[float] = None
    holdout_h: Optional[float] = None
    x0: tuple = (0.0, 1.0, 2.0)
    safety: float = 1.1
    hyp_time: float = 0.8


@dataclass(frozen=True)
class SpectralBlock:
    count: int = 5
    rho: tuple = ()
    h: Optional[float] = None
    bound_time: float = 0.5
    bound_indices: tuple = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    field: FieldBlock
    discretization: DiscretizationBlock
    lyapunov: LyapunovBlock = LyapunovBlock()
    kernel: KernelBlock = KernelBlock()
    bounds: BoundsBlock = BoundsBlock()
    spectral: SpectralBlock = SpectralBlock()
    output: str = "out"
    seed: int = 0

    def build_field(self) -> CoefficientField:
        f = self.field
        return make_field(f.family, d=f.d, eta=f.eta, m=f.m, s=f.s, v_scale=f.v_scale)

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("output")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def lyapunov_family(self) -> Optional[str]:
        return {"poly": "poly", "exp": "exp"}.get(self.field.family)

    def weight_spec(self, eps: float) -> LyapunovSpec:
        region = admissible_params(self.field.family, self.field.m, self.field.s, self.lyapunov.beta)
        return LyapunovSpec(region.family, float(eps), self.lyapunov.alpha, region.beta,
                            self.field.m, self.field.s)


def _block(cls, raw: dict, where: str, **casts):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    vals = {}
    for key, v in raw.items():
        if isinstance(v, list):
            v = tuple(v)
        vals[key] = casts[key](v) if key in casts and v is not None else v
    try:
        return cls(**vals)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _grid_ok(rho: float, h: float, where: str):
    try:
        Grid(1, rho, h)
    except ValueError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Every module precondition that can be checked before compute."""
    f = cfg.field
    if f.family not in FAMILIES:
        raise ConfigError(f"[field] family must be one of {FAMILIES}")
    if f.d not in (1, 2, 3):
        raise ConfigError("[field] d must be 1, 2 or 3")
    if not f.eta > 0:
        raise ConfigError("[field] eta > 0 required")
    if f.family in ("poly", "exp") and (f.m is None or f.s is None):
        raise ConfigError(f"[field] family {f.family!r} needs m and s")
    dz = cfg.discretization
    _grid_ok(dz.rho, dz.h, "discretization")
    if not dz.tau > 0:
        raise ConfigError("[discretization] tau > 0 required")
    if dz.scheme not in ("BE", "CN"):
        raise ConfigError("[discretization] scheme must be BE or CN")
    if not dz.rho_refinement > 1:
        raise ConfigError("[discretization] rho_refinement > 1 required")
    try:
        cfg.build_field()
        if f.family in ("poly", "exp"):
            ly = cfg.lyapunov
            region = admissible_params(f.family, f.m, f.s, ly.beta)
            region.check_alpha(ly.alpha)
            if len(ly.eps) != 3:
                raise ConfigError("[lyapunov] eps must list eps < eps1 < eps2")
            region.check_eps_chain(*ly.eps)
            if ly.gamma is not None:
                lo, hi = region.gamma_interval(ly.alpha)
                if not lo < ly.gamma < hi:
                    raise InadmissibleParameters(f"gamma in ({lo:.6g}, {hi:.6g}) violated")
            if not cfg.bounds.k > f.d + 2:
                raise InadmissibleParameters(f"k > d+2 = {f.d + 2} violated")
    except (InadmissibleParameters, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    kb = cfg.kernel
    if any(t <= 0 for t in kb.times + kb.ultra_times):
        raise ConfigError("[kernel] times must be positive")
    if min(kb.times) < 10 * dz.tau:
        raise ConfigError("[kernel] times must be >= 10 tau")
    if len(kb.monotone_rho) != 2 or not kb.monotone_rho[0] < kb.monotone_rho[1]:
        raise ConfigError("[kernel] monotone_rho = [rho1, rho2] with rho1 < rho2")
    for r in kb.monotone_rho:
        _grid_ok(r, dz.h, "kernel.monotone_rho")
    if any(abs(x) >= dz.rho for x in kb.x0):
        raise ConfigError("[kernel] x0 must be interior")
    bb = cfg.bounds
    times = bb.calibration_times + bb.holdout_times
    if any(not 0 < t <= 1 for t in times):
        raise ConfigError("[bounds] times must lie in (0, 1]")
    if bb.holdout_rho is not None or bb.holdout_h is not None:
        _grid_ok(bb.holdout_rho or dz.rho, bb.holdout_h or dz.h, "bounds.holdout")
    if not bb.safety >= 1:
        raise ConfigError("[bounds] safety >= 1 required")
    sb = cfg.spectral
    if sb.count < 1 or sb.count > 50:
        raise ConfigError("[spectral] count must be in [1, 50]")
    for r in sb.rho:
        _grid_ok(r, sb.h or dz.h, "spectral")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return cfg


def from_dict(raw: dict, name: str = "config") -> ExperimentConfig:
    raw = dict(raw)
    try:
        fld = _block(FieldBlock, raw.pop("field"), "field")
        disc = _block(DiscretizationBlock, raw.pop("discretization"), "discretization")
    except KeyError as exc:
        raise ConfigError(f"missing block {exc}") from None
    blocks = {
        "lyapunov": _block(LyapunovBlock, raw.pop("lyapunov", {}), "lyapunov"),
        "kernel": _block(KernelBlock, raw.pop("kernel", {}), "kernel"),
        "bounds": _block(BoundsBlock, raw.pop("bounds", {}), "bounds"),
        "spectral": _block(SpectralBlock, raw.pop("spectral", {}), "spectral", count=int),
    }
    out = raw.pop("output", {})
    out_dir = out.get("dir", "out") if isinstance(out, dict) else str(out)
    seed = raw.pop("seed", 0)
    name = raw.pop("name", name)
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    return validate(ExperimentConfig(name=name, field=fld, discretization=disc, output=out_dir,
                                     seed=seed, **blocks))


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, name=path.stem)
