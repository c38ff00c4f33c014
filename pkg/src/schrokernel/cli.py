"""Command-line runner: ``schrokernel <subcommand> --config run.toml``.

Exit status is 0 when every verdict passed, 1 when any failed and 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import scipy
import scipy.sparse as sp

from . import __version__
from .bounds import (KernelBoundParams, WeightTriple, calibrate_and_verify, check_hyp41)
from .coefficients import (IdentityFree, ZFunction, audit_samples, calibrate_hyp11_M,
                           check_ellipticity, check_hyp11)
from .config import ConfigError, ExperimentConfig, load
from .discretize import DiscreteOperator, assemble, build_grid, form_check
from .lyapunov import (AuditGrid, RateFunction, audit_lyapunov, calibrate_rate,
                       check_growth_condition)
from .reports import MarginReport, _jsonable
from .semigroup import (EvolverConfig, check_monotone_rho, check_slice, check_submarkov,
                        check_xi_W, kernel_columns, kernel_diagonal, ultracontractivity_probe)
from .spectral import (central_nodes, decay_fit, eigen_lowest, eigen_rho_stability,
                       eigenfunction_bound_check)

log = logging.getLogger("schrokernel")

STAGES = ("audit-hyp", "audit-lyapunov", "kernel", "bounds", "spectrum")
SUBCOMMANDS = STAGES + ("sweep", "all")


class HashMismatch(RuntimeError):
    pass


@dataclass
class StageResult:
    stage: str
    checks: list = dc_field(default_factory=list)  # MarginReport
    warnings: list = dc_field(default_factory=list)
    artifacts: list = dc_field(default_factory=list)
    skipped: str = ""

    @property
    def passed(self) -> bool:
        return all(c.verdict for c in self.checks)


# ---------------------------------------------------------------------------
# artifacts


class Writer:
    def __init__(self, out: Path, cfg_hash: str):
        self.out = out
        self.hash = cfg_hash
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, payload) -> str:
        body = {"config_hash": self.hash, **_jsonable(payload)}
        (self.out / name).write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
        return name

    def csv(self, name: str, header, rows) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        (self.out / name).write_text(buf.getvalue())
        return name


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return v


def _report_dicts(checks):
    return [c.to_dict() for c in checks]


# ---------------------------------------------------------------------------
# operator cache


def get_operator(field, rho: float, h: float) -> DiscreteOperator:
    """assemble(), reusing a stored matrix when SCHROKERNEL_CACHE names a directory."""
    grid = build_grid(field.d, rho, h)
    root = os.environ.get("SCHROKERNEL_CACHE")
    if not root:
        return assemble(field, grid)
    key = hashlib.sha256(json.dumps([field.describe(), grid.describe()], sort_keys=True,
                                    default=str).encode()).hexdigest()[:24]
    path = Path(root) / f"op-{key}.npz"
    if path.exists():
        z = np.load(path)
        M = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=(grid.n, grid.n))
        return DiscreteOperator(M, grid, field, z["V"])
    op = assemble(field, grid)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, data=op.matrix.data, indices=op.matrix.indices, indptr=op.matrix.indptr,
             V=op.V_nodes)
    return op


def _evolver(cfg: ExperimentConfig) -> EvolverConfig:
    dz = cfg.discretization
    return EvolverConfig(scheme=dz.scheme, tau=dz.tau, richardson=dz.richardson)


def _positivity_evolver(cfg: ExperimentConfig) -> EvolverConfig:
    return EvolverConfig(tau=cfg.discretization.tau)


def _is_poly_or_exp(cfg):
    return cfg.field.family in ("poly", "exp")


def _triple(cfg) -> WeightTriple:
    f, ly = cfg.field, cfg.lyapunov
    return WeightTriple.from_chain(f.family, ly.eps, ly.alpha, f.m, f.s, cfg.bounds.k, ly.beta)


# ---------------------------------------------------------------------------
# stages


def stage_audit_hyp(cfg: ExperimentConfig, w: Writer) -> StageResult:
    res = StageResult("audit-hyp")
    field = cfg.build_field()
    r_audit = cfg.lyapunov.r_audit
    samples = audit_samples(field.d, r_audit)
    res.checks.append(check_ellipticity(field, samples))
    if not _is_poly_or_exp(cfg):
        res.artifacts.append(w.json("hyp_audit.json", {"reports": _report_dicts(res.checks)}))
        return res
    triple = _triple(cfg).validate(field.d)
    # Z bound: M calibrated where the sup is interior, checked out to twice that radius
    Z = ZFunction(triple.W2.with_eps(triple.default_eps_Z()))
    m_hat, r_cal = calibrate_hyp11_M(field, Z, r_audit)
    Z = replace(Z, M=1.1 * max(m_hat, 0.0) + 1e-12)
    rep = check_hyp11(field, Z, audit_samples(field.d, 2.0 * r_cal, n_radial=400))
    rep.details["calibration_radius"] = r_cal
    res.checks.append(rep)
    if cfg.field.family == "poly":
        for spec in (triple.W1, triple.W2):
            rep = check_growth_condition(field, spec, cfg.lyapunov.Lambda)
            rep.name = f"growth(eps={spec.eps:g})"
            res.checks.append(rep)
    hyp = check_hyp41(triple, field, cfg.bounds.hyp_time)
    res.checks.append(hyp.report)
    rows = [(tt, n, v) for tt, vals in sorted(hyp.log_constants.items())
            for n, v in sorted(vals.items())]
    res.artifacts.append(w.csv("hyp_constants.csv", ["t", "constant", "log_min_value"], rows))
    res.artifacts.append(w.json("hyp_audit.json", {
        "reports": _report_dicts(res.checks), "fitted_exponents": hyp.fitted,
        "expected_exponents": hyp.expected, "cbar": hyp.constants.cbar}))
    return res


def _kernel_slices(cfg, op, times, x0s=None):
    x0s = cfg.kernel.x0 if x0s is None else x0s
    pts = [np.full(op.grid.d, 0.0) + np.eye(op.grid.d)[0] * x for x in x0s]
    return kernel_columns(op, pts, times, _positivity_evolver(cfg))


def stage_audit_lyapunov(cfg: ExperimentConfig, w: Writer) -> StageResult:
    res = StageResult("audit-lyapunov")
    if not _is_poly_or_exp(cfg):
        res.skipped = "no Lyapunov family for this coefficient field"
        return res
    field = cfg.build_field()
    ly = cfg.lyapunov
    grid = AuditGrid(d=field.d, r_audit=ly.r_audit)
    fine = grid.refined(2)
    op = get_operator(field, cfg.discretization.rho, cfg.discretization.h)
    slices = [s for row in _kernel_slices(cfg, op, cfg.kernel.times) for s in row]
    rows = []
    for eps in ly.eps:
        spec = cfg.weight_spec(eps).validate()
        rate = calibrate_rate(spec, field, ly.gamma, grid, ly.safety)
        rate_fine = calibrate_rate(spec, field, ly.gamma, fine, ly.safety)
        drift = abs(rate_fine.C - rate.C) / max(rate.C, 1e-300)
        stab = MarginReport.from_margins(f"rate_stability(eps={eps:g})", [0.05 - drift],
                                         details={"C": rate.C, "C_refined": rate_fine.C})
        audit = audit_lyapunov(spec, field, rate, fine)
        audit.name = f"lyapunov(eps={eps:g})"
        xi = check_xi_W(slices, spec, rate)
        xi.name = f"xi_W(eps={eps:g})"
        res.checks += [stab, audit, xi]
        rows.append((eps, rate.C, rate_fine.C, rate.p, rate.gamma, audit.worst_margin,
                     xi.worst_margin))
        if drift >= 0.05:
            res.warnings.append(f"rate constant moved {drift:.2%} under refinement (eps={eps:g})")
    res.artifacts.append(w.csv("lyapunov_rates.csv",
                               ["eps", "C", "C_refined", "p", "gamma", "audit_margin", "xi_margin"],
                               rows))
    res.artifacts.append(w.json("lyapunov.json", {"reports": _report_dicts(res.checks)}))
    return res


def _oracle_kernel(field, t, x, y):
    """Closed-form kernels for Q = I with V = 0 or V = |x|^2 (d = 1)."""
    if not isinstance(field, IdentityFree) or field.d != 1:
        return None
    if field.s is None:
        return np.exp(-(x - y) ** 2 / (4 * t)) / math.sqrt(4 * math.pi * t)
    if field.s == 2 and field.v_scale == 1.0:
        sh, ch = math.sinh(2 * t), math.cosh(2 * t)
        return np.exp(-((x * x + y * y) * ch - 2 * x * y) / (2 * sh)) / math.sqrt(2 * math.pi * sh)
    return None


def stage_kernel(cfg: ExperimentConfig, w: Writer) -> StageResult:
    res = StageResult("kernel")
    field = cfg.build_field()
    dz, kb = cfg.discretization, cfg.kernel
    op = get_operator(field, dz.rho, dz.h)
    res.checks.append(form_check(op, rng=cfg.seed))
    halves = [t / 2 for t in kb.times if t / 2 >= 10 * dz.tau]
    times = sorted(set(kb.times) | set(halves))
    table = _kernel_slices(cfg, op, times)
    by_t = dict(zip(times, table))
    coords = op.grid.coords()
    rows = []
    for t in kb.times:
        for sl in by_t[t]:
            rep = check_slice(sl)
            rep.name = f"slice(t={t:g}, x0={sl.x0_coords.tolist()})"
            res.checks.append(rep)
            for c, v in zip(coords, sl.values):
                rows.append((t, *sl.x0_coords, *c, v))
            ref = _oracle_kernel(field, t, sl.x0_coords[0], coords[:, 0])
            if ref is not None:
                win = np.abs(coords[:, 0]) <= min(3.0, dz.rho / 2)
                err = float(np.max(np.abs(sl.values[win] - ref[win])) / np.max(ref[win]))
                res.checks.append(MarginReport.from_margins(
                    f"oracle(t={t:g}, x0={sl.x0_coords.tolist()})", [0.02 - err],
                    details={"rel_linf": err}))
        # symmetry between sources
        sls = by_t[t]
        for a in range(len(sls)):
            for b in range(a + 1, len(sls)):
                pab = sls[a].values[sls[b].x0]
                pba = sls[b].values[sls[a].x0]
                mis = abs(pab - pba) / max(abs(pab), abs(pba), 1e-300)
                res.checks.append(MarginReport.from_margins(
                    f"symmetry(t={t:g})", [0.01 - mis], details={"mismatch": mis}))
        if t / 2 in by_t:
            for half, full in zip(by_t[t / 2], by_t[t]):
                lhs = float(np.sum(half.values ** 2)) * op.grid.cell_volume
                rhs = full.diagonal
                rel = abs(lhs - rhs) / rhs
                res.checks.append(MarginReport.from_margins(
                    f"trace_identity(t={t:g}, x0={full.x0_coords.tolist()})", [0.02 - rel],
                    details={"sum_sq": lhs, "diagonal": rhs}))
    names = ["x0", "y0", "z0"][: op.grid.d] + ["x", "y", "z"][: op.grid.d]
    res.artifacts.append(w.csv("kernel_slices.csv", ["t", *names, "value"], rows))
    rng = np.random.default_rng(cfg.seed)
    samples = [np.ones(op.n)] + [rng.uniform(0, 1, op.n) for _ in range(3)]
    res.checks.append(check_submarkov(op, _positivity_evolver(cfg), samples,
                                      times=[t for t in (0.1, 0.5, 1.0) if t >= 10 * dz.tau]))
    r1, r2 = kb.monotone_rho

    def bump(x):
        return np.clip(1.0 - np.sum(x ** 2, axis=-1), 0.0, None) ** 3

    try:
        res.checks.append(check_monotone_rho(field, r1, r2, dz.h, bump, kb.monotone_t,
                                             _positivity_evolver(cfg)))
    except Exception as exc:  # overflow on the bigger box
        res.warnings.append(f"monotone_rho skipped: {exc}")
    ultra = ultracontractivity_probe(op, kb.ultra_times, _positivity_evolver(cfg))
    res.checks.append(ultra.report)
    if not ultra.monotone:
        res.warnings.append("kernel diagonal is not monotone in t")
    res.artifacts.append(w.csv("diagonal_decay.csv", ["t", "sup_diag"],
                               list(zip(ultra.times, ultra.sup_diag))))
    res.artifacts.append(w.json("kernel.json", {"reports": _report_dicts(res.checks),
                                                "ultracontractivity": {"slope": ultra.slope,
                                                                        "c": ultra.c_calibrated}}))
    return res


def stage_bounds(cfg: ExperimentConfig, w: Writer) -> StageResult:
    res = StageResult("bounds")
    if not _is_poly_or_exp(cfg):
        res.skipped = "kernel bounds need polynomial or exponential coefficients (m > 0 violated)"
        return res
    field = cfg.build_field()
    dz, bb = cfg.discretization, cfg.bounds
    params = KernelBoundParams.from_field(field, bb.eps or cfg.lyapunov.eps[0], cfg.lyapunov.alpha,
                                          bb.k, cfg.lyapunov.beta)
    op = get_operator(field, dz.rho, dz.h)
    cal = [s for row in _kernel_slices(cfg, op, bb.calibration_times, bb.x0) for s in row]
    hold_rho = bb.holdout_rho or dz.rho * cfg.discretization.rho_refinement
    hold_h = bb.holdout_h or dz.h / cfg.discretization.rho_refinement
    hop = get_operator(field, hold_rho, hold_h)
    hold = [s for row in _kernel_slices(cfg, hop, bb.holdout_times, bb.x0) for s in row]
    report = calibrate_and_verify(field, params, cal, hold, bb.safety)
    res.checks.append(MarginReport("kernel_bound", report.verdict, report.worst_margin,
                                   report.worst_point, details={"C": report.C}))
    # falsification control: half the constant on the refined grid at the calibration times
    ctrl_slices = [s for row in _kernel_slices(cfg, hop, bb.calibration_times, bb.x0) for s in row]
    ctrl = calibrate_and_verify(field, params, cal, ctrl_slices, C=report.C / 2)
    res.checks.append(MarginReport("falsification(C/2 must fail)", not ctrl.verdict,
                                   -ctrl.worst_margin, ctrl.worst_point))
    res.artifacts.append(w.json("bound_report.json", {**report.to_dict(), "control": ctrl.to_dict()}))
    res.artifacts.append(w.csv(
        "bound_margins.csv", ["t", "x0", "h", "rho", "worst_margin"],
        [(m["t"], m["x0"][0], m["h"], m["rho"], m["worst_margin"]) for m in report.slice_margins]))
    return res


def stage_spectrum(cfg: ExperimentConfig, w: Writer) -> StageResult:
    res = StageResult("spectrum")
    field = cfg.build_field()
    sb = cfg.spectral
    h = sb.h or cfg.discretization.h
    rhos = sorted(sb.rho) if sb.rho else [cfg.discretization.rho]
    op = get_operator(field, rhos[-1], h)
    count = min(sb.count, op.n // 10)
    result = eigen_lowest(op, count)
    res.checks.append(MarginReport.from_margins("eigen_residual", 1e-8 - result.residuals,
                                                points=np.arange(count)))
    free = isinstance(field, IdentityFree) and field.s is None
    if not free:
        res.checks.append(MarginReport.from_margins("negative_eigenvalues", -result.eigenvalues,
                                                    points=np.arange(count)))
    if isinstance(field, IdentityFree) and field.s == 2 and field.v_scale == 1 and field.d == 1:
        exact = -(2 * np.arange(count) + 1.0)
        rel = np.abs(result.eigenvalues - exact) / np.abs(exact)
        res.checks.append(MarginReport.from_margins("hermite_oracle", 0.005 - rel,
                                                    points=np.arange(count)))
    if len(rhos) >= 2:
        stab = eigen_rho_stability(field, rhos, h, count)
        if free:
            stab.report = MarginReport("free_laplacian_control(must not saturate)",
                                       not stab.report.verdict, stab.drift - 1e-4, rhos[-1],
                                       details=stab.report.details)
        res.checks.append(stab.report)
    nodes = central_nodes(op.grid)
    diag = kernel_diagonal(op, sb.bound_time, _positivity_evolver(cfg), nodes)
    for i in sb.bound_indices:
        if i < count:
            rep = eigenfunction_bound_check(result, diag, sb.bound_time, i, nodes=nodes)
            rep.name = f"eigenfunction_bound(i={i})"
            res.checks.append(rep)
    if not free:
        theta, profile = _decay_profile(cfg)
        fit = decay_fit(result, 0, theta, profile)
        res.checks.append(MarginReport("decay_fit", fit.verdict, fit.worst_margin, None,
                                       details={"c1": fit.c1, "c2": fit.c2,
                                                "residual": fit.residual, "theta": theta,
                                                "profile": profile}))
    res.artifacts.append(w.csv("spectrum.csv", ["index", "eigenvalue", "residual"],
                               [(i, lam, r) for i, (lam, r) in
                                enumerate(zip(result.eigenvalues, result.residuals))]))
    res.artifacts.append(w.json("spectrum.json", {"reports": _report_dicts(res.checks),
                                                  "eigenvalues": result.eigenvalues}))
    return res


def _decay_profile(cfg):
    f = cfg.field
    if f.family == "poly":
        return (f.s - f.m + 2) / 2.0, "power"
    if f.family == "exp":
        return cfg.lyapunov.beta or f.m / 2.0 + 1.0, "expint"
    return ((f.s or 0.0) + 2) / 2.0, "power"


STAGE_FUNCS = {"audit-hyp": stage_audit_hyp, "audit-lyapunov": stage_audit_lyapunov,
               "kernel": stage_kernel, "bounds": stage_bounds, "spectrum": stage_spectrum}


# ---------------------------------------------------------------------------
# runs


def run_config(cfg: ExperimentConfig, stages, out: Path, strict: bool = False) -> dict:
    t0 = time.perf_counter()
    h = cfg.hash()
    writer = Writer(out, h)
    results = []
    for name in stages:
        log.info("stage %s", name)
        r = STAGE_FUNCS[name](cfg, writer)
        results.append(r)
        for c in r.checks:
            log.info("%s", c.line())
        for msg in r.warnings:
            log.warning("%s", msg)
    passed = all(r.passed for r in results)
    if strict and any(r.warnings for r in results):
        passed = False
    manifest = {
        "config_hash": h, "config": cfg.canonical(), "name": cfg.name, "stages": list(stages),
        "versions": {"schrokernel": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": round(time.perf_counter() - t0, 3), "strict": strict,
        "passed": passed,
        "results": [{"stage": r.stage, "passed": r.passed, "skipped": r.skipped,
                     "warnings": r.warnings, "artifacts": r.artifacts,
                     "checks": [{"name": c.name, "verdict": "pass" if c.verdict else "fail",
                                 "worst_margin": c.worst_margin} for c in r.checks]}
                    for r in results],
    }
    (out / "run_manifest.json").write_text(json.dumps(_jsonable(manifest), sort_keys=True,
                                                      indent=2) + "\n")
    return manifest


def _artifact_hash(path: Path):
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("config_hash")
    if path.suffix == ".csv":
        first = path.read_text().split("\n", 1)[0]
        if first.startswith("# config_hash="):
            return first.split("=", 1)[1].strip()
    return None


def aggregate(run_dirs) -> list:
    """Summary rows over run directories; every artifact must carry its run's hash."""
    rows = []
    for d in map(Path, run_dirs):
        manifest = json.loads((d / "run_manifest.json").read_text())
        h = manifest["config_hash"]
        for r in manifest["results"]:
            for art in r["artifacts"]:
                ah = _artifact_hash(d / art)
                if ah != h:
                    raise HashMismatch(f"{d / art} carries hash {ah}, run has {h}")
            for c in r["checks"]:
                rows.append((manifest["name"], h, r["stage"], c["name"], c["verdict"],
                             c["worst_margin"]))
    return rows


def compare_runs(dir_a, dir_b) -> dict:
    """Byte comparison of the CSV artifacts of two runs of the same config."""
    a, b = Path(dir_a), Path(dir_b)
    ha = json.loads((a / "run_manifest.json").read_text())["config_hash"]
    hb = json.loads((b / "run_manifest.json").read_text())["config_hash"]
    if ha != hb:
        raise HashMismatch(f"refusing to compare runs of different configs ({ha} vs {hb})")
    return {p.name: p.read_bytes() == (b / p.name).read_bytes() for p in sorted(a.glob("*.csv"))}


def _sweep_job(args):
    path, out, strict = args
    cfg = load(path)
    target = Path(out) / f"{cfg.name}-{cfg.hash()}"
    return str(target), run_config(cfg, STAGES, target, strict)["passed"]


def run_sweep(paths, out: Path, jobs: int, strict: bool):
    tasks = [(str(p), str(out), strict) for p in paths]
    for p in paths:
        load(p)  # validate everything before any compute
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            done = list(ex.map(_sweep_job, tasks))
    else:
        done = [_sweep_job(t) for t in tasks]
    rows = aggregate([d for d, _ in done])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["name", "config_hash", "stage", "check", "verdict", "worst_margin"])
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
    return all(ok for _, ok in done)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schrokernel", description=__doc__.split("\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", action="append", required=True,
                   help="TOML config (repeat for sweep)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized trials")
    p.add_argument("--strict", action="store_true", help="treat warnings as failures")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.subcommand == "sweep":
            out = Path(args.out or "sweep_out")
            ok = run_sweep(args.config, out, max(1, args.jobs), args.strict)
            print(f"sweep {'passed' if ok else 'FAILED'}: {out / 'sweep_summary.csv'}")
            return 0 if ok else 1
        if len(args.config) != 1:
            raise ConfigError("exactly one --config expected")
        cfg = load(args.config[0])
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out or cfg.output)
        stages = STAGES if args.subcommand == "all" else (args.subcommand,)
        manifest = run_config(cfg, stages, out, args.strict)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except HashMismatch as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 1
    for r in manifest["results"]:
        if r["skipped"]:
            print(f"[SKIP] {r['stage']}: {r['skipped']}")
        for c in r["checks"]:
            print(f"[{c['verdict'].upper()}] {r['stage']}: {c['name']} "
                  f"(worst margin {c['worst_margin']:.4g})")
    print(f"config {manifest['config_hash']} -> {out}: {'PASS' if manifest['passed'] else 'FAIL'}")
    return 0 if manifest["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
