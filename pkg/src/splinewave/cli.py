"""Config-driven experiment runner.

Subcommands: ``run`` (sweep solves, results.csv + meta.txt), ``report``
(convergence slopes from results.csv), ``precond-bench`` (preconditioner
comparison), ``cache-clear``.  Configs are line-oriented ``key = value``
files with ``#`` comments; lists are comma separated.  Exit codes: 0 ok,
2 config error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from . import problems as problems_mod
from .assembly import assemble
from .bspline import uniform_space
from .eigensolve import (
    JacobiPreconditioner,
    TraceBlockPreconditioner,
    condition_estimate,
    solve_lowest,
)
from .fftcheb import load_table, save_table, table_cache_key, v_out_table
from .planewave import build_wavevectors
from .scf import SCFConfig, gp_scf, hartree_scf
from .states import DGState, align_to_cluster, error_norms

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "problem": "example1",
    "L": 4.0,
    "r_in": 0.2,
    "alpha": 5.0,
    "g_cut": None,       # problem-dependent default
    "K": [10],
    "r": [3],
    "p": 1,
    "c_sigma": 10.0,
    "n_grid": 256,
    "n_cheb": 48,
    "tol": 1e-8,
    "max_iter": 800,
    "nev": 4,
    "preconditioner": "tbdg",
    "seed": 0,
    "tau": None,
    "ref_K": None,
    "ref_r": None,
    "sweep": "product",
    "alpha_scale": None,
    "compute_cond": False,
    "cache": False,
    "trace": False,
    "export_fields": False,
    "mix": 0.5,
    "scf_tol": 1e-8,
    "scf_max_iter": 200,
    "bench_tol": 1e-5,
    "centers": None,
    "half_widths": None,
    "charges": None,
    "dim": None,
    "kind": None,
}

_INT_KEYS = {"p", "n_grid", "n_cheb", "max_iter", "nev", "seed", "scf_max_iter"}
_INT_LIST_KEYS = {"K", "r"}
_FLOAT_KEYS = {"L", "r_in", "alpha", "c_sigma", "tol", "tau", "alpha_scale",
               "mix", "scf_tol", "bench_tol", "g_cut"}
_BOOL_KEYS = {"compute_cond", "cache", "trace", "export_fields"}


def parse_config(text: str) -> dict:
    cfg = dict(_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in cfg:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, value, lineno)
    _validate(cfg)
    return cfg


def _coerce(key, value, lineno):
    try:
        if key in _INT_LIST_KEYS:
            return [int(v) for v in value.split(",") if v.strip()]
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return None if value.lower() in ("", "none", "auto") else float(value)
        if key in _BOOL_KEYS:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if key in ("ref_K", "ref_r"):
            return None if value.lower() in ("", "none") else int(value)
        if key in ("centers", "half_widths", "charges"):
            return [float(v) for v in value.split(",") if v.strip()]
        if key == "dim":
            return int(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r} ({exc})")


def _validate(cfg):
    if cfg["problem"] not in set(problems_mod.FACTORIES) | {"custom"}:
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    if cfg["preconditioner"] not in ("none", "jacobi", "tbdg"):
        raise ConfigError(f"unknown preconditioner {cfg['preconditioner']!r}")
    if cfg["sweep"] not in ("product", "zip"):
        raise ConfigError("sweep must be 'product' or 'zip'")
    if cfg["p"] < 1:
        raise ConfigError("spline degree must be >= 1")
    if not cfg["K"] or min(cfg["K"]) < 1:
        raise ConfigError("plane-wave cutoffs must be positive integers")
    if not cfg["r"] or min(cfg["r"]) < 0:
        raise ConfigError("refinement levels must be non-negative")
    if cfg["c_sigma"] <= 0:
        raise ConfigError("penalty constant must be positive")
    if cfg["nev"] < 1:
        raise ConfigError("need at least one eigenpair")
    if not 0 < cfg["mix"] < 1:
        raise ConfigError("mixing weight must lie in (0, 1)")
    if cfg["sweep"] == "zip" and len(cfg["K"]) != len(cfg["r"]):
        raise ConfigError("zip sweep needs equally long K and r lists")


def build_problem(cfg) -> problems_mod.Problem:
    name = cfg["problem"]
    if name == "custom":
        if cfg["centers"] is None or cfg["half_widths"] is None:
            raise ConfigError("custom problem needs centers and half_widths")
        dim = cfg["dim"] or 2
        centers = np.asarray(cfg["centers"], float).reshape(-1, dim)
        kind = cfg["kind"] or "linear"
        return problems_mod.custom(
            dim, cfg["L"], centers, cfg["half_widths"],
            cfg["charges"] or [0.0] * len(centers), cfg["alpha"],
            cfg["g_cut"] or 2.0, kind=kind,
        )
    kwargs = dict(alpha=cfg["alpha"], length=cfg["L"], r_in=cfg["r_in"])
    if name != "free_particle" and cfg["g_cut"] is not None:
        kwargs["g_cut"] = cfg["g_cut"]
    if name == "free_particle":
        kwargs = dict(length=cfg["L"], r_in=cfg["r_in"])
    return problems_mod.FACTORIES[name](**kwargs)


def _points(cfg):
    if cfg["sweep"] == "zip":
        pts = list(zip(cfg["K"], cfg["r"]))
    else:
        pts = [(K, r) for K in cfg["K"] for r in cfg["r"]]
    ref = (cfg["ref_K"] or max(cfg["K"]), cfg["ref_r"] or max(cfg["r"]))
    if ref not in pts:
        pts.append(ref)
    return pts, ref


def _vout_for(problem, cfg, K, outdir):
    if problem.kind != "linear" or problem.name == "free_particle":
        return None
    if not cfg["cache"]:
        return v_out_table(problem.potential, problem.decomp, K,
                           cfg["n_grid"], cfg["n_cheb"])
    pot_id = "|".join(
        str(x) for x in (problem.name, cfg["alpha"], cfg["g_cut"], cfg["L"],
                         cfg["r_in"])
    )
    key = table_cache_key(pot_id, K, cfg["n_grid"], cfg["n_cheb"])
    cache_dir = Path(outdir) / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".tab")
    tab = load_table(path, key, problem.cell)
    if tab is None:
        tab = v_out_table(problem.potential, problem.decomp, K,
                          cfg["n_grid"], cfg["n_cheb"])
        save_table(path, tab, key)
    return tab


def _solve_point(problem, cfg, K, r, outdir):
    """One sweep point; returns (system, values, vectors, iters, converged, extra)."""
    t0 = time.time()
    wvs = build_wavevectors(K, problem.cell)
    spaces = tuple(
        uniform_space(cfg["p"], 2**r, problem.cell.dim)
        for _ in problem.decomp.patches
    )
    if problem.kind == "linear":
        vout = _vout_for(problem, cfg, K, outdir)
        V = problem.potential if problem.name != "free_particle" else None
        system = assemble(problem.decomp, wvs, spaces, V, vout, cfg["c_sigma"],
                          singular_points=problem.singular_points)
        tau = cfg["tau"] if cfg["tau"] is not None else 0.0
        pre = _preconditioner(system, cfg["preconditioner"], tau)
        trace = [] if cfg["trace"] else None
        sol = solve_lowest(system, cfg["nev"], precond=pre, tol=cfg["tol"],
                           max_iter=cfg["max_iter"], seed=cfg["seed"], trace=trace)
        if cfg["trace"]:
            _write_trace(Path(outdir) / f"trace_K{K}_r{r}.csv", trace)
        states = [
            DGState(system, sol.vectors[:, j]).normalized()
            for j in range(cfg["nev"])
        ]
        return dict(system=system, values=sol.values, states=states,
                    iters=sol.iterations, converged=sol.converged,
                    wall=time.time() - t0, scf_history=None)
    scf_cfg = SCFConfig(
        mix=cfg["mix"], tol=cfg["scf_tol"], max_iter=cfg["scf_max_iter"],
        occupation=problem.occupation, n_grid=cfg["n_grid"],
        n_cheb=cfg["n_cheb"], solver_tol=cfg["tol"],
        solver_max_iter=cfg["max_iter"], seed=cfg["seed"],
    )
    driver = gp_scf if problem.kind == "gp" else hartree_scf
    gs = driver(problem.decomp, wvs, spaces, problem.potential, scf_cfg,
                c_sigma=cfg["c_sigma"])
    return dict(system=gs.state.system, values=np.array([gs.value]),
                states=[gs.state], iters=gs.iterations, converged=gs.converged,
                wall=time.time() - t0, scf_history=gs.history)


def _preconditioner(system, kind, tau):
    if kind == "none":
        return None
    if kind == "jacobi":
        return JacobiPreconditioner(system, tau)
    return TraceBlockPreconditioner(system, tau)


def _write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iter,idx,residual,rayleigh\n")
        for it, idx, res, ray in trace:
            fh.write(f"{it},{idx},{res:.12e},{ray:.12e}\n")


def _eig_clusters(values, gap=1e-6):
    scale = max(1.0, float(np.abs(values).max()))
    groups = [[0]]
    for i in range(1, len(values)):
        if values[i] - values[i - 1] < gap * scale:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def run(cfg, outdir) -> int:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    points, ref_point = _points(cfg)
    results = {}
    any_unconverged = False
    for K, r in points:
        results[(K, r)] = _solve_point(problem, cfg, K, r, outdir)
        if not results[(K, r)]["converged"]:
            any_unconverged = True
        if results[(K, r)]["scf_history"] is not None:
            _write_scf_history(outdir / f"scf_K{K}_r{r}.csv",
                               results[(K, r)]["scf_history"])
        if cfg["export_fields"]:
            _export_fields(outdir, problem, K, r, results[(K, r)]["states"][0])
    ref = results[ref_point]
    clusters = _eig_clusters(ref["values"])
    rows = []
    for K, r in points:
        res = results[(K, r)]
        h = 2.0 * problem.decomp.patches[0].half_width / 2**r
        is_ref = (K, r) == ref_point
        cond = ""
        if cfg["compute_cond"]:
            cond = "%.6e" % condition_estimate(
                res["system"], cfg["preconditioner"],
                tau=float(res["values"][0]) - 0.5,
            )
        for j, lam in enumerate(res["values"]):
            if is_ref:
                eig_err = l2 = dg = float("nan")
            else:
                cl = next(c for c in clusters if j in c)
                cl = [c for c in cl if c < len(res["values"])]
                eig_err = abs(
                    float(np.mean(res["values"][cl]))
                    - float(np.mean(ref["values"][cl]))
                )
                aligned = align_to_cluster(
                    res["states"][j], [ref["states"][c] for c in cl]
                )
                l2, dg = error_norms(res["states"][j], aligned,
                                     res["system"].sigma)
            rows.append(
                (K, r, h, cfg["p"], j, lam, eig_err, l2, dg, res["iters"],
                 cond, res["wall"])
            )
    _write_results(outdir / "results.csv", rows)
    _write_meta(outdir / "meta.txt", cfg, problem)
    return 3 if any_unconverged else 0


def _export_fields(outdir, problem, K, r, state):
    """Radial-profile and planar-slice CSVs of the ground state.

    Schemas consumed by the plotting frontend: ``r,series,value`` and
    ``x,y,value`` (uniform grid, row-major).
    """
    cell = problem.cell
    center = np.asarray(problem.decomp.patches[0].center)
    rs = np.linspace(0.05, 0.45 * cell.length, 57)
    dirvec = np.zeros(cell.dim)
    dirvec[0] = 1.0
    pts = center[None, :] + rs[:, None] * dirvec[None, :]
    absu = np.abs(state.eval(pts))
    occ = problem.occupation
    with open(Path(outdir) / f"radial_K{K}_r{r}.csv", "w") as fh:
        fh.write("r,series,value\n")
        for rr, v in zip(rs, absu):
            fh.write(f"{rr:.12e},abs_u,{v:.12e}\n")
        for rr, v in zip(rs, occ * absu**2):
            fh.write(f"{rr:.12e},rho,{v:.12e}\n")
    n = 64
    xs = -0.5 * cell.length + cell.length * np.arange(n) / n
    if cell.dim == 2:
        vals = np.abs(state.sample_grid(n))
    else:
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        plane = np.stack(
            [X.reshape(-1), Y.reshape(-1), np.zeros(n * n)], axis=-1
        )
        vals = np.abs(state.eval(plane)).reshape(n, n)
    with open(Path(outdir) / f"slice_K{K}_r{r}.csv", "w") as fh:
        fh.write("x,y,value\n")
        for i in range(n):
            for j in range(n):
                fh.write(f"{xs[i]:.12e},{xs[j]:.12e},{vals[i, j]:.12e}\n")


def _write_scf_history(path, history):
    with open(path, "w") as fh:
        fh.write("iter,lambda,density_residual,energy\n")
        for it, lam, res, en in history:
            fh.write(f"{it},{lam:.12e},{res:.12e},{en:.12e}\n")


def _write_results(path, rows):
    header = ("K,r,h,p,nev_index,lambda,eig_error_vs_ref,l2_error,dg_error,"
              "iters,cond_estimate,wall_time")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for K, r, h, p, j, lam, eig, l2, dg, iters, cond, wall in rows:
            fh.write(
                f"{K},{r},{h:.12e},{p},{j},{lam:.12e},{eig:.12e},{l2:.12e},"
                f"{dg:.12e},{iters},{cond},{wall:.3f}\n"
            )


def _write_meta(path, cfg, problem):
    import scipy

    lines = [f"splinewave {__version__}",
             f"numpy {np.__version__}  scipy {scipy.__version__}",
             f"python {sys.version.split()[0]}",
             "",
             f"problem = {problem.name} (kind {problem.kind})",
             "conventions: reciprocal zero mode dropped (jellium); lattice sums "
             "carry the splitting constant 2a/sqrt(pi) per unit charge",
             ""]
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def read_results(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            rows.append(dict(zip(header, parts)))
    return rows


def _fit_slope(hs, errs):
    hs = np.asarray(hs, float)
    errs = np.asarray(errs, float)
    ok = np.isfinite(errs) & (errs > 0)
    if ok.sum() < 3:
        return None
    return float(np.polyfit(np.log(hs[ok]), np.log(errs[ok]), 1)[0])


def convergence_report(results_path, out_path=None, alpha_scale=None) -> dict:
    """Least-squares convergence slopes per eigenpair index.

    With ``alpha_scale`` given, additionally compares the L2-error slope
    against the slope of ``h^gamma * dg_error`` with
    ``gamma = (3 - alpha) / (2 alpha)``.
    """
    rows = read_results(results_path)
    idx_set = sorted({int(r["nev_index"]) for r in rows})
    report = {"slopes": {}, "multiscale": None}
    lines = []
    for j in idx_set:
        sel = [r for r in rows if int(r["nev_index"]) == j]
        hs = [float(r["h"]) for r in sel]
        if len(set(hs)) < 3:
            continue
        entry = {}
        for col in ("eig_error_vs_ref", "l2_error", "dg_error"):
            s = _fit_slope(hs, [float(r[col]) for r in sel])
            if s is not None:
                entry[col] = s
        report["slopes"][j] = entry
        lines.append(f"index {j}: " + "  ".join(
            f"{c}={v:.3f}" for c, v in entry.items()))
    if alpha_scale is not None:
        gamma = (3.0 - alpha_scale) / (2.0 * alpha_scale)
        sel = [r for r in rows if int(r["nev_index"]) == 0]
        hs = np.array([float(r["h"]) for r in sel])
        l2 = np.array([float(r["l2_error"]) for r in sel])
        dg = np.array([float(r["dg_error"]) for r in sel])
        s_l2 = _fit_slope(hs, l2)
        s_dg = _fit_slope(hs, hs**gamma * dg)
        report["multiscale"] = {
            "gamma": gamma, "l2_slope": s_l2, "scaled_dg_slope": s_dg,
        }
        lines.append(
            f"multiscale gamma={gamma:.3f}: l2 slope {s_l2:.3f}, "
            f"h^gamma*dg slope {s_dg:.3f}"
        )
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)
    return report


# ---------------------------------------------------------------------------
# preconditioner benchmark
# ---------------------------------------------------------------------------

def precond_bench(cfg, outdir) -> int:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    if problem.kind != "linear":
        raise ConfigError("the preconditioner benchmark runs on linear problems")
    K, r = cfg["K"][0], cfg["r"][0]
    wvs = build_wavevectors(K, problem.cell)
    spaces = tuple(
        uniform_space(cfg["p"], 2**r, problem.cell.dim)
        for _ in problem.decomp.patches
    )
    vout = _vout_for(problem, cfg, K, outdir)
    V = problem.potential if problem.name != "free_particle" else None
    system = assemble(problem.decomp, wvs, spaces, V, vout, cfg["c_sigma"],
                      singular_points=problem.singular_points)
    # quick eigenvalue probe for the shift
    probe = solve_lowest(system, 1, precond=TraceBlockPreconditioner(system, 0.0),
                         tol=1e-4, max_iter=300, seed=cfg["seed"])
    tau = float(probe.values[0]) - 0.5
    tbdg = None
    bench_rows = []
    eig_rows = []
    for kind in ("none", "jacobi", "tbdg"):
        t0 = time.time()
        pre = _preconditioner(system, kind, tau)
        if kind == "tbdg":
            tbdg = pre
        setup = time.time() - t0
        trace = []
        t0 = time.time()
        sol = solve_lowest(system, cfg["nev"], precond=pre, tol=cfg["bench_tol"],
                           max_iter=cfg["max_iter"], seed=cfg["seed"], trace=trace)
        solve_t = time.time() - t0
        iters_to = _iters_to(trace, cfg["nev"], cfg["bench_tol"], cfg["max_iter"])
        _write_trace(outdir / f"residuals_{kind}.csv", trace)
        cond = condition_estimate(system, kind, tau=tau, tbdg=tbdg)
        bench_rows.append((kind, cond, iters_to, setup, solve_t))
        for j, lam in enumerate(sol.values):
            eig_rows.append((kind, j, lam))
    with open(outdir / "bench.csv", "w") as fh:
        fh.write("preconditioner,cond_estimate,iters_to_tol,setup_time,solve_time\n")
        for kind, cond, iters_to, setup, solve_t in bench_rows:
            fh.write(f"{kind},{cond:.6e},{iters_to},{setup:.3f},{solve_t:.3f}\n")
    with open(outdir / "eigs.csv", "w") as fh:
        fh.write("preconditioner,idx,lambda\n")
        for kind, j, lam in eig_rows:
            fh.write(f"{kind},{j},{lam:.12e}\n")
    _write_meta(outdir / "meta.txt", cfg, problem)
    return 0


def _iters_to(trace, nev, tol, max_iter):
    by_iter = {}
    for it, idx, res, _ in trace:
        by_iter.setdefault(it, {})[idx] = res
    for it in sorted(by_iter):
        worst = max(by_iter[it].get(j, np.inf) for j in range(nev))
        if worst <= tol:
            return it
    return max_iter


def cache_clear(outdir) -> int:
    cache_dir = Path(outdir) / "cache"
    if cache_dir.is_dir():
        for f in cache_dir.iterdir():
            f.unlink()
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="splinewave")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "precond-bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default="out")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
    sp = sub.add_parser("report")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("results", help="path to results.csv")
    sp.add_argument("--alpha-scale", type=float, default=None)
    sp = sub.add_parser("cache-clear")
    sp.add_argument("--out", default="out")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(Path(args.config).read_text())
            if args.seed is not None:
                cfg["seed"] = args.seed
            return run(cfg, args.out)
        if args.command == "precond-bench":
            cfg = parse_config(Path(args.config).read_text())
            if args.seed is not None:
                cfg["seed"] = args.seed
            return precond_bench(cfg, args.out)
        if args.command == "report":
            convergence_report(args.results, args.out,
                               alpha_scale=args.alpha_scale)
            return 0
        if args.command == "cache-clear":
            return cache_clear(args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
