import numpy as np
import pytest

from splinewave.cli import (
    ConfigError,
    cache_clear,
    convergence_report,
    main,
    parse_config,
    precond_bench,
    run,
)

FREE_CFG = """
# tiny free-particle run
problem = free_particle
K = 2, 3
r = 2
p = 1
nev = 2
tol = 1e-8
n_grid = 32
n_cheb = 8
"""

ATOM_CFG = """
problem = example1
K = 3, 4
r = 2, 3
p = 1
nev = 2
tol = 1e-7
max_iter = 600
n_grid = 64
n_cheb = 24
"""


def test_parse_defaults_and_lists():
    cfg = parse_config(FREE_CFG)
    assert cfg["problem"] == "free_particle"
    assert cfg["K"] == [2, 3]
    assert cfg["r"] == [2]
    assert cfg["preconditioner"] == "tbdg"


def test_parse_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("nonsense = 1\n")


def test_parse_rejects_bad_value():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("K = two\n")


def test_parse_rejects_bad_problem():
    with pytest.raises(ConfigError, match="unknown problem"):
        parse_config("problem = example9\n")


def test_parse_zip_mismatch():
    with pytest.raises(ConfigError, match="zip"):
        parse_config("sweep = zip\nK = 1, 2\nr = 1\n")


def test_run_free_particle(tmp_path):
    cfg = parse_config(FREE_CFG)
    code = run(cfg, tmp_path)
    assert code == 0
    lines = (tmp_path / "results.csv").read_text().strip().splitlines()
    assert lines[0].startswith("K,r,h,p,nev_index,lambda")
    rows = [l.split(",") for l in lines[1:]]
    # constant mode: lambda ~ 0 for index 0 everywhere
    lam0 = [float(r[5]) for r in rows if r[4] == "0"]
    assert max(abs(v) for v in lam0) < 1e-8
    assert (tmp_path / "meta.txt").exists()


def test_run_deterministic_except_walltime(tmp_path):
    cfg = parse_config(FREE_CFG)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")

    def strip_wall(path):
        lines = path.read_text().splitlines()
        return [",".join(l.split(",")[:-1]) for l in lines]

    assert strip_wall(tmp_path / "a" / "results.csv") == strip_wall(
        tmp_path / "b" / "results.csv"
    )


def test_run_reports_errors_vs_reference(tmp_path):
    cfg = parse_config(ATOM_CFG)
    code = run(cfg, tmp_path)
    assert code == 0
    lines = (tmp_path / "results.csv").read_text().strip().splitlines()[1:]
    rows = [l.split(",") for l in lines]
    ref_rows = [r for r in rows if r[0] == "4" and r[1] == "3"]
    non_ref = [r for r in rows if not (r[0] == "4" and r[1] == "3")]
    assert all(r[6] == "nan" for r in ref_rows)
    errs = [float(r[6]) for r in non_ref]
    assert all(np.isfinite(errs)) and all(e > 0 for e in errs)
    dgs = [float(r[8]) for r in non_ref]
    assert all(np.isfinite(dgs)) and all(d > 0 for d in dgs)


def test_report_synthetic_slope(tmp_path):
    path = tmp_path / "results.csv"
    hs = [0.1, 0.05, 0.025, 0.0125]
    with open(path, "w") as fh:
        fh.write("K,r,h,p,nev_index,lambda,eig_error_vs_ref,l2_error,dg_error,"
                 "iters,cond_estimate,wall_time\n")
        for i, h in enumerate(hs):
            fh.write(f"20,{i+2},{h:.12e},1,0,1.0,{3.0*h**2:.12e},"
                     f"{2.0*h**2:.12e},{1.5*h:.12e},10,,0.1\n")
    report = convergence_report(path, tmp_path / "report.txt")
    s = report["slopes"][0]
    assert s["eig_error_vs_ref"] == pytest.approx(2.0, abs=1e-10)
    assert s["l2_error"] == pytest.approx(2.0, abs=1e-10)
    assert s["dg_error"] == pytest.approx(1.0, abs=1e-10)
    # multiscale comparison with gamma = 1
    report2 = convergence_report(path, None, alpha_scale=1.0)
    ms = report2["multiscale"]
    assert ms["gamma"] == pytest.approx(1.0)
    assert ms["l2_slope"] == pytest.approx(2.0, abs=1e-10)
    assert ms["scaled_dg_slope"] == pytest.approx(2.0, abs=1e-10)


def test_precond_bench_tiny(tmp_path):
    cfg = parse_config(
        "problem = free_particle\nK = 3\nr = 2\np = 1\nnev = 2\n"
        "bench_tol = 1e-6\nmax_iter = 500\nn_grid = 32\nn_cheb = 8\n"
    )
    code = precond_bench(cfg, tmp_path)
    assert code == 0
    lines = (tmp_path / "bench.csv").read_text().strip().splitlines()[1:]
    rows = {l.split(",")[0]: l.split(",") for l in lines}
    assert set(rows) == {"none", "jacobi", "tbdg"}
    iters = {k: int(v[2]) for k, v in rows.items()}
    assert iters["tbdg"] <= iters["none"]
    conds = {k: float(v[1]) for k, v in rows.items()}
    assert conds["tbdg"] < conds["none"]
    eigs = {}
    for line in (tmp_path / "eigs.csv").read_text().strip().splitlines()[1:]:
        kind, j, lam = line.split(",")
        eigs.setdefault(kind, []).append(float(lam))
    assert np.allclose(eigs["tbdg"], eigs["none"], atol=1e-5)
    assert np.allclose(eigs["tbdg"], eigs["jacobi"], atol=1e-5)
    for kind in ("none", "jacobi", "tbdg"):
        assert (tmp_path / f"residuals_{kind}.csv").exists()


def test_cache_roundtrip(tmp_path):
    cfg = parse_config(ATOM_CFG + "cache = true\nK = 3\nr = 2\n")
    run(cfg, tmp_path)
    cache_files = list((tmp_path / "cache").iterdir())
    assert cache_files
    # second run reuses the cache and produces identical physics columns
    run(cfg, tmp_path / "again")
    cache_clear(tmp_path)
    assert not list((tmp_path / "cache").iterdir())


def test_main_exit_codes(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("problem = nope\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    good = tmp_path / "good.cfg"
    good.write_text(FREE_CFG)
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert main(["cache-clear", "--out", str(tmp_path / "o")]) == 0
    assert main([
        "report", str(tmp_path / "o" / "results.csv"),
    ]) == 0


def test_run_writes_solver_trace(tmp_path):
    cfg = parse_config(FREE_CFG + "trace = true\nK = 2\n")
    run(cfg, tmp_path)
    traces = list(tmp_path.glob("trace_K*_r*.csv"))
    assert traces
    head = traces[0].read_text().splitlines()[0]
    assert head == "iter,idx,residual,rayleigh"
