import csv
import json

import numpy as np
import pytest

from redistopt import cli
from redistopt import lowrank as lr
from redistopt import models as md
from redistopt.solvers import CompositeProblem, nmapg

SMALL_SG = ["--task=sparse_group", "--data=synthetic:d=30,N=60,n_groups=3", "--n_groups=3",
            "--lam=0.1", "--mu=0.1"]


def read_metrics(path):
    return json.loads((path / "metrics.json").read_text())


# ingestion

def test_ingest_libsvm_example(tmp_path):
    p = tmp_path / "a.svm"
    p.write_text("+1 1:0.5 3:2\n")
    data = cli.ingest(p)
    assert np.array_equal(data.dense(), [[0.5, 0.0, 2.0]])
    assert data.targets.tolist() == [1.0]


def test_ingest_pgm_example(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n# tiny\n2 2\n255\n0 255\n128 64\n")
    img = cli.ingest(p)
    assert np.allclose(img.pixels, [[0, 1], [0.50196, 0.25098]], atol=1e-5)


def test_ingest_triples_example(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1 2 4.0\n")
    obs = cli.ingest(p)
    assert obs.shape == (1, 2) and len(obs) == 1
    assert (obs.rows[0], obs.cols[0], obs.values[0]) == (0, 1, 4.0)


def test_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    train, _, _ = lr.synth_lowrank(6, 5, 2, 0.6, 0.1, 1)
    cli.write_triples(tmp_path / "t.txt", train)
    back = cli.read_triples(tmp_path / "t.txt", train.shape)
    assert np.array_equal(back.rows, train.rows) and np.array_equal(back.cols, train.cols)
    assert np.array_equal(back.values, train.values)

    X = rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-8, 8, (4, 3))
    cli.write_csv_matrix(tmp_path / "m.csv", X)
    assert np.array_equal(cli.read_csv_matrix(tmp_path / "m.csv"), X)

    img = rng.random((5, 7))
    for binary in (False, True):
        cli.write_pgm(tmp_path / "i.pgm", img, binary)
        assert np.max(np.abs(cli.read_pgm(tmp_path / "i.pgm").pixels - img)) <= 1 / 255

    data, _ = md.synth_sparse_group(d=6, n_groups=2, N=5, seed=2)
    cli.write_libsvm(tmp_path / "d.svm", data)
    back = cli.read_libsvm(tmp_path / "d.svm", 6)
    assert np.array_equal(back.dense(), data.dense()) and np.array_equal(back.targets, data.targets)


@pytest.mark.parametrize("name,text,fragment", [
    ("a.svm", "1 1:0.5\n-1 0:2\n", "line 2"),
    ("a.svm", "1 1:abc\n", "line 1"),
    ("a.txt", "1 2 3\n2 x 1\n", "line 2"),
    ("a.txt", "0 1 2.0\n", "1-based"),
    ("a.csv", "1,2\n3\n", "line 2"),
    ("a.csv", "1,nan\n", "line 1"),
    ("a.pgm", "P2\n2 2\n255\n0 1 2\n", "pixels"),
])
def test_ingest_errors(tmp_path, name, text, fragment):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(cli.DataError, match=fragment):
        cli.ingest(p)


def test_triples_out_of_range(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("3 1 1.0\n")
    with pytest.raises(cli.DataError, match="outside"):
        cli.read_triples(p, (2, 2))


def test_ingest_command(tmp_path, capsys):
    p = tmp_path / "a.svm"
    p.write_text("1 1:1 2:2\n-1 3:1\n")
    assert cli.main(["ingest", str(p)]) == 0
    assert "2 samples x 3 features" in capsys.readouterr().out
    assert cli.main(["ingest", str(tmp_path / "missing.svm")]) == cli.EXIT_DATA
    assert cli.main(["ingest", str(tmp_path / "x.unknown")]) == cli.EXIT_CONFIG


# configuration

def test_flag_overrides_config_file(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"task": "rsc", "solver": "inexact_nmapg", "seed": 1, "mu": 0.5}))
    cfg = cli.load_config(cfg_path, {"seed": "3", "mu": "2"})
    assert cfg.seed == 3 and cfg.mu == 2.0
    cfg = cli.load_config(cfg_path, {})
    assert cfg.seed == 1 and cfg.mu == 0.5


@pytest.mark.parametrize("args", [
    ["--task=matcomp", "--solver=nmapg"],
    ["--task=nope", "--solver=nmapg"],
    ["--task=sparse_group", "--solver=fista"],
    ["--task=tv_denoise", "--solver=cccp", "--regularizer=none"],
    ["--task=tv_denoise", "--solver=smoothing", "--regularizer=mcp:beta=1,theta=2"],
    ["--task=rsc", "--solver=fista", "--regularizer=none", "--data=missing.csv"],
    ["--task=rsc", "--solver=inexact_nmapg", "--regularizer=lsp:beta=-1,theta=1"],
    ["--task=rsc", "--solver=inexact_nmapg", "--seed=1.5"],
    ["--task=rsc", "--solver=inexact_nmapg", "--mu=-1"],
    ["--task=sparse_group", "--solver=nmapg", "--data=synthetic:bogus=1"],
])
def test_config_errors_exit_2(tmp_path, args):
    assert cli.main(["run", f"--outdir={tmp_path}"] + args) == cli.EXIT_CONFIG


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["run", f"--config={p}"]) == cli.EXIT_CONFIG
    p.write_text(json.dumps({"task": "rsc", "solver": "fista", "extra": 1}))
    assert cli.main(["run", f"--config={p}"]) == cli.EXIT_CONFIG


def test_tau_below_lipschitz_is_config_error(tmp_path):
    assert cli.main(["run", "--solver=nmapg", "--tau=1e-6", f"--outdir={tmp_path}"] + SMALL_SG) == cli.EXIT_CONFIG


def test_data_error_exit_3(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,0,2\n0,1,x\n")
    assert cli.main(["run", "--task=rsc", "--solver=inexact_nmapg", f"--data={p}",
                     f"--outdir={tmp_path}"]) == cli.EXIT_DATA
    p = tmp_path / "bad.svm"
    p.write_text("2 1:1\n1 2:1\n1 3:1\n-1 4:1\n")
    assert cli.main(["run", "--task=tree", "--solver=nmapg", f"--data={p}", "--mu=0.1",
                     f"--outdir={tmp_path}"]) == cli.EXIT_DATA


def test_solver_abort_exit_4_keeps_trace(tmp_path, monkeypatch):
    def poisoned(problem, x0, params):
        calls = [0]

        def smooth(x):
            calls[0] += 1
            f, g = problem.smooth(x)
            return (np.nan, g) if calls[0] > 20 else (f, g)

        bad = CompositeProblem(smooth, problem.convex, problem.lipschitz, problem.shape)
        return nmapg(bad, x0, params)

    monkeypatch.setitem(cli.SOLVER_FUNCS, "nmapg", poisoned)
    assert cli.main(["run", "--solver=nmapg", f"--outdir={tmp_path}"] + SMALL_SG) == cli.EXIT_ABORT
    rows = (tmp_path / "sparse_group_nmapg_0" / "trace.csv").read_text().splitlines()
    assert rows[0].startswith("iter,objective") and len(rows) > 2


# runs

def test_sparse_group_run_metrics_and_determinism(tmp_path):
    args = ["run", "--task=sparse_group", "--data=synthetic:d=100", "--solver=nmapg", "--seed=7",
            "--lam=0.1", "--mu=0.1", "--record_time=false"]
    assert cli.main(args + [f"--outdir={tmp_path / 'a'}"]) == 0
    assert cli.main(args + [f"--outdir={tmp_path / 'b'}"]) == 0
    a, b = tmp_path / "a" / "sparse_group_nmapg_7", tmp_path / "b" / "sparse_group_nmapg_7"
    m = read_metrics(a)
    assert {"objective", "rmse", "abs_error", "time_ms"} <= set(m)
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    x = cli.read_csv_matrix(a / "solution.csv").ravel()
    assert x.shape == (100,)


def test_validation_grid_picks_parameters(tmp_path):
    cfg = cli.ExperimentConfig(task="sparse_group", solver="fista", regularizer="none",
                               data="synthetic:d=20,N=40,n_groups=2", n_groups=2, outdir=str(tmp_path))
    m = cli.execute(cfg)
    assert m["lam"] in cli.PARAM_GRID and m["mu"] in cli.PARAM_GRID


def test_matcomp_reports_rank(tmp_path):
    assert cli.main(["run", "--task=matcomp", "--solver=fw", "--mu=1", "--T=6",
                     f"--outdir={tmp_path}"]) == 0
    out = tmp_path / "matcomp_fw_0"
    m = read_metrics(out)
    assert isinstance(m["rank"], int) and m["rank"] >= 1
    assert lr.FactoredMatrix.load(out / "solution.npz").rank == m["rank"]


def test_tv_rmse_matches_written_image(tmp_path):
    assert cli.main(["run", "--task=tv_denoise", "--solver=inexact_nmapg", "--seed=2", "--T=300",
                     f"--outdir={tmp_path}"]) == 0
    out = tmp_path / "tv_denoise_inexact_nmapg_2"
    X = cli.read_csv_matrix(out / "solution.csv")
    clean = md.synth_image(8, 8).pixels
    assert X.shape == (8, 8)
    assert abs(read_metrics(out)["rmse"] - np.sqrt(np.mean((X - clean) ** 2))) <= 1e-12


def test_rsc_from_csv_file(tmp_path):
    y, D, _ = md.synth_rsc(seed=1)
    p = tmp_path / "rsc.csv"
    cli.write_csv_matrix(p, np.column_stack([D, y]))
    assert cli.main(["run", "--task=rsc", "--solver=inexact_nmapg", f"--data={p}",
                     f"--outdir={tmp_path}"]) == 0
    m = read_metrics(tmp_path / "rsc_inexact_nmapg_0")
    assert m["f1"] is None and m["abs_error"] is None and np.isfinite(m["objective"])


# compare

def write_configs(tmp_path, members):
    paths = []
    for k, d in enumerate(members):
        p = tmp_path / f"c{k}.json"
        p.write_text(json.dumps(d))
        paths.append(str(p))
    return paths


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_compare_empty_list(tmp_path):
    table = tmp_path / "t.csv"
    assert cli.main(["compare", f"--table={table}", f"--outdir={tmp_path}"]) == 0
    assert read_table(table) == []
    assert cli.compare([]) == []


def test_compare_nonconvex_solvers_agree(tmp_path):
    base = {"task": "sparse_group", "data": "synthetic:d=40,N=80,n_groups=4", "n_groups": 4,
            "lam": 0.1, "mu": 0.1, "seed": 2, "outdir": str(tmp_path)}
    paths = write_configs(tmp_path, [dict(base, solver=s) for s in ("nmapg", "scp", "cccp")]
                          + [dict(base, solver="fista", regularizer="none")])
    table = tmp_path / "t.csv"
    assert cli.main(["compare", *paths, f"--table={table}"]) == 0
    rows = read_table(table)
    assert [r["status"] for r in rows] == ["ok"] * 4
    obj = [float(r["objective"]) for r in rows[:3]]
    assert max(obj) - min(obj) <= 1e-4 * abs(min(obj))
    for s in ("nmapg", "scp", "cccp", "fista"):
        assert (tmp_path / f"sparse_group_{s}_2" / "trace.csv").exists()


def test_compare_records_failures_and_suffixes(tmp_path):
    base = {"task": "rsc", "solver": "inexact_nmapg", "outdir": str(tmp_path), "T": 50}
    members = [cli.ExperimentConfig.from_dict(dict(base, mu=m)) for m in (0.5, 1.0)]
    bad = cli.ExperimentConfig.from_dict(dict(base, solver="fista", regularizer="none"))
    bad.data = str(tmp_path / "vanished.csv")  # passes parsing, fails at run time
    rows = cli.compare(members + [bad], tmp_path / "t.csv")
    assert [r["status"] for r in rows[:2]] == ["ok", "ok"]
    assert rows[2]["status"].startswith("config error")
    assert (tmp_path / "rsc_inexact_nmapg_0" / "metrics.json").exists()
    assert (tmp_path / "rsc_inexact_nmapg_0_1" / "metrics.json").exists()


def test_compare_requires_shared_task_and_seed(tmp_path):
    a = cli.ExperimentConfig.from_dict({"task": "rsc", "solver": "fista", "regularizer": "none"})
    b = cli.ExperimentConfig.from_dict({"task": "rsc", "solver": "fista", "regularizer": "none", "seed": 1})
    with pytest.raises(cli.ConfigError):
        cli.compare([a, b])


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("REDIST_OPT_THREADS", "2")
    assert cli.thread_cap() == 2
    monkeypatch.setenv("REDIST_OPT_THREADS", "0")
    assert cli.thread_cap() >= 1
    monkeypatch.setenv("REDIST_OPT_THREADS", "many")
    with pytest.raises(cli.ConfigError):
        cli.thread_cap()


def test_recipe_parsing():
    assert cli.parse_recipe("synthetic:d=100,N=200,noise=0.05") == {"d": 100, "N": 200, "noise": 0.05}
    assert cli.parse_recipe("synthetic:") == {}
    with pytest.raises(cli.ConfigError):
        cli.parse_recipe("synthetic:d")
