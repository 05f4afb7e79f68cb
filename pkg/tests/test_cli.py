import csv
import math

import numpy as np
import pytest

from vmbcd.cli import (
    TRACE_COLUMNS,
    ConfigError,
    aggregate,
    build_problem,
    compare_report,
    main,
    parse_config,
    parse_seeds,
    read_aggregate_csv,
    render_svg,
    run_experiment,
)
from vmbcd.solvers import RunConfig, run

CONFIG = """
data = synthetic-regression
ell = 60
n = 20
ratio = 8
lam = 0.5
f_star = auto

[run]
name = uniform
algorithm = rcd-unit
sampler = uniform
seeds = 0-9
epochs = 8

[run]
name = lipschitz
algorithm = rcd-unit
sampler = lipschitz
seeds = 0-9
epochs = 8
"""


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("5, 1-2") == [5, 1, 2]
    for bad in ("", "3-1", "a"):
        with pytest.raises(ValueError):
            parse_seeds(bad)


def test_parse_config_values():
    cfg = parse_config(CONFIG)
    assert (cfg.ell, cfg.n, cfg.ratio, cfg.lam) == (60, 20, 8.0, 0.5)
    assert [r.name for r in cfg.runs] == ["uniform", "lipschitz"]
    assert cfg.runs[1].seeds == list(range(10))
    assert cfg.record_time is False


@pytest.mark.parametrize("text,needle", [
    ("ell = 10\n[run]\nepochs = 0\n", "epochs"),
    ("ell = x\n[run]\n", "line 1"),
    ("bogus = 1\n[run]\n", "line 1"),
    ("ell = 10\n\n[runs]\n", "line 3"),
    ("ell = 10\n[run]\nalgorithm = newton\n", "algorithm"),
    ("ell = 10\n[run]\nfoo = 1\n", "line 3"),
    ("ell = 10\n", "no [run]"),
    ("C = 0\n[run]\n", "C must"),
    ("data = missing.svm\n[run]\n", "not found"),
    ("x_axis = time\n[run]\n", "record_time"),
    ("[run]\nname = a\n[run]\nname = a\n", "duplicate"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=needle.replace("[", r"\[")):
        parse_config(text)


def test_run_writes_expected_files(tmp_path):
    run_experiment(parse_config(CONFIG), tmp_path)
    csvs = sorted(p.name for p in tmp_path.glob("*_seed*.csv"))
    assert len(csvs) == 20
    assert (tmp_path / "aggregate.csv").is_file()
    assert (tmp_path / "convergence.svg").read_text().startswith("<svg")
    rows = _read_csv(tmp_path / "uniform_seed3.csv")
    assert tuple(rows[0]) == TRACE_COLUMNS
    epochs = [int(r[0]) for r in rows[1:]]
    assert epochs == sorted(set(epochs))
    for r in rows[1:]:
        assert all(math.isfinite(float(v)) for v in r)


def test_rerun_is_byte_identical(tmp_path):
    cfg_text = CONFIG.replace("seeds = 0-9", "seeds = 0-2")
    run_experiment(parse_config(cfg_text), tmp_path / "a")
    run_experiment(parse_config(cfg_text), tmp_path / "b", threads=3)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_aggregate_is_arithmetic_mean(tmp_path):
    cfg = parse_config(CONFIG)
    run_experiment(cfg, tmp_path)
    agg = read_aggregate_csv(tmp_path / "aggregate.csv")
    traces = [_read_csv(tmp_path / f"lipschitz_seed{s}.csv")[1:] for s in range(10)]
    for row in agg["lipschitz"]:
        e = row["epoch"]
        vals = [float(tr[e][TRACE_COLUMNS.index("F")]) for tr in traces]
        assert abs(row["F_mean"] - np.mean(vals)) <= 1e-12 * max(1.0, abs(np.mean(vals)))
        assert row["n_seeds"] == 10


def test_aggregate_handles_early_stop_and_missing_gap():
    pb = build_problem(parse_config(CONFIG))
    a = run(pb, RunConfig("rcd-unit", epochs=3, record_time=False)).trace
    b = run(pb, RunConfig("rcd-unit", epochs=5, seed=1, record_time=False)).trace
    rows = aggregate([a, b])
    assert [r["n_seeds"] for r in rows] == [2, 2, 2, 2, 1, 1]
    assert rows[0]["rel_gap_mean"] is None


def test_report_identical_and_unreached(tmp_path, capsys):
    cfg = parse_config(CONFIG.replace("seeds = 0-9", "seeds = 0-1"))
    run_experiment(cfg, tmp_path)
    agg = tmp_path / "aggregate.csv"
    assert main(["report", str(agg), str(agg), "--target", "1e-1"]) == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith("[")]
    assert lines[0].split()[-1] == "1.000"
    assert lines[2].split()[-1] == "1.000"
    short = parse_config(CONFIG.replace("seeds = 0-9", "seeds = 0").replace("epochs = 8", "epochs = 1"))
    best = min(r["rel_gap_median"] for rows in run_experiment(short, tmp_path / "s").values() for r in rows)
    text = compare_report([tmp_path / "s" / "aggregate.csv"], best / 10)
    assert text.count("not reached") == 2
    with pytest.raises(ValueError):
        compare_report([{"only": []}], 0.1)


def test_main_run_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(CONFIG.replace("seeds = 0-9", "seeds = 0"))
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "o"), "--seed-offset", "5"]) == 0
    assert (tmp_path / "o" / "uniform_seed5.csv").is_file()
    bad = tmp_path / "bad.cfg"
    bad.write_text("ell = 10\n[run]\nepochs = 0\n")
    assert main(["run", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "nope.cfg")]) == 1


def test_libsvm_dataset_through_env_root(tmp_path, monkeypatch):
    (tmp_path / "tiny.svm").write_text("1 1:1 2:0.5\n-1 2:1 3:2\n1 1:0.3 3:1\n")
    monkeypatch.setenv("VMBCD_DATA_ROOT", str(tmp_path))
    cfg = parse_config("data = tiny.svm\nloss = squared-hinge\nreg = group-l2\nblock_size = 2\n"
                       "plot = false\n[run]\nepochs = 3\n")
    run_experiment(cfg, tmp_path / "o")
    assert (tmp_path / "o" / "run0_seed0.csv").is_file()
    assert not (tmp_path / "o" / "convergence.svg").exists()


def test_svg_nonconvex_series_is_min_so_far():
    rows = [{"epoch": e, "rel_gap_mean": None, "G_norm_sq_mean": g, "weighted_epoch_mean": e,
             "wall_ms_mean": 0.0} for e, g in enumerate([4.0, 1.0, 2.0, 0.5])]
    svg = render_svg({"biweight": rows})
    assert "min ||G_k||^2" in svg
    assert svg.count("<polyline") == 1
