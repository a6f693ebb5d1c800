import csv
import json
import subprocess
import sys

import numpy as np
import pytest

import fastgn.affine
from fastgn.cli import (
    LOG_COLUMNS,
    STEP_RATIO_COLUMNS,
    TIMING_COLUMNS,
    TRACE_COLUMNS,
    main,
)
from fastgn.verify import run_all


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_trace_command(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    assert main(["mechanism", "trace", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == 52
    first = dict(zip(rows[0], map(float, rows[1])))
    assert first == {"xi": 0.0, "tau_ret": 0.48, "tau_drop": 0.0, "tau_full": 0.48}
    text = out.read_text()
    assert text.splitlines()[0] == "xi,tau_ret,tau_drop,tau_full"
    assert not any(line.endswith(",") for line in text.splitlines())
    assert "config_hash=" in capsys.readouterr().out
    meta = json.loads((tmp_path / "trace.csv.meta.json").read_text())
    assert meta["config"]["p_star"] == 0.6


def test_step_ratio_command(tmp_path):
    out = tmp_path / "sr.csv"
    assert main(["mechanism", "step-ratio", "--points", "10", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert tuple(rows[0]) == STEP_RATIO_COLUMNS
    assert {float(r[2]) for r in rows[1:]} == {0.01, 0.1, 1.0}
    assert len(rows) == 31


def test_timing_command(tmp_path):
    out = tmp_path / "t.csv"
    args = ["mechanism", "timing", "--classes-grid", "2,4", "--features", "8", "--batch", "16",
            "--examples", "32", "--warmup", "1", "--timed", "2", "--out", str(out)]
    assert main(args) == 0
    rows = read_rows(out)
    assert tuple(rows[0]) == TIMING_COLUMNS
    assert len(rows) == 7
    assert json.loads((tmp_path / "t.csv.meta.json").read_text())["seed"] == 0


def test_timing_default_grid():
    from fastgn.cli import build_parser

    args = build_parser().parse_args(["mechanism", "timing", "--out", "x"])
    assert args.classes_grid == [2 ** k for k in range(1, 13)]
    assert (args.batch, args.features, args.warmup, args.timed) == (512, 2048, 128, 640)


def test_train_head_defaults():
    from fastgn.cli import build_parser

    a = build_parser().parse_args(["train-head", "c", "--out", "x"])
    assert (a.method, a.lr, a.damping, a.cg_tol, a.cg_max_iter) == ("fgn", None, 1.0, 1e-5, 5)
    assert (a.batch, a.epochs, a.seeds, a.eval_cadence) == (128, 150, 10, 100)


def _make_cache(tmp_path):
    cache = tmp_path / "c.fgnf"
    assert main(["make-features", "clustered", "--n", "300", "--features", "6", "--classes", "5",
                 "--seed", "1", "--out", str(cache)]) == 0
    return cache


def train_args(cache, out, *extra):
    return ["train-head", str(cache), "--epochs", "2", "--seeds", "2", "--batch", "32",
            "--eval-cadence", "3", "--thresholds", "0.2,1.5", "--deterministic", "--out", str(out), *extra]


@pytest.mark.parametrize("method", ["fgn", "sgn", "adam"])
def test_train_head_outputs(tmp_path, method):
    cache = _make_cache(tmp_path)
    out = tmp_path / "log.csv"
    assert main(train_args(cache, out, "--method", method)) == 0
    rows = read_rows(out)
    assert tuple(rows[0]) == LOG_COLUMNS
    assert {r[0] for r in rows[1:]} == {"0", "1"}
    agg = read_rows(tmp_path / "log.aggregate.csv")
    assert agg[0][:3] == ["method", "wall_seconds", "mean_accuracy"]
    thr = read_rows(tmp_path / "log.thresholds.csv")
    assert thr[1][:2] == [method, "0.2"]
    assert thr[2] == [method, "1.5", "--"]


def test_train_head_deterministic_rerun(tmp_path, capsys):
    cache = _make_cache(tmp_path)
    outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    hashes = []
    for out in outs:
        capsys.readouterr()
        assert main(train_args(cache, out)) == 0
        hashes.append([l for l in capsys.readouterr().out.splitlines() if "config_hash" in l][0])
    assert hashes[0] == hashes[1]

    def strip_wall(path):
        rows = read_rows(path)
        i = rows[0].index("wall_seconds")
        return [r[:i] + r[i + 1:] for r in rows], [float(r[i]) for r in rows[1:]]

    a, wall_a = strip_wall(outs[0])
    b, wall_b = strip_wall(outs[1])
    assert a == b
    for wall, rows in ((wall_a, a), (wall_b, b)):
        seeds = [r[0] for r in rows[1:]]
        for s in set(seeds):
            w = [t for t, si in zip(wall, seeds) if si == s]
            assert all(y > x for x, y in zip(w, w[1:]))


def test_exit_codes(tmp_path, capsys):
    assert main(["train-head", str(tmp_path / "missing.fgnf"), "--out", str(tmp_path / "o.csv")]) == 2
    bad = tmp_path / "bad.fgnf"
    bad.write_bytes(b"FGNF\x01\x00\x00\x00")
    assert main(["train-head", str(bad), "--out", str(tmp_path / "o.csv")]) == 1
    assert main(["mechanism", "trace", "--out", str(tmp_path / "nodir" / "t.csv")]) == 2
    assert main(["mechanism", "trace", "--classes", "1", "--out", str(tmp_path / "t.csv")]) == 1
    assert main(["train-head", str(bad), "--batch", "0", "--out", "x"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train-head"])
    assert exc.value.code == 1


def test_verify_command_passes(capsys):
    assert main(["verify", "--only", "adjoint", "gram", "trace_sum"]) == 0
    out = capsys.readouterr().out
    assert "PASS  adjoint" in out and "3/3 suites passed" in out


def test_verify_tolerance_override(capsys):
    assert main(["verify", "--only", "gradient_fd", "--tol", "gradient_fd=1e-30"]) == 1
    assert main(["verify", "--tol", "bogus=1"]) == 1


def test_verify_detects_injected_adjoint_sign_error(monkeypatch, capsys):
    original = fastgn.affine.affine_row_operator

    def broken(params, batch, margins=None):
        op = original(params, batch, margins)
        vjp = op._vjp
        op._vjp = lambda u: -vjp(u)
        return op

    monkeypatch.setattr(fastgn.affine, "affine_row_operator", broken)
    status = main(["verify", "--only", "adjoint"])
    out = capsys.readouterr().out
    assert status != 0
    assert "FAIL  adjoint" in out


def test_full_verify_reports_decomposition_error():
    results = {r.name: r for r in run_all()}
    assert all(r.passed for r in results.values())
    assert results["decomposition"].worst <= 1e-10
    assert results["decomposition"].n_cases >= 1000


def test_module_entry_point(tmp_path):
    out = tmp_path / "t.csv"
    proc = subprocess.run([sys.executable, "-m", "fastgn", "mechanism", "trace", "--points", "3",
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(read_rows(out)) == 4
