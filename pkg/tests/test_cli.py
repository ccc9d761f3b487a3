import json
import re

import pytest

from dopl.cli import main, replication_seeds, summarize

ERROR_LINE = re.compile(r'^error code=(\d) kind=(\w+) message=(".*")$')

SMALL_DGP = """\
n = 300
T = 3
beta = 1.0
gamma = -0.5 0.5
lambda = 0.0
gamma_norm = 2
lambda_norm = 1
heterogeneity = normal:0,1
"""


@pytest.fixture
def dgp(tmp_path):
    path = tmp_path / "dgp.cfg"
    path.write_text(SMALL_DGP)
    return path


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    m = ERROR_LINE.match(err)
    assert m, err
    return int(m.group(1)), m.group(2), json.loads(m.group(3))


def test_verify_q3_t3(capsys):
    assert main(["verify", "--Q", "3", "--T", "3", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "valid_space_dimension = 12" in out
    assert "status = pass" in out
    value = float(re.search(r"max_abs_conditional_mean = (\S+)", out).group(1))
    assert value <= 1e-10


def test_simulate_estimate_round_trip_on_reference_design(tmp_path, capsys):
    data = tmp_path / "panel.csv"
    assert main(["simulate", "--design", "reference", "--n", "400", "--seed", "1", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["estimate", "--data", str(data), "--instruments", "paper-differences", "--rescale",
                 "--seed", "0", "--format", "csv"]) == 0
    rows = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("parameter,")]
    names = [r.split(",")[1] for r in rows]
    assert len(names) == 3 + 4 + 3
    assert sum("pinned" in r for r in rows) == 2


def test_malformed_csv_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("unit,period,y,x1\n1,0,1,0.5\n1,1,2\n")
    assert main(["estimate", "--data", str(bad), "--seed", "0"]) == 2
    code, kind, msg = _error(capsys)
    assert (code, kind) == (2, "data")
    assert "line 3" in msg


def test_missing_file_is_a_data_error(tmp_path, capsys):
    assert main(["estimate", "--data", str(tmp_path / "none.csv"), "--seed", "0"]) == 2
    assert _error(capsys)[:2] == (2, "data")


@pytest.mark.parametrize("argv", [
    [],
    ["simulate", "--design", "reference", "--n", "10", "--out", "x.csv"],  # no seed
    ["verify", "--Q", "3"],
    ["montecarlo", "--design", "reference", "--n", "10", "--reps", "0", "--seed", "1"],
    ["bogus"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert _error(capsys)[:2] == (1, "usage")


def test_bad_config_value_is_a_data_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_DGP.replace("n = 300", "n = many"))
    assert main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "d.csv")]) == 2
    assert _error(capsys)[0] == 2


def test_identification_failure_is_numerical(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n = 1\nT = 3\nbeta = 0.5\ngamma = 0 0.3 0.2\nlambda = -1 1\n")
    # a one-point support on a two-covariate-free design still identifies; an empty support cannot
    assert main(["identify", "--config", str(cfg), "--support", "0 1", "--seed", "3"]) == 0
    capsys.readouterr()
    assert main(["identify", "--config", str(cfg), "--support", "0 1", "--spread", "0", "--seed", "3"]) == 3
    assert _error(capsys)[:2] == (3, "numerical")


def _run(argv, capsys):
    assert main(argv) == 0
    return capsys.readouterr().out


def test_simulate_is_byte_reproducible(tmp_path, dgp, capsys):
    outs = []
    for k in range(2):
        path = tmp_path / f"d{k}.csv"
        rep = _run(["simulate", "--config", str(dgp), "--seed", "11", "--out", str(path)], capsys)
        outs.append((path.read_bytes(), rep.replace(str(path), "OUT")))
    assert outs[0] == outs[1]
    third = tmp_path / "d2.csv"
    _run(["simulate", "--config", str(dgp), "--seed", "12", "--out", str(third)], capsys)
    assert third.read_bytes() != outs[0][0]


@pytest.mark.parametrize("fmt", ["text", "csv", "json-lines"])
def test_estimate_is_byte_reproducible(tmp_path, dgp, capsys, fmt):
    data = tmp_path / "d.csv"
    _run(["simulate", "--config", str(dgp), "--seed", "5", "--out", str(data)], capsys)
    argv = ["estimate", "--data", str(data), "--multistart", "3", "--seed", "2", "--format", fmt]
    assert _run(argv, capsys) == _run(argv, capsys)


def test_montecarlo_is_byte_reproducible_and_worker_independent(tmp_path, dgp, capsys):
    base = ["montecarlo", "--config", str(dgp), "--n", "200", "--reps", "3", "--instruments",
            "paper-differences", "--rescale", "--per-rep", "--seed", "9", "--format", "csv"]
    a = _run(base, capsys)
    assert a == _run(base, capsys)
    b = _run(base + ["--workers", "2"], capsys)
    strip = lambda s: [ln for ln in s.splitlines() if not ln.startswith("# workers")]  # noqa: E731
    assert strip(a) == strip(b)


def test_json_lines_records(tmp_path, dgp, capsys):
    out = tmp_path / "r.jsonl"
    assert main(["montecarlo", "--config", str(dgp), "--n", "150", "--reps", "2", "--instruments",
                 "initial-condition-indicators", "--seed", "4", "--format", "json-lines", "--out", str(out)]) == 0
    recs = [json.loads(ln) for ln in out.read_text().splitlines()]
    kinds = [r["type"] for r in recs]
    assert kinds[0] == "config" and "summary" in kinds and "result" in kinds
    rows = [r for r in recs if r["type"] == "summary"]
    assert [r["row"] for r in rows] == ["True", "Median", "MAE", "IQR"]
    assert recs[0]["seed"] == 4


def test_report_file_guard(tmp_path, dgp, capsys):
    target = tmp_path / "missing_dir" / "r.txt"
    assert main(["montecarlo", "--config", str(dgp), "--reps", "1", "--seed", "1", "--out", str(target)]) == 2
    assert "output directory" in _error(capsys)[2]


def test_replication_seeds_are_distinct_and_stable():
    s = replication_seeds(3, 50)
    assert len(set(s)) == 50 and all(0 <= v < 2**63 for v in s)
    assert replication_seeds(3, 10) == s[:10]


def test_summary_statistics():
    est = [[1.0, 0.0], [2.0, 1.0], [4.0, 3.0], [3.0, 2.0]]
    st = summarize(est, [2.0, 0.0])
    assert st["Median"].tolist() == [2.5, 1.5]
    assert st["MAE"].tolist() == [1.0, 1.5]
    assert st["IQR"].tolist() == [1.5, 1.5]
    assert summarize(est, [2.0, 0.0], "mean")["MAE"].tolist() == [1.0, 1.5]
