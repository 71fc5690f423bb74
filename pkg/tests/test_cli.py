import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cafda import simgen
from cafda.cli import main
from cafda.dataset import write_csv


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Simulated Phase-I data, a trained archive and a calibration for lambda=0.3."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--phase1", "--seed", "0", "--out", str(d)]) == 0
    assert main(["train", "--out", str(d), "--data", str(d / "phase1.csv"),
                 "--term", "constant_intercept", "--term", "functional_intercept(t)",
                 "--term", "smooth(z, k=20)"]) == 0
    assert main(["calibrate", "--out", str(d), "--lambda", "0.3", "--arl0", "370.4", "--reps", "20000"]) == 0
    return d


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_phase1_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--phase1", "--seed", "7", "--days", "30", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/phase1.csv").read_bytes() == (tmp_path / "b/phase1.csv").read_bytes()


def _eigenvalues(workdir):
    return json.loads((workdir / "model.json").read_text())["eigensystems"][0]["eigenvalues"]


@pytest.mark.xfail(strict=True, reason="seed-0 sample variances of the true scores are already 9% and 14% low "
                                       "for components 2 and 3; covariance smoothing shrinks them further")
def test_trained_eigenvalues_within_quarter_of_truth(workdir):
    np.testing.assert_allclose(_eigenvalues(workdir), np.exp(-np.array([1.0, 1.5, 2.0])), rtol=0.25)


def test_train_writes_archive_and_report(workdir):
    nu = _eigenvalues(workdir)
    assert len(nu) == 3
    np.testing.assert_allclose(nu, np.exp(-np.array([1.0, 1.5, 2.0])), rtol=0.5)
    names = {p.name for p in workdir.iterdir()}
    assert {"terms.csv", "eigenfunctions.csv", "phase1_scores.csv", "train_report.json"} <= names
    terms = {r["term"] for r in _read(workdir / "terms.csv")}
    assert {"functional_intercept(t)", "smooth(z)"} <= terms


def test_report_command(workdir, capsys):
    assert main(["report", "--out", str(workdir)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["segments"][0]["m"] == 3
    assert 0.3 < summary["r2"] < 0.9
    assert [t["term"] for t in summary["terms"]] == ["constant_intercept", "functional_intercept(t)",
                                                     "smooth(z, k=20)"]


def test_unknown_term_exits_2_without_archive(tmp_path, workdir):
    code = main(["train", "--out", str(tmp_path), "--data", str(workdir / "phase1.csv"), "--term", "wiggle(z)"])
    assert code == 2
    assert not (tmp_path / "model.json").exists()


def test_missing_data_file_exits_3(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nope.csv")]) == 3


def test_malformed_csv_exits_3(tmp_path):
    (tmp_path / "bad.csv").write_text("day,time,u\n1,1,abc\n")
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "bad.csv")]) == 3


def test_bad_config_exits_2(tmp_path):
    (tmp_path / "c.toml").write_text("[chart]\nlambda = 3\n")
    assert main(["--config", str(tmp_path / "c.toml"), "report"]) == 2


def test_lambda_out_of_range_exits_2(tmp_path):
    assert main(["calibrate", "--dim", "2", "--lambda", "1.5", "--out", str(tmp_path)]) == 2


def test_calibrate_without_archive(capsys, tmp_path):
    assert main(["calibrate", "--dim", "1", "--lambda", "1", "--arl0", "370.4", "--reps", "20000",
                 "--out", str(tmp_path)]) == 0
    cal = json.loads(capsys.readouterr().out)
    assert cal["h4"] == pytest.approx(9.0, rel=0.02)


def test_monitor_needs_calibration(workdir, tmp_path):
    write_csv(simgen.generate_phase2(simgen.DgpConfig(), 5, seed=1), tmp_path / "p2.csv")
    code = main(["monitor", "--model", str(workdir / "model.json"), "--data", str(tmp_path / "p2.csv"),
                 "--lambda", "0.1", "--out", str(tmp_path)])
    assert code == 2


def _monitor(workdir, out, data, *extra):
    return main(["monitor", "--model", str(workdir / "model.json"), "--data", str(data), "--lambda", "0.3",
                 "--out", str(out), *extra])


def test_monitor_is_deterministic_and_leaves_archive(workdir, tmp_path):
    before = (workdir / "model.json").read_bytes()
    assert main(["simulate", "--phase2", "--days", "40", "--delta", "1", "--seed", "3", "--out", str(tmp_path)]) == 0
    for name in ("a", "b"):
        assert _monitor(workdir, tmp_path / name, tmp_path / "phase2.csv") == 0
    for f in ("chart.csv", "phase2_scores.csv", "alarms.log"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (workdir / "model.json").read_bytes() == before
    rows = _read(tmp_path / "a/chart.csv")
    assert list(rows[0]) == ["g", "day_id", "T2", "h4", "alarmed"]
    assert len(rows) == 40


def test_end_to_end_is_reproducible(tmp_path):
    outputs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["simulate", "--phase1", "--seed", "2", "--days", "60", "--out", str(d)]) == 0
        assert main(["train", "--out", str(d), "--data", str(d / "phase1.csv"),
                     "--term", "constant_intercept", "--term", "functional_intercept(t)",
                     "--term", "smooth(z)"]) == 0
        assert main(["calibrate", "--out", str(d), "--lambda", "0.3", "--arl0", "50", "--reps", "2000",
                     "--seed", "2"]) == 0
        assert main(["simulate", "--phase2", "--days", "15", "--seed", "2", "--out", str(d)]) == 0
        assert _monitor(d, d / "mon", d / "phase2.csv", "--seed", "2") == 0
        outputs.append([(d / f).read_bytes() for f in ("model.json", "mon/chart.csv", "mon/phase2_scores.csv")])
    assert outputs[0] == outputs[1]


def test_empty_phase2_file(workdir, tmp_path, caplog):
    (tmp_path / "empty.csv").write_text("day,time,u,z\n")
    assert _monitor(workdir, tmp_path, tmp_path / "empty.csv") == 0
    assert len(_read(tmp_path / "chart.csv")) == 0
    assert "no days" in caplog.text


def test_day_without_usable_points_is_skipped(workdir, tmp_path, caplog):
    (tmp_path / "p2.csv").write_text("day,time,u,z\n1,1,5.0,3.0\n1,2,5.1,3.0\n2,1,,3.0\n3,1,4.9,3.1\n")
    assert _monitor(workdir, tmp_path, tmp_path / "p2.csv") == 0
    rows = _read(tmp_path / "chart.csv")
    assert [r["day_id"] for r in rows] == ["1", "3"]
    assert "day 2 skipped" in caplog.text


def test_in_control_streams_rarely_alarm_early(workdir, tmp_path):
    quiet = 0
    n = 20
    for seed in range(n):
        out = tmp_path / str(seed)
        assert main(["simulate", "--phase2", "--days", "30", "--seed", str(seed), "--out", str(out)]) == 0
        assert _monitor(workdir, out, out / "phase2.csv") == 0
        quiet += not any(r["alarmed"] == "1" for r in _read(out / "chart.csv"))
    assert quiet / n >= 0.8


def _first_alarm(workdir, out, delta, seed):
    args = ["simulate", "--phase2", "--days", "30", "--seed", str(seed), "--out", str(out)]
    if delta:
        args += ["--delta", str(delta), "--component", "1"]
    assert main(args) == 0
    assert _monitor(workdir, out, out / "phase2.csv") == 0
    hits = [int(r["g"]) for r in _read(out / "chart.csv") if r["alarmed"] == "1"]
    return hits[0] if hits else 31


def test_shift_is_detected_and_faster_for_larger_shifts(workdir, tmp_path):
    medians = {}
    for delta in (1.5, 3.0, 6.0):
        runs = [_first_alarm(workdir, tmp_path / f"{delta}-{s}", delta, s) for s in range(9)]
        medians[delta] = float(np.median(runs))
    assert medians[3.0] <= 5
    assert medians[1.5] >= medians[3.0] >= medians[6.0]


def test_simulate_arl_small(workdir, tmp_path):
    code = main(["simulate", "--arl", "--model", str(workdir / "model.json"), "--lambdas", "0.3",
                 "--components", "1", "--deltas", "0,4", "--reps", "100", "--out", str(tmp_path)])
    assert code == 0
    rows = _read(tmp_path / "arl.csv")
    assert [float(r["delta"]) for r in rows] == [0.0, 4.0]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "cafda", "calibrate", "--dim", "0", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2
