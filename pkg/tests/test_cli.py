import json

import pytest

from tdlrt import cli, model
from tdlrt.verify import FAIL, PASS, SKIP, run_checks


def test_verify_exit_zero(capsys, monkeypatch, tmp_path):
    monkeypatch.delenv("TDLRT_DATA_DIR", raising=False)
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "SKIP  MNIST files" in out


def test_sign_bug_in_factor_gradients_is_caught():
    def mutated(grad_w, weight):
        fg = model.factor_gradients(grad_w, weight)
        return model.FactorGradients(fg.grad_core, (-fg.grad_factors[0],) + tuple(fg.grad_factors[1:]))

    results = {r.name: r.status for r in run_checks(factor_gradients=mutated)}
    assert results["factor/core gradients (FD)"] == FAIL
    clean = {r.name: r.status for r in run_checks()}
    assert clean["factor/core gradients (FD)"] == PASS
    assert clean["MNIST files"] in (PASS, SKIP)


def test_synthetic_steps_zero(capsys):
    assert cli.main(["synthetic", "--steps", "0"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert lines[0].startswith("step,loss") and len(lines) == 2
    assert json.loads(captured.err)["steps"] == 0


def test_synthetic_writes_csv_and_summary(tmp_path):
    out, summ = tmp_path / "r.csv", tmp_path / "s.json"
    args = ["synthetic", "--shape", "8,8,8", "--true-ranks", "2,2,2", "--init-ranks", "4,4,4", "--steps", "10",
            "--out", str(out), "--summary", str(summ)]
    assert cli.main(args) == 0
    assert len(out.read_text().strip().splitlines()) == 12
    assert json.loads(summ.read_text())["final_ranks"]


def test_invalid_flags():
    with pytest.raises(SystemExit):
        cli.main(["synthetic", "--shape", "5,5", "--true-ranks", "6,1", "--init-ranks", "2,2"])
    with pytest.raises(SystemExit):
        cli.main(["synthetic", "--shape", "a,b"])
    with pytest.raises(SystemExit):
        cli.main(["synthetic", "--sweep", "--optimizer", "naive"])
    with pytest.raises(SystemExit):
        cli.main(["robustness", "--spectrum", "cubic"])


def test_mnist_missing_data(monkeypatch, tmp_path, capsys):
    monkeypatch.delenv("TDLRT_DATA_DIR", raising=False)
    assert cli.main(["mnist", "--data-dir", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_robustness_small(tmp_path, capsys):
    assert cli.main(["robustness", "--seed-count", "2", "--steps", "40", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert {"tdlrt", "tdlrt-fixed", "naive", "mean_steps_ratio"} <= set(summary)
    assert (tmp_path / "naive.csv").exists()
