import json

import numpy as np
import pytest

from copula_fhmm.cli import main
from copula_fhmm.evaluation import EvalReport
from copula_fhmm.io import ModelFile, load_csv
from copula_fhmm.model import exact_posterior, preset_params


@pytest.fixture
def sim(tmp_path):
    data = tmp_path / "y.csv"
    assert main(["simulate", "--preset", "validation", "--length", "600", "--seed", "1",
                 "--data", str(data), "--states-out", str(tmp_path / "s.csv"),
                 "--model-out", str(tmp_path / "truth.txt")]) == 0
    return tmp_path


def _train(d, name, *extra):
    out = d / name
    rc = main(["train", "--data", str(d / "y.csv"), "--model-out", str(out), "--seed", "3",
               "--iterations", "60", *extra])
    assert rc == 0
    return out


def test_simulate_outputs(sim):
    y, _ = load_csv(sim / "y.csv")
    s, _ = load_csv(sim / "s.csv")
    assert y.shape == (600, 2) and s.shape == (600, 2)
    assert set(np.unique(s)) <= {0.0, 1.0}
    stored = ModelFile.load(sim / "truth.txt").params
    truth = preset_params("validation")
    np.testing.assert_array_equal(stored.W, truth.W)
    np.testing.assert_allclose(stored.A, truth.A, atol=1e-15)


def test_train_is_reproducible_across_threads(sim):
    a = _train(sim, "a.txt", "--threads", "1")
    b = _train(sim, "b.txt", "--threads", "4")
    assert a.read_bytes() == b.read_bytes()


def test_round_trip(sim, capsys):
    model = _train(sim, "m.txt", "--trace-out", str(sim / "trace.jsonl"), "--log-every", "20")
    lines = (sim / "trace.jsonl").read_text().splitlines()
    assert [json.loads(l)["iteration"] for l in lines] == [0, 20, 40, 59]
    assert main(["eval", "--model-in", str(model), "--data", str(sim / "y.csv"),
                 "--train-data", str(sim / "y.csv")]) == 0
    rep = EvalReport.from_json(capsys.readouterr().out)
    assert rep.ll_train == rep.ll_test and len(rep.mse) == 2
    assert main(["infer", "--model-in", str(model), "--data", str(sim / "y.csv"),
                 "--out", str(sim / "theta.csv")]) == 0
    theta, _ = load_csv(sim / "theta.csv")
    assert theta.shape == (600, 2) and np.all((theta >= 0) & (theta <= 1))


def test_infer_with_true_model_and_trained_nets(sim):
    # model held at the truth, networks trained: marginals near exact smoothing
    cfg = sim / "run.cfg"
    cfg.write_text("train_model = false\nlearning_rate = 3e-3\niterations = 3000\n")
    model = sim / "nets.txt"
    assert main(["train", "--config", str(cfg), "--data", str(sim / "y.csv"),
                 "--model-in", str(sim / "truth.txt"), "--model-out", str(model)]) == 0
    assert main(["infer", "--model-in", str(model), "--data", str(sim / "y.csv"),
                 "--out", str(sim / "theta.csv")]) == 0
    theta, _ = load_csv(sim / "theta.csv")
    y, _ = load_csv(sim / "y.csv")
    truth = ModelFile.load(sim / "truth.txt").params
    exact = exact_posterior(truth, y)
    assert np.mean(np.abs(theta[3:-3] - exact[3:-3])) <= 0.1


def test_warm_start_continues_networks(sim):
    first = _train(sim, "first.txt")
    second = _train(sim, "second.txt", "--model-in", str(first), "--learning-rate", "0")
    a, b = ModelFile.load(first), ModelFile.load(second)
    np.testing.assert_array_equal(a.net_params, b.net_params)
    np.testing.assert_array_equal(a.W, b.W)


def test_smf_and_standardize(sim, capsys):
    model = _train(sim, "smf.txt", "--algo", "smf", "--smf-iterations", "5", "--standardize")
    mf = ModelFile.load(model)
    assert mf.algorithm == "smf" and "standardize_mean" in mf.provenance
    assert main(["eval", "--model-in", str(model), "--data", str(sim / "y.csv")]) == 0
    rep = EvalReport.from_json(capsys.readouterr().out)
    assert rep.ll_train is None and rep.ll_test is not None


def test_compare(sim, capsys):
    assert main(["compare", "--data", str(sim / "y.csv"), "--test-data", str(sim / "y.csv"),
                 "--budget-seconds", "0.5", "--rows", "1:400", "--smf-suffix", "200"]) == 0
    reports = [EvalReport.from_json(l) for l in capsys.readouterr().out.splitlines()]
    assert [r.algorithm for r in reports] == ["svi", "smf"]
    assert all(r.wall_clock < 2.0 for r in reports)


@pytest.mark.parametrize("argv", [
    ["train"],
    ["eval", "--model-in", "missing.txt", "--data", "missing.csv"],
    ["simulate", "--data", "{d}/x.csv", "--preset", "nope"],
    ["train", "--data", "{d}/bad.csv", "--model-out", "{d}/m.txt"],
    ["train", "--config", "{d}/bad.cfg", "--data", "{d}/bad.csv", "--model-out", "{d}/m.txt"],
])
def test_errors_exit_2(tmp_path, argv, capsys):
    (tmp_path / "bad.csv").write_text("1,2\n3,oops\n")
    (tmp_path / "bad.cfg").write_text("speed = 11\n")
    argv = [a.replace("{d}", str(tmp_path)) for a in argv]
    assert main(argv) == 2
    assert "copula-fhmm" in capsys.readouterr().err


def test_numerical_failure_exit_3(sim, capsys):
    code = main(["train", "--data", str(sim / "y.csv"), "--model-out", str(sim / "m.txt"),
                 "--learning-rate", "1e30", "--iterations", "200"])
    assert code == 3
    assert "numerical" in capsys.readouterr().err
