import numpy as np
import pytest
from hypothesis import given, strategies as st

from copula_fhmm.elbo import TrainConfig, TrainTrace
from copula_fhmm.exceptions import ParseError
from copula_fhmm.io import (MODEL_FORMAT_VERSION, ModelFile, config_hash, load_csv,
                            parse_config, parse_index_list, parse_range, read_trace,
                            save_csv, train_config_from, write_trace)
from copula_fhmm.model import preset_params
from copula_fhmm.recognition import MlpSpec, RecognitionNet
from oracles import random_params


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestCsv:
    def test_small_file(self, tmp_path):
        y, tr = load_csv(_write(tmp_path, "1,2\n3,4\n5,6\n"))
        np.testing.assert_array_equal(y, [[1, 2], [3, 4], [5, 6]])
        assert tr is None

    def test_slicing(self, tmp_path):
        full = np.arange(40.0).reshape(10, 4)
        path = tmp_path / "full.csv"
        save_csv(path, full)
        y, _ = load_csv(path, columns=[4, 2], rows=(3, 7))
        np.testing.assert_array_equal(y, full[2:7][:, [3, 1]])

    def test_header_and_open_range(self, tmp_path):
        y, _ = load_csv(_write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"), rows=(2, None), header=True)
        np.testing.assert_array_equal(y, [[3, 4], [5, 6]])

    @pytest.mark.parametrize("text,line", [
        ("1,2\n3,nan\n", 2),
        ("1,2\n3\n", 2),
        ("1,2\n3,4\n5,x\n", 3),
        ("1,2\n,4\n", 2),
        ("1,inf\n", 1),
    ])
    def test_bad_rows(self, tmp_path, text, line):
        with pytest.raises(ParseError) as err:
            load_csv(_write(tmp_path, text))
        assert err.value.line == line
        assert f"line {line}" in str(err.value)

    def test_empty(self, tmp_path):
        with pytest.raises(ParseError):
            load_csv(_write(tmp_path, "\n\n"))

    def test_standardize(self, tmp_path, rng):
        raw = rng.normal(3.0, 2.0, size=(50, 2))
        path = tmp_path / "raw.csv"
        save_csv(path, raw)
        y, tr = load_csv(path, standardize=True)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-14)
        np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-14)
        np.testing.assert_allclose(y * tr["scale"] + tr["mean"], raw, atol=1e-13)

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64),
                    min_size=2, max_size=12))
    def test_roundtrip_exact(self, values):
        import tempfile, pathlib
        with tempfile.TemporaryDirectory() as d:
            path = pathlib.Path(d) / "v.csv"
            arr = np.array(values).reshape(-1, 1)
            save_csv(path, arr)
            np.testing.assert_array_equal(load_csv(path)[0], arr)

    def test_selection_strings(self):
        assert parse_index_list("2,3") == [2, 3]
        assert parse_range("5:") == (5, None)
        for bad in ("0,1", "a"):
            with pytest.raises(ValueError):
                parse_index_list(bad)
        for bad in ("3", "4:2", "0:3"):
            with pytest.raises(ValueError):
                parse_range(bad)


class TestModelFile:
    def test_roundtrip_with_net(self, rng):
        p = random_params(rng, 3, 2)
        net = RecognitionNet(MlpSpec(4, 2, 3, (7,), "relu", "separate"), rng=rng)
        mf = ModelFile.from_model(p, net, "svi", {"seed": 4, "mean": np.array([0.1, 1 / 3])})
        back = ModelFile.loads(mf.dumps())
        assert back == mf
        np.testing.assert_array_equal(back.W, p.W)
        np.testing.assert_array_equal(back.L, p.L)
        np.testing.assert_array_equal(back.net.params, net.params)
        np.testing.assert_allclose(back.params.A, p.A, atol=1e-15)
        assert back.provenance["seed"] == 4
        np.testing.assert_array_equal(back.provenance["mean"], [0.1, 1 / 3])

    def test_roundtrip_without_net(self, tmp_path):
        mf = ModelFile.from_model(preset_params("scalability"), algorithm="smf")
        mf.save(tmp_path / "m.txt")
        back = ModelFile.load(tmp_path / "m.txt")
        assert back == mf and back.net is None and back.algorithm == "smf"

    def test_version_mismatch(self):
        text = ModelFile.from_model(preset_params("validation")).dumps()
        with pytest.raises(ParseError, match="unsupported"):
            ModelFile.loads(text.replace(MODEL_FORMAT_VERSION, "copula-fhmm-model 9"))

    @pytest.mark.parametrize("edit", [
        lambda t: t + "colour = blue\n",
        lambda t: t.replace("n_dims = 2", "n_dims = 3"),
        lambda t: t.replace("W = ", "W = x "),
        lambda t: t + "W = 1\n",
    ])
    def test_corrupt(self, edit):
        text = ModelFile.from_model(preset_params("validation")).dumps()
        with pytest.raises(ParseError):
            ModelFile.loads(edit(text))


class TestConfig:
    def test_parse(self):
        cfg = parse_config("window = 6\nhidden = 20, 10\nlearning_rate = 1e-2\n"
                           "# comment\nstandardize = yes\nalgo = smf\n")
        assert cfg == {"window": 6, "hidden": (20, 10), "learning_rate": 0.01,
                       "standardize": True, "algo": "smf"}
        tc = train_config_from(cfg)
        assert tc.window == 6 and tc.hidden == (20, 10)

    def test_unknown_key(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_config("window = 4\nwindw = 6\n")

    def test_bad_value(self):
        with pytest.raises(ParseError):
            parse_config("iterations = many\n")

    def test_hash_ignores_threads_and_budget(self):
        a = TrainConfig(n_threads=1)
        assert config_hash(a) == config_hash(TrainConfig(n_threads=8, budget_seconds=3.0))
        assert config_hash(a) != config_hash(TrainConfig(window=6))


def test_trace_roundtrip(tmp_path):
    tr = TrainTrace()
    tr.append(0, -12.5, 1.0, 2.0, 0.01)
    tr.append(100, -3.25, 0.5, 0.25, 1 / 3)
    write_trace(tmp_path / "t.jsonl", tr)
    back = read_trace(tmp_path / "t.jsonl")
    assert back.records() == tr.records()


def test_trace_corrupt(tmp_path):
    path = _write(tmp_path, '{"iteration": 0}\n', "t.jsonl")
    with pytest.raises(ParseError, match="line 1"):
        read_trace(path)
