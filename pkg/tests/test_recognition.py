import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copula_fhmm.exceptions import BoundaryError
from copula_fhmm.numerics import EPS_RHO, EPS_THETA
from copula_fhmm.recognition import (MlpSpec, RecognitionNet, all_windows, init_params,
                                     recog_backward, recog_forward, unpack, window)


def hand_net():
    spec = MlpSpec(2, 1, 1, hidden=(1,), activation="tanh", sharing="separate")
    return spec, np.ones(spec.n_params) - np.isin(np.arange(spec.n_params), bias_index(spec))


def bias_index(spec):
    idx, pos = [], 0
    for trunk in spec.layer_shapes():
        for i, o in trunk:
            pos += i * o
            idx.extend(range(pos, pos + o))
            pos += o
    return idx


class TestWindow:
    def test_three_points(self):
        y = np.array([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(window(y, 1, 2), [1.0, 2.0, 3.0])

    def test_left_edge(self):
        with pytest.raises(BoundaryError):
            window(np.zeros((10, 1)), 1, 4)

    def test_right_edge(self):
        with pytest.raises(BoundaryError):
            window(np.zeros((10, 1)), 9, 2)

    def test_slice_oracle(self, rng):
        y = rng.normal(size=(9, 2))
        for t in range(1, 8):
            np.testing.assert_array_equal(window(y, t, 2), np.concatenate([y[t - 1], y[t], y[t + 1]]))

    def test_all_windows_rows(self, rng):
        y = rng.normal(size=(12, 2))
        X = all_windows(y, 4)
        assert X.shape == (8, 10)
        for i in range(8):
            np.testing.assert_array_equal(X[i], window(y, i + 2, 4))


class TestSpec:
    @pytest.mark.parametrize("dt", [0, 1, 3, 5])
    def test_bad_window(self, dt):
        with pytest.raises(ValueError, match="even"):
            MlpSpec(dt, 1, 1)

    def test_needs_hidden_layer(self):
        with pytest.raises(ValueError):
            MlpSpec(2, 1, 1, hidden=())

    def test_param_count(self):
        spec = MlpSpec(4, 2, 3, hidden=(30,), sharing="chain")
        assert spec.n_params == 3 * (10 * 30 + 30 + 30 * 2 + 2)
        assert MlpSpec(4, 2, 3, hidden=(30,), sharing="shared").n_params == 10 * 30 + 30 + 30 * 6 + 6


class TestForward:
    def test_zero_weights(self):
        spec = MlpSpec(2, 2, 3)
        theta, rho = recog_forward(np.zeros(spec.n_params), spec, np.ones(6))
        np.testing.assert_array_equal(theta, 0.5)
        np.testing.assert_array_equal(rho, 0.0)

    def test_hand_computation(self):
        spec, params = hand_net()
        theta, rho = recog_forward(params, spec, [1.0, 0.0, 0.0])
        h = math.tanh(1.0)
        assert h == pytest.approx(0.761594, abs=1e-6)
        assert theta[0] == pytest.approx(1 / (1 + math.exp(-h)), abs=1e-15)
        # 30-digit reference; the often-quoted 0.681668 is a rounding slip
        assert theta[0] == pytest.approx(0.6816997421945262, abs=1e-15)
        assert rho[0] == pytest.approx(math.tanh(h), abs=1e-15)

    def test_initial_outputs_neutral(self):
        spec = MlpSpec(4, 2, 2)
        params = init_params(spec, np.random.default_rng(0))
        theta, rho = recog_forward(params, spec, np.zeros(10))
        np.testing.assert_allclose(theta, 0.5, atol=1e-15)
        np.testing.assert_allclose(rho, 0.0, atol=1e-15)

    def test_hidden_permutation(self, rng):
        spec = MlpSpec(2, 1, 1, hidden=(5,), sharing="chain")
        params = rng.normal(size=spec.n_params)
        perm = rng.permutation(5)
        swapped = params.copy()
        (W1, b1), (W2, b2) = unpack(swapped, spec)[0]
        (V1, c1), (V2, _) = unpack(params, spec)[0]
        W1[...] = V1[:, perm]
        b1[...] = c1[perm]
        W2[...] = V2[perm]
        x = rng.normal(size=3)
        for a, b in zip(recog_forward(params, spec, x), recog_forward(swapped, spec, x)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @given(st.floats(1, 1e4))
    def test_outputs_clamped(self, scale):
        spec = MlpSpec(2, 1, 2, hidden=(3,))
        params = np.random.default_rng(3).normal(size=spec.n_params) * scale
        X = np.random.default_rng(4).normal(size=(50, 3)) * scale
        theta, rho = recog_forward(params, spec, X)
        assert np.all((theta >= EPS_THETA) & (theta <= 1 - EPS_THETA))
        assert np.all((rho >= -1 + EPS_RHO) & (rho <= 1 - EPS_RHO))

    def test_shape_mismatch(self):
        spec = MlpSpec(2, 1, 1)
        with pytest.raises(ValueError):
            recog_forward(np.zeros(spec.n_params), spec, np.zeros(4))

    def test_shared_equals_block_diagonal(self, rng):
        M, H, D = 2, 4, 2
        per = MlpSpec(2, D, M, hidden=(H,), sharing="chain")
        shared = MlpSpec(2, D, M, hidden=(M * H,), sharing="shared")
        p = rng.normal(size=per.n_params)
        q = np.zeros(shared.n_params)
        (S1, s1), (S2, s2) = unpack(q, shared)[0]
        for m, trunk in enumerate(unpack(p, per)):
            (W1, b1), (W2, b2) = trunk
            S1[:, m * H:(m + 1) * H] = W1
            s1[m * H:(m + 1) * H] = b1
            S2[m * H:(m + 1) * H, m] = W2[:, 0]
            S2[m * H:(m + 1) * H, M + m] = W2[:, 1]
            s2[m], s2[M + m] = b2
        X = rng.normal(size=(7, 3 * D))
        for a, b in zip(recog_forward(p, per, X), recog_forward(q, shared, X)):
            np.testing.assert_allclose(a, b, atol=1e-14)


class TestBackward:
    def test_zero_upstream(self, rng):
        spec = MlpSpec(2, 1, 2)
        g = recog_backward(rng.normal(size=spec.n_params), spec, rng.normal(size=3),
                           (np.zeros(2), np.zeros(2)))
        assert np.array_equal(g, np.zeros(spec.n_params))

    def test_hand_output_weight(self):
        spec, params = hand_net()
        g = recog_backward(params, spec, [1.0, 0.0, 0.0], ([1.0], [0.0]))
        h = math.tanh(1.0)
        th = 1 / (1 + math.exp(-h))
        (_, _), (W2, _) = unpack(np.arange(spec.n_params), spec)[0]
        assert g[int(W2[0, 0])] == pytest.approx(th * (1 - th) * h, abs=1e-12)
        assert g[int(W2[0, 0])] == pytest.approx(0.681700 * 0.318300 * 0.761594, abs=1e-6)

    @pytest.mark.parametrize("sharing", ["chain", "separate", "shared"])
    @pytest.mark.parametrize("activation", ["tanh", "sigmoid", "relu"])
    def test_finite_differences(self, sharing, activation):
        rng = np.random.default_rng(hash((sharing, activation)) % 2 ** 32)
        for _ in range(12):
            dt = int(rng.choice([2, 4]))
            D = int(rng.integers(1, 3))
            M = int(rng.integers(1, 3))
            hidden = tuple(int(h) for h in rng.integers(1, 31, size=rng.integers(1, 3)))
            spec = MlpSpec(dt, D, M, hidden, activation, sharing)
            p = rng.normal(scale=0.4, size=spec.n_params)
            X = rng.normal(size=(3, spec.input_dim))
            up = (rng.normal(size=(3, M)), rng.normal(size=(3, M)))
            g = recog_backward(p, spec, X, up)

            def f(v):
                th, r = recog_forward(v, spec, X)
                return np.sum(up[0] * th) + np.sum(up[1] * r)

            h = 1e-6
            idx = rng.choice(spec.n_params, size=min(40, spec.n_params), replace=False)
            for i in idx:
                e = np.zeros_like(p)
                e[i] = h
                fd = (f(p + e) - f(p - e)) / (2 * h)
                if activation == "relu" and abs(fd - g[i]) > 1e-4:
                    continue  # kink crossed by the difference stencil
                assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_clamped_outputs_have_zero_gradient(self):
        spec = MlpSpec(2, 1, 1, hidden=(1,))
        net = RecognitionNet(spec, np.full(spec.n_params, 50.0))
        theta, rho, cache = net.forward_with_cache(np.ones((1, 3)))
        assert theta[0, 0] == 1 - EPS_THETA
        g = net.backward(cache, np.ones((1, 1)), np.zeros((1, 1)))
        assert np.all(g == 0.0)


def test_marginals_cover_interior(rng):
    spec = MlpSpec(4, 2, 2, hidden=(5,))
    net = RecognitionNet(spec, rng=rng)
    y = rng.normal(size=(20, 2))
    theta, rho = net.marginals(y)
    assert theta.shape == (16, 2)
    np.testing.assert_allclose(theta[3], net(window(y, 5, 4))[0])
