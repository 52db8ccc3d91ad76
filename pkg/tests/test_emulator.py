import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emloc.emulator import (
    CalibrationStats,
    FactorizedWeight,
    accumulate_activations,
    activation_aware_factorize,
    build_emulator,
    network_weighted_error,
    plain_factorize,
    rank_for_ratio,
    regularized_gram,
    weighted_error,
)
from emloc.linalg import DimensionError, LinalgError
from emloc.model import forward

from .helpers import random_net


def anisotropic(rng, rows, d, cond=1e3):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = np.geomspace(1.0, 1.0 / math.sqrt(cond), d)
    return rng.standard_normal((rows, d)) * scales @ q.T


def stats_for(x):
    return accumulate_activations(CalibrationStats.empty(x.shape[1]), x)


class TestCalibrationStats:
    def test_single_row(self):
        s = accumulate_activations(CalibrationStats.empty(3), [[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(s.gram, np.diag([1.0, 0.0, 0.0]))
        assert s.count == 1

    def test_concatenation_oracle(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
        split = accumulate_activations(accumulate_activations(CalibrationStats.empty(4), a), b)
        joint = stats_for(np.vstack([a, b]))
        np.testing.assert_allclose(split.gram, joint.gram, atol=1e-12)
        assert split.count == joint.count == 12

    def test_zero_batch(self, rng):
        s = stats_for(rng.standard_normal((3, 2)))
        after = accumulate_activations(s, np.zeros((2, 2)))
        np.testing.assert_array_equal(after.gram, s.gram)
        assert after.count == s.count + 2

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            accumulate_activations(CalibrationStats.empty(3), np.ones((2, 4)))

    def test_regularized_gram(self, rng):
        x = rng.standard_normal((6, 3))
        s = stats_for(x)
        ridge = 1e-6 * np.trace(s.gram) / (6 * 3)
        np.testing.assert_allclose(regularized_gram(s), x.T @ x / 6 + ridge * np.eye(3), atol=1e-14)

    def test_fewer_rows_than_dims_still_factorizes(self, rng):
        x = rng.standard_normal((3, 10))
        fw = activation_aware_factorize(rng.standard_normal((10, 6)), stats_for(x), 2)
        assert fw.shape == (10, 6) and fw.rank == 2

    def test_empty_stats_rejected(self, rng):
        with pytest.raises(LinalgError):
            activation_aware_factorize(rng.standard_normal((3, 3)), CalibrationStats.empty(3), 1)


class TestActivationAware:
    def test_isotropic_matches_plain(self, rng):
        w = rng.standard_normal((6, 5))
        s = CalibrationStats(2.5 * np.eye(6), 10)
        aa = activation_aware_factorize(w, s, 3).dense()
        np.testing.assert_allclose(aa, plain_factorize(w, 3).dense(), atol=1e-8)

    def test_full_rank_is_exact(self, rng):
        w = rng.standard_normal((7, 4))
        fw = activation_aware_factorize(w, stats_for(anisotropic(rng, 50, 7)), 4)
        np.testing.assert_allclose(fw.dense(), w, atol=1e-8)

    def test_two_by_two_against_closed_form(self):
        w = np.array([[1.0, 2.0], [3.0, -1.0]])
        x = np.array([[3.0, 0.1], [0.2, 0.05], [-2.5, 0.3], [0.4, -0.2]])
        s = stats_for(x)
        fw = activation_aware_factorize(w, s, 1)
        # Independent whitened-SVD oracle in plain numpy.
        l = np.linalg.cholesky(regularized_gram(s))
        u, sig, vt = np.linalg.svd(l.T @ w)
        best = np.linalg.solve(l.T, sig[0] * np.outer(u[:, 0], vt[0]))
        np.testing.assert_allclose(fw.dense(), best, atol=1e-10)
        aa = weighted_error(w, fw, x)
        plain = weighted_error(w, plain_factorize(w, 1), x)
        assert aa < plain

    def test_balanced_split(self, rng):
        x = anisotropic(rng, 40, 6)
        w = rng.standard_normal((6, 5))
        fw = activation_aware_factorize(w, stats_for(x), 3)
        # rows of w_v are sigma_i^(1/2) times unit vectors
        l = np.linalg.cholesky(regularized_gram(stats_for(x)))
        sigma = np.linalg.svd(l.T @ w, compute_uv=False)[:3]
        np.testing.assert_allclose(np.linalg.norm(fw.w_v, axis=1) ** 2, sigma, rtol=1e-8)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            activation_aware_factorize(rng.standard_normal((4, 3)), CalibrationStats.empty(5), 1)

    @given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1), st.data())
    def test_weighted_error_beats_random_rank_n(self, d_in, d_out, seed, data):
        rng = np.random.default_rng(seed)
        n = data.draw(st.integers(1, min(d_in, d_out)))
        x = anisotropic(rng, 3 * d_in, d_in)
        s = stats_for(x)
        w = rng.standard_normal((d_in, d_out))
        l = np.linalg.cholesky(regularized_gram(s))
        ours = np.linalg.norm(l.T @ (w - activation_aware_factorize(w, s, n).dense()))
        for _ in range(50):
            p = rng.standard_normal((d_in, n)) @ rng.standard_normal((n, d_out))
            assert ours <= np.linalg.norm(l.T @ (w - p)) + 1e-9


class TestPlainFactorize:
    def test_identity_full(self):
        np.testing.assert_allclose(plain_factorize(np.eye(4), 4).dense(), np.eye(4), atol=1e-12)

    def test_rank_one(self, rng):
        w = np.outer(rng.standard_normal(5), rng.standard_normal(3))
        np.testing.assert_allclose(plain_factorize(w, 1).dense(), w, atol=1e-10)

    def test_tail_oracle(self, rng):
        w = rng.standard_normal((7, 6))
        tail = np.linalg.svd(w, compute_uv=False)[2:]
        err = np.linalg.norm(w - plain_factorize(w, 2).dense())
        assert err == pytest.approx(np.sqrt(np.sum(tail**2)), abs=1e-10)


class TestFactorizedWeight:
    def test_apply_and_transpose(self, rng):
        fw = FactorizedWeight(rng.standard_normal((5, 2)), rng.standard_normal((2, 4)))
        x, g = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
        np.testing.assert_allclose(fw.apply(x), x @ fw.dense(), atol=1e-12)
        np.testing.assert_allclose(fw.apply_transpose(g), g @ fw.dense().T, atol=1e-12)
        assert fw.n_params == 2 * (5 + 4)

    def test_factors_must_chain(self, rng):
        with pytest.raises(DimensionError):
            FactorizedWeight(rng.standard_normal((5, 2)), rng.standard_normal((3, 4)))


class TestRankForRatio:
    @pytest.mark.parametrize("ratio,expected", [(0.25, 8), (0.5, 16)])
    def test_square(self, ratio, expected):
        assert rank_for_ratio(64, 64, ratio) == expected

    def test_too_small(self):
        with pytest.raises(LinalgError):
            rank_for_ratio(4, 4, 0.1)

    def test_non_positive(self):
        with pytest.raises(LinalgError):
            rank_for_ratio(8, 8, 0.0)

    def test_ratio_one_is_full_rank(self):
        assert rank_for_ratio(32, 256, 1.0) == 32

    @given(st.integers(1, 300), st.integers(1, 300), st.floats(0.01, 0.99))
    def test_budget_respected(self, d_in, d_out, ratio):
        if ratio * d_in * d_out < d_in + d_out:
            return
        n = rank_for_ratio(d_in, d_out, ratio)
        assert 1 <= n <= min(d_in, d_out)
        assert n * (d_in + d_out) <= ratio * d_in * d_out + 1e-9


class TestBuildEmulator:
    def test_full_rank_reproduces_forward(self, rng):
        net = random_net(rng, (6, 5, 4))
        emu = build_emulator(net, rng.standard_normal((20, 6)), 1.0)
        x = rng.standard_normal((9, 6))
        np.testing.assert_allclose(forward(emu, x)[0], forward(net, x)[0], atol=1e-8)

    def test_parameter_budget(self, rng):
        net = random_net(rng, (64, 64, 64))
        emu = build_emulator(net, rng.standard_normal((64, 64)), 0.25)
        slack = sum(d_in + d_out for d_in, d_out in (l.shape for l in net.layers))
        assert emu.linear_params() <= 0.25 * net.linear_params() + slack
        assert all(layer.factorized for layer in emu.layers)

    def test_shapes_preserved(self, rng):
        net = random_net(rng, (8, 12, 3))
        emu = build_emulator(net, rng.standard_normal((16, 8)), 0.5)
        assert [l.shape for l in emu.layers] == [l.shape for l in net.layers]
        _, a = forward(net, rng.standard_normal((4, 8)), mode="capture")
        _, b = forward(emu, rng.standard_normal((4, 8)), mode="capture")
        assert [h.shape for h in a] == [h.shape for h in b]

    def test_original_untouched(self, rng):
        net = random_net(rng, (8, 6, 3))
        before = [l.weight.copy() for l in net.layers]
        build_emulator(net, rng.standard_normal((10, 8)), 0.6)
        assert all(np.array_equal(b, l.weight) for b, l in zip(before, net.layers))

    def test_layer_subset(self, rng):
        net = random_net(rng, (8, 8, 8))
        emu = build_emulator(net, rng.standard_normal((10, 8)), 0.25, layers=[1])
        assert not emu.layers[0].factorized and emu.layers[1].factorized

    def test_empty_calibration(self, rng):
        with pytest.raises(LinalgError):
            build_emulator(random_net(rng, (4, 4)), np.zeros((0, 4)), 0.5)

    def test_activation_aware_lowers_network_error(self, rng):
        net = random_net(rng, (16, 24, 8))
        x = anisotropic(rng, 200, 16)
        aware = build_emulator(net, x[:100], 0.3)
        plain = build_emulator(net, x[:100], 0.3, activation_aware=False)
        assert network_weighted_error(net, aware, x[100:]) < network_weighted_error(net, plain, x[100:])

    def test_network_error_zero_at_full_rank(self, rng):
        net = random_net(rng, (6, 5, 4))
        x = rng.standard_normal((30, 6))
        assert network_weighted_error(net, build_emulator(net, x, 1.0), x) < 1e-10
