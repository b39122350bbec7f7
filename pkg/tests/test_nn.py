import math

import numpy as np
import pytest

from cavsentry import nn
from cavsentry.nn import AdamState, BNParams, ConvParams
from gradcheck import numeric_grad, rel_error


def direct_conv(x, w, b):
    """Textbook summation with explicit zero padding (extra zero on the left for even K)."""
    B, C, T = x.shape
    O, _, K = w.shape
    left = math.ceil((K - 1) / 2)
    y = np.zeros((B, O, T))
    for bi in range(B):
        for o in range(O):
            for t in range(T):
                acc = b[o]
                for c in range(C):
                    for k in range(K):
                        src = t + k - left
                        if 0 <= src < T:
                            acc += w[o, c, k] * x[bi, c, src]
                y[bi, o, t] = acc
    return y


class TestConv:
    def test_identity_kernel(self):
        y = nn.conv1d_same(np.array([[[1.0, 2, 3]]]), ConvParams(np.ones((1, 1, 1)), np.zeros(1)))
        assert y.ravel().tolist() == [1, 2, 3]

    def test_difference_kernel(self):
        # y[t] = x[t-1] - x[t+1] with zero padding
        y = nn.conv1d_same(np.array([[[1.0, 2, 3]]]), ConvParams(np.array([[[1.0, 0, -1]]]), np.zeros(1)))
        assert y.ravel().tolist() == [-2, -2, 2]

    def test_even_kernel_keeps_length(self):
        y = nn.conv1d_same(np.array([[[1.0, 2, 3]]]), ConvParams(np.ones((1, 1, 2)), np.zeros(1)))
        # left zero: [0+1, 1+2, 2+3]
        assert y.ravel().tolist() == [1, 3, 5]

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_direct_sum(self, seed):
        rng = np.random.default_rng(seed)
        B, C, O, T = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 9)
        K = int(rng.integers(1, T + 1))
        x = rng.normal(size=(B, C, T))
        p = ConvParams(rng.normal(size=(O, C, K)), rng.normal(size=O))
        np.testing.assert_allclose(nn.conv1d_same(x, p), direct_conv(x, p.w, p.b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.conv1d_same(np.zeros((1, 2, 5)), ConvParams(np.zeros((1, 3, 2)), np.zeros(1)))

    def test_length_preserved_for_all_k(self):
        x = np.random.default_rng(0).normal(size=(2, 2, 9))
        for k in range(1, 10):
            assert nn.conv1d_same(x, ConvParams(np.ones((3, 2, k)), np.zeros(3))).shape == (2, 3, 9)

    @pytest.mark.parametrize("seed", range(8))
    def test_backward_fd(self, seed):
        rng = np.random.default_rng(100 + seed)
        B, C, O, T = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 8)
        K = int(rng.integers(1, 6))
        x = rng.normal(size=(B, C, T))
        p = ConvParams(rng.normal(size=(O, C, K)), rng.normal(size=O))
        r = rng.normal(size=(B, O, T))
        f = lambda: float((nn.conv1d_same(x, p) * r).sum())
        gx, gp = nn.conv1d_same_backward(x, p, r)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gp.w, numeric_grad(f, p.w)) < 1e-4
        assert rel_error(gp.b, numeric_grad(f, p.b)) < 1e-4

    def test_zero_grad(self):
        x = np.ones((1, 2, 4))
        p = ConvParams(np.ones((3, 2, 3)), np.ones(3))
        gx, gp = nn.conv1d_same_backward(x, p, np.zeros((1, 3, 4)))
        assert not gx.any() and not gp.w.any() and not gp.b.any()

    def test_identity_backward(self):
        g = np.random.default_rng(1).normal(size=(2, 1, 5))
        gx, _ = nn.conv1d_same_backward(np.zeros((2, 1, 5)), ConvParams(np.ones((1, 1, 1)), np.zeros(1)), g)
        np.testing.assert_array_equal(gx, g)


class TestBatchNorm:
    def test_two_point(self):
        y, _ = nn.batchnorm_fwd(np.array([[[1.0, 3.0]]]), BNParams.fresh(1), training=True)
        np.testing.assert_allclose(y.ravel(), [-1, 1] / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_gamma_zero(self):
        p = BNParams.fresh(2)
        p.gamma[:] = 0
        p.beta[:] = [0.5, -2]
        y, _ = nn.batchnorm_fwd(np.random.default_rng(0).normal(size=(3, 2, 4)), p, True)
        np.testing.assert_array_equal(y[:, 0], 0.5)
        np.testing.assert_array_equal(y[:, 1], -2)

    def test_training_stats(self):
        x = np.random.default_rng(2).normal(3, 5, size=(4, 3, 6))
        y, _ = nn.batchnorm_fwd(x, BNParams.fresh(3), True)
        assert np.abs(y.mean(axis=(0, 2))).max() < 1e-9
        var = y.var(axis=(0, 2))
        target = x.var(axis=(0, 2)) / (x.var(axis=(0, 2)) + 1e-5)
        np.testing.assert_allclose(var, target, atol=1e-6)

    def test_running_stats_update(self):
        p = BNParams.fresh(1, momentum=0.5)
        nn.batchnorm_fwd(np.array([[[1.0, 3.0]]]), p, True)
        assert p.running_mean[0] == pytest.approx(1.0)
        assert p.running_var[0] == pytest.approx(0.5 * 1 + 0.5 * 2.0)

    def test_inference_uses_running(self):
        p = BNParams(np.ones(1), np.zeros(1), np.array([2.0]), np.array([4.0]), eps=0.0)
        y, _ = nn.batchnorm_fwd(np.array([[[2.0, 6.0]]]), p, False)
        assert y.ravel().tolist() == [0.0, 2.0]

    def test_needs_two_values(self):
        with pytest.raises(nn.ShapeError):
            nn.batchnorm_fwd(np.zeros((1, 1, 1)), BNParams.fresh(1), True)

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("seed", range(5))
    def test_backward_fd(self, seed, training):
        rng = np.random.default_rng(seed)
        B, C, T = rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 7)
        x = rng.normal(size=(B, C, T))
        p = BNParams(rng.normal(size=C), rng.normal(size=C), rng.normal(size=C), rng.uniform(0.5, 2, C))
        r = rng.normal(size=(B, C, T))

        def f():
            q = BNParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
            return float((nn.batchnorm_fwd(x, q, training)[0] * r).sum())

        q = BNParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
        _, cache = nn.batchnorm_fwd(x, q, training)
        gx, gg, gb = nn.batchnorm_bwd(cache, r)
        assert rel_error(gx, numeric_grad(f, x)) < 1e-4
        assert rel_error(gg, numeric_grad(f, p.gamma)) < 1e-4
        assert rel_error(gb, numeric_grad(f, p.beta)) < 1e-4
        np.testing.assert_allclose(gb, r.sum(axis=(0, 2)))
        if training:
            assert np.abs(gx.sum(axis=(0, 2))).max() < 1e-9


class TestSmallOps:
    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert nn.relu(x).tolist() == [0, 0, 2]
        assert nn.relu_bwd(x, np.array([5.0, 5.0, 5.0])).tolist() == [0, 0, 5]

    def test_relu_fd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5))
        x[np.abs(x) < 1e-3] = 0.5
        r = rng.normal(size=x.shape)
        g = numeric_grad(lambda: float((nn.relu(x) * r).sum()), x)
        assert np.abs(nn.relu_bwd(x, r) - g).max() < 1e-6

    def test_concat(self):
        a, b = np.zeros((1, 2, 3)), np.ones((1, 3, 3))
        out = nn.concat_channels([a, b])
        assert out.shape == (1, 5, 3)
        np.testing.assert_array_equal(nn.concat_channels([a]), a)
        ga, gb = nn.concat_bwd(np.arange(15.0).reshape(1, 5, 3), [2, 3])
        assert ga.shape == (1, 2, 3) and gb.shape == (1, 3, 3)
        assert gb[0, 0, 0] == 6

    def test_concat_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.concat_channels([np.zeros((1, 2, 3)), np.zeros((1, 2, 4))])

    def test_gap(self):
        assert nn.global_avg_pool(np.array([[[1.0, 2, 3]]])).tolist() == [[2.0]]
        np.testing.assert_allclose(nn.global_avg_pool_bwd(np.array([[3.0]]), 3), [[[1, 1, 1]]])
        x = np.array([[[7.0]]])
        assert nn.global_avg_pool(x).tolist() == [[7.0]]

    def test_linear(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(nn.linear(x, np.eye(4), np.zeros(4)), x)

    def test_linear_fd(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
        r = rng.normal(size=(3, 2))
        f = lambda: float((nn.linear(x, w, b) * r).sum())
        gx, gw, gb = nn.linear_bwd(x, w, r)
        assert np.abs(gx - numeric_grad(f, x)).max() < 1e-6
        assert np.abs(gw - numeric_grad(f, w)).max() < 1e-6
        assert np.abs(gb - numeric_grad(f, b)).max() < 1e-6
        np.testing.assert_allclose(gw, sum(np.outer(r[i], x[i]) for i in range(3)))


class TestXent:
    def test_uniform(self):
        loss, g = nn.softmax_xent(np.zeros((1, 2)), [0])
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(g, [[-0.5, 0.5]])
        _, g2 = nn.softmax_xent(np.zeros((2, 2)), [0, 0])
        np.testing.assert_allclose(g2, [[-0.25, 0.25]] * 2)

    def test_stable(self):
        loss, g = nn.softmax_xent(np.array([[1000.0, 0.0]]), [0])
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(g))

    def test_fd_and_row_sums(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(4, 2)) * 3
        y = rng.integers(0, 2, 4)
        loss, g = nn.softmax_xent(z, y)
        assert loss >= 0
        assert np.abs(g - numeric_grad(lambda: nn.softmax_xent(z, y)[0], z)).max() < 1e-6
        np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)

    def test_weighted_fd(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(5, 2))
        y = np.array([0, 1, 1, 0, 0])
        w = (1.0, 4.0)
        _, g = nn.softmax_xent(z, y, w)
        assert np.abs(g - numeric_grad(lambda: nn.softmax_xent(z, y, w)[0], z)).max() < 1e-6

    def test_bad_label(self):
        with pytest.raises(ValueError):
            nn.softmax_xent(np.zeros((1, 2)), [2])


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([0.3, -7.0])}
        st = AdamState(lr=0.01)
        nn.adam_step(params, grads, st)
        # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
        expect = np.array([1.0, -2.0]) - 0.01 * np.array([0.3 / (0.3 + 1e-8), -7.0 / (7.0 + 1e-8)])
        np.testing.assert_allclose(params["w"], expect, rtol=0, atol=1e-15)
        assert st.step == 1

    def test_zero_grad(self):
        params = {"w": np.array([1.0, 2.0])}
        nn.adam_step(params, {"w": np.zeros(2)}, AdamState())
        assert params["w"].tolist() == [1.0, 2.0]

    def test_v_nonnegative(self):
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=5)}
        st = AdamState()
        for _ in range(50):
            nn.adam_step(params, {"w": rng.normal(size=5) * 10}, st)
            assert np.all(st.v["w"] >= 0)
