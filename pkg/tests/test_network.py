"""Forward/backward kernels and the Network runner."""
import numpy as np
import pytest

from prunedistill.errors import EngineError
from prunedistill.layers import BatchNorm, Conv2d, MaxPool
from prunedistill.network import (
    Network,
    batchnorm_forward,
    conv_forward,
    forward,
    init_params,
    maxpool_backward,
    maxpool_forward,
    predict_logits,
)
from prunedistill.tensor import precision


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out + b[None, :, None, None]


class TestKernels:
    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_conv_matches_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out, _ = conv_forward(x, w, b, Conv2d(3, 4, 3, 3, stride=stride, pad=pad))
        np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), rtol=1e-10, atol=1e-12)

    def test_bn_train_mode_normalizes(self, rng):
        x = rng.normal(3.0, 2.0, size=(8, 4, 5, 5))
        ones, zeros = np.ones(4), np.zeros(4)
        out, _, updates = batchnorm_forward(x, ones, zeros, zeros, ones, BatchNorm(4), "train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
        # momentum 0.1 towards the batch mean
        np.testing.assert_allclose(updates[0], 0.1 * x.mean(axis=(0, 2, 3)))

    def test_bn_eval_mode_uses_running_stats(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        mean, var = np.full(3, 0.5), np.full(3, 4.0)
        out, _, updates = batchnorm_forward(x, np.ones(3), np.zeros(3), mean, var, BatchNorm(3), "eval")
        assert updates is None
        np.testing.assert_allclose(out, (x - 0.5) / np.sqrt(4.0 + 1e-5))

    def test_maxpool_tie_routes_to_first(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = maxpool_forward(x, MaxPool(2, 2))
        assert out.shape == (1, 1, 1, 1)
        dx = maxpool_backward(np.ones((1, 1, 1, 1)), cache, MaxPool(2, 2))
        np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestNetwork:
    def test_init_params(self, tiny_arch):
        params = init_params(tiny_arch, seed=0)
        assert params["0.weight"].dtype == np.float32
        np.testing.assert_array_equal(params["1.gamma"], 1.0)
        np.testing.assert_array_equal(params["1.running_mean"], 0.0)
        with precision("f64"):
            assert init_params(tiny_arch, seed=0)["0.weight"].dtype == np.float64

    def test_init_is_seeded(self, tiny_arch):
        a, b = init_params(tiny_arch, 3), init_params(tiny_arch, 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["0.weight"], init_params(tiny_arch, 4)["0.weight"])

    def test_forward_shape(self, tiny_arch, rng):
        out = Network(tiny_arch).forward(init_params(tiny_arch, 0), rng.standard_normal((5, 3, 8, 8)))
        assert out.shape == (5, 3)

    def test_wrong_input_shape(self, tiny_arch):
        with pytest.raises(EngineError):
            Network(tiny_arch).forward(init_params(tiny_arch, 0), np.zeros((2, 3, 9, 9)))

    def test_unknown_mode(self, tiny_arch):
        with pytest.raises(EngineError):
            Network(tiny_arch).forward(init_params(tiny_arch, 0), np.zeros((2, 3, 8, 8)), "inference")

    def test_backward_needs_forward(self, tiny_arch):
        with pytest.raises(EngineError):
            Network(tiny_arch).backward(init_params(tiny_arch, 0), np.zeros((2, 3)))

    def test_gradients_cover_trainable_tensors(self, tiny_arch, rng):
        params = init_params(tiny_arch, 0)
        net = Network(tiny_arch)
        out = net.forward(params, rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
        grads = net.backward(params, np.ones_like(out))
        assert set(grads) == {n for n in params if not n.endswith(("running_mean", "running_var"))}
        assert all(grads[n].shape == params[n].shape for n in grads)

    def test_running_stats_only_change_on_commit(self, tiny_arch, rng):
        params = init_params(tiny_arch, 0)
        net = Network(tiny_arch)
        net.forward(params, rng.standard_normal((4, 3, 8, 8)), "train")
        np.testing.assert_array_equal(params["1.running_mean"], 0.0)
        net.commit_running_stats(params)
        assert np.abs(params["1.running_mean"]).sum() > 0

    def test_predict_logits_batches_agree(self, tiny_arch, rng):
        params = init_params(tiny_arch, 0)
        images = rng.standard_normal((10, 3, 8, 8)).astype(np.float32)
        whole = forward(tiny_arch, params, images)
        np.testing.assert_allclose(predict_logits(tiny_arch, params, images, batch_size=3), whole, rtol=1e-5, atol=1e-6)

    def test_predict_logits_empty(self, tiny_arch):
        out = predict_logits(tiny_arch, init_params(tiny_arch, 0), np.zeros((0, 3, 8, 8)))
        assert out.shape == (0, 3)
