import numpy as np
import pytest

from nvsqa import autodiff as ad
from nvsqa import nn, viewwise
from nvsqa.autodiff import Tensor
from nvsqa.viewwise import ViewwiseNet, fit_aggd, fit_ggd, mscn, nss_features


class TestMscn:
    def test_constant_image_is_all_zero(self):
        img = np.full((32, 32), 0.4)
        assert np.abs(mscn(img)).max() < 1e-9

    def test_additive_shift_invariance(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32)) * 0.8
        base = nss_features(img)
        for shift in (0.05, 0.1):
            shifted = nss_features(img + shift)
            # bound from the stabilizing constant: < 1e-3 per unit shift
            assert np.abs(shifted - base).max() < 1e-3 * shift


class TestGgdFit:
    def test_gaussian_samples_recover_shape_two(self):
        rng = np.random.default_rng(1)
        shape, var = fit_ggd(rng.normal(0, 1.0, size=100_000))
        assert 1.9 < shape < 2.1
        assert var == pytest.approx(1.0, rel=0.05)

    def test_laplacian_samples_recover_shape_one(self):
        rng = np.random.default_rng(2)
        shape, _ = fit_ggd(rng.laplace(0, 1.0, size=100_000))
        assert 0.9 < shape < 1.1

    def test_degenerate_returns_convention(self):
        assert fit_ggd(np.zeros(100)) == (2.0, 0.0)

    def test_aggd_symmetric_input_has_zero_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1.0, size=200_000)
        shape, mean, var_l, var_r = fit_aggd(x)
        assert abs(mean) < 0.02
        assert var_l == pytest.approx(var_r, rel=0.05)
        assert 1.8 < shape < 2.2

    def test_aggd_skewed_input_signs(self):
        rng = np.random.default_rng(4)
        x = np.concatenate([rng.normal(0, 2.0, 50_000), -np.abs(rng.normal(0, 0.5, 50_000))])
        x = np.where(rng.random(100_000) < 0.5, np.abs(x), -np.abs(x) * 0.25)
        shape, mean, var_l, var_r = fit_aggd(x)
        assert var_r > var_l
        assert mean > 0

    def test_aggd_degenerate_convention(self):
        assert fit_aggd(np.zeros(64)) == (2.0, 0.0, 0.0, 0.0)
        assert fit_aggd(np.ones(64)) == (2.0, 0.0, 0.0, 0.0)


class TestNssFeatures:
    def test_constant_image_features(self):
        feats = nss_features(np.full((32, 32, 3), 0.7, dtype=np.float32))
        assert feats.shape == (36,)
        # GGD slots carry the degenerate convention
        assert feats[0] == 2.0 and feats[1] == 0.0
        assert feats[18] == 2.0 and feats[19] == 0.0

    def test_white_noise_ggd_shape_near_two(self):
        # unit-variance white-noise images are Gaussian samples; the
        # moment-matching fit must recover a shape near 2
        for seed in range(5):
            rng = np.random.default_rng(seed)
            img = rng.normal(0.0, 1.0, size=(64, 64))
            shape, var = fit_ggd(img)
            assert 1.8 <= shape <= 2.2
            assert var == pytest.approx(1.0, rel=0.1)

    def test_finite_and_length_36_on_random_images(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            feats = nss_features(rng.random((24, 31, 3)))
            assert feats.shape == (36,)
            assert np.all(np.isfinite(feats))

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            nss_features(np.zeros((8, 8, 3)))


def tiny_net(seed=0, in_features=6):
    rng = np.random.default_rng(seed)
    return ViewwiseNet(rng, in_features=in_features, channels=(8, 12, 12), embed=4,
                       expansion=2, se_reduction=2)


class TestViewwiseNet:
    def test_single_view_sequence_is_valid(self):
        net = tiny_net()
        out = net(Tensor(np.random.default_rng(1).normal(size=(6, 1)).astype(np.float32)))
        assert out.data.shape == (4,)
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("length", [1, 7, 300])
    def test_output_dim_constant_across_lengths(self, length):
        net = tiny_net()
        rng = np.random.default_rng(length)
        out = net(Tensor(rng.normal(size=(6, length)).astype(np.float32)))
        assert out.data.shape == (4,)

    def test_default_config_shapes(self):
        rng = np.random.default_rng(2)
        net = ViewwiseNet(rng)
        out = net(Tensor(rng.normal(size=(36, 5)).astype(np.float32) * 0.5))
        assert out.data.shape == (64,)

    def test_gradient_check_through_full_stack(self):
        net = tiny_net(seed=3)
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(6, 5)).astype(np.float32)

        def f(x):
            return ad.mean(net(x) * net(x))

        assert ad.grad_check(f, Tensor(x0)) < 1e-3

    def test_parameter_gradients_flow(self):
        net = tiny_net(seed=5)
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
        loss = ad.mean(net(x) * net(x))
        loss.backward()
        grads = [p.grad for p in net.parameters()]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)

    def test_rejects_wrong_feature_count(self):
        net = tiny_net()
        with pytest.raises(ValueError):
            net(Tensor(np.zeros((7, 4), dtype=np.float32)))


class TestSqueezeExcite:
    def test_zero_logits_give_identity(self):
        rng = np.random.default_rng(7)
        se = nn.SqueezeExcite(8, reduction=2, rng=rng)
        # gate layer is zero-initialized: logits 0, scale 2 * 0.5 = 1
        x = Tensor(rng.normal(size=(8, 5)).astype(np.float32))
        out = se(x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_gates_lie_in_unit_interval(self):
        rng = np.random.default_rng(8)
        se = nn.SqueezeExcite(8, reduction=2, rng=rng)
        se.gate.weight = nn.Tensor(
            rng.normal(size=se.gate.weight.shape).astype(np.float32), requires_grad=True
        )
        x = Tensor(rng.normal(size=(8, 5)).astype(np.float32))
        gates = se.gates(x).data
        assert np.all(gates > 0) and np.all(gates < 1)
