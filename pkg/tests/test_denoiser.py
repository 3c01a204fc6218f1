import numpy as np
import pytest

from layerdiff import tensor as T
from layerdiff.config import tiny_config
from layerdiff.denoiser import (Denoiser, LatentCodec, MildModel, OffsetEncoder, boundary_smoothing, box_blur,
                                decode_latent, encode_latent, layer_exchange, morph_band)
from layerdiff.rng import DRng
from conftest import perturb


class TestCodec:
    def test_roundtrip(self, rng):
        x = rng.normal((3, 8, 8))
        assert np.array_equal(decode_latent(encode_latent(x)), x)

    def test_constant(self):
        z = encode_latent(np.full((3, 4, 4), 0.3))
        assert z.shape == (12, 2, 2) and np.all(z == 0.3)

    def test_checkerboard(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[None]
        z = encode_latent(x)
        assert z.shape == (4, 1, 1)
        assert z[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_identity_mode(self, rng):
        x = rng.normal((3, 4, 4))
        assert np.array_equal(LatentCodec(2, "identity").encode(x), x)

    def test_non_divisible(self, rng):
        with pytest.raises(ValueError):
            encode_latent(rng.normal((3, 5, 5)))


class TestOffsets:
    def test_zero_init_leaves_latent(self, tiny_model, rng):
        den = tiny_model.denoiser
        z = rng.normal(den.latent_shape)
        assert np.array_equal(den.inject_spatial_offsets(z, np.ones((8, 8))).data, z)

    def test_zero_mask_bias_free(self, rng):
        enc = OffsetEncoder(4, rng)
        enc.conv.weight.data[:] = rng.normal(enc.conv.weight.shape)
        assert not np.any(enc(np.zeros((4, 4))).data)

    def test_gradient_oracle(self, rng):
        enc = OffsetEncoder(3, rng)
        enc.conv.weight.data[:] = rng.spawn("w").normal(enc.conv.weight.shape)
        m = (rng.uniform((4, 4)) < 0.5).astype(float)
        w = rng.spawn("o").normal((1, 3, 4, 4))
        f = lambda: T.tsum(enc(m) * w)
        [g] = T.grad(f(), [enc.conv.weight])
        with T.no_grad():
            [n] = T.finite_diff_grad(lambda: f().item(), [enc.conv.weight])
        assert T.relative_error(g, n, 1e-6) < 1e-7


class TestBoundarySmoothing:
    def test_disabled_identity(self, rng):
        f = rng.normal((2, 5, 5))
        assert np.array_equal(boundary_smoothing(f, np.ones((5, 5)), enabled=False).data, f)

    def test_constant_unchanged(self):
        m = np.zeros((6, 6))
        m[2:4, 2:4] = 1
        out = boundary_smoothing(np.full((3, 6, 6), 1.7), m).data
        assert np.allclose(out, 1.7, atol=1e-15)

    def test_spike_spread(self):
        m = np.zeros((5, 5))
        m[2, 2] = 1
        f = np.zeros((1, 5, 5))
        f[0, 2, 2] = 9.0
        out = boundary_smoothing(f, m).data[0]
        # whole 3x3 neighbourhood lies in the band; each interior cell averages 9 cells
        assert np.allclose(out[1:4, 1:4], 1.0, atol=1e-15)
        assert out[0, 0] == 0.0

    def test_band(self):
        m = np.zeros((5, 5))
        m[1:4, 1:4] = 1
        band = morph_band(m, 1)
        assert band[2, 2] == 0 and band[0, 0] == 1 and band.sum() == 24

    def test_full_mask_empty_band(self):
        assert not np.any(morph_band(np.ones((4, 4)), 1))

    def test_box_blur_border_normalised(self):
        assert np.allclose(box_blur(np.ones((1, 1, 3, 3))).data, 1.0, atol=1e-15)


class TestLayerExchange:
    def test_gamma_zero(self, rng):
        a, b = rng.normal((2, 2)), rng.spawn(1).normal((2, 2))
        x, y = layer_exchange(a, b, 0.0)
        assert np.array_equal(x.data, a) and np.array_equal(y.data, b)

    def test_gamma_half(self, rng):
        a, b = rng.normal((3,)), rng.spawn(1).normal((3,))
        x, y = layer_exchange(a, b, 0.5)
        assert np.allclose(x.data, (a + b) / 2) and np.allclose(y.data, (a + b) / 2)

    def test_hand_case(self):
        x, y = layer_exchange(np.array([1.0, 2.0]), np.array([3.0, -4.0]), 0.1)
        assert np.allclose(x.data, [1.2, 1.4], atol=1e-15)
        assert np.allclose(y.data, [2.8, -3.4], atol=1e-15)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            layer_exchange(np.ones(2), np.ones(3))


class TestPredictNoise:
    def inputs(self, model, rng):
        den = model.denoiser
        z = rng.normal(den.latent_shape)
        cond = rng.spawn("c").normal((7, model.cfg.d_cond))
        mask = (rng.spawn("m").uniform((8, 8)) < 0.5).astype(float)
        return z, cond, mask

    def test_fresh_branches_identical(self, tiny_model, rng):
        z, c, m = self.inputs(tiny_model, rng)
        den = tiny_model.denoiser
        assert np.array_equal(den.predict_noise(z, 10, c, "fg", m).data, den.predict_noise(z, 10, c, "bg", m).data)

    def test_extents(self, tiny_model, rng):
        z, c, m = self.inputs(tiny_model, rng)
        out = tiny_model.denoiser.predict_noise(z, 3, c, "fg", m)
        assert out.shape == z.shape
        batch = tiny_model.denoiser.predict_noise(np.stack([z, z]), np.array([3, 4]), np.stack([c, c]), "bg",
                                                  np.stack([m, m]))
        assert batch.shape == (2,) + z.shape

    def test_batched_matches_single(self, tiny_model, rng):
        perturb(tiny_model, rng)
        den = tiny_model.denoiser
        z, c, m = self.inputs(tiny_model, rng)
        z2, c2, m2 = self.inputs(tiny_model, rng.spawn(2))
        batch = den.predict_noise(np.stack([z, z2]), np.array([5, 600]), np.stack([c, c2]), "fg",
                                  np.stack([m, m2])).data
        assert np.allclose(batch[1], den.predict_noise(z2, 600, c2, "fg", m2).data, atol=1e-12)

    def test_deterministic(self, tiny_model, rng):
        z, c, m = self.inputs(perturb(tiny_model, rng), rng)
        den = tiny_model.denoiser
        assert np.array_equal(den.predict_noise(z, 1, c, "fg", m).data, den.predict_noise(z, 1, c, "fg", m).data)

    def test_branches_differ_after_training_like_change(self, tiny_model, rng):
        perturb(tiny_model, rng)
        z, c, m = self.inputs(tiny_model, rng)
        den = tiny_model.denoiser
        assert not np.array_equal(den.predict_noise(z, 1, c, "fg", m).data, den.predict_noise(z, 1, c, "bg", m).data)

    def test_unknown_branch(self, tiny_model, rng):
        z, c, m = self.inputs(tiny_model, rng)
        with pytest.raises(ValueError):
            tiny_model.denoiser.predict_noise(z, 1, c, "mid", m)

    def test_extent_mismatch(self, tiny_model, rng):
        _, c, m = self.inputs(tiny_model, rng)
        with pytest.raises(ValueError):
            tiny_model.denoiser.predict_noise(np.zeros((12, 2, 2)), 1, c, "fg", m)

    def test_lora_equals_base_at_init(self, rng):
        cfg, base_cfg = tiny_config(8), tiny_config(8)
        base_cfg.model.use_lora = False
        den, den0 = MildModel(cfg.model).denoiser, MildModel(base_cfg.model).denoiser
        z, c = rng.normal(den.latent_shape), rng.spawn(1).normal((4, cfg.model.d_cond))
        m = np.zeros((8, 8))
        m[:4] = 1
        for branch in ("fg", "bg"):
            assert np.array_equal(den.predict_noise(z, 77, c, branch, m).data,
                                  den0.predict_noise(z, 77, c, branch, m).data)

    def test_full_gradient_oracle(self):
        from layerdiff.selfcheck import gradient_oracle
        res = gradient_oracle(n_params=21, seed=3)
        assert res["max_rel_err"] < 1e-5
        assert len(res["categories"]) == 7

    def test_exchange_and_smoothing_paths(self, rng):
        cfg = tiny_config(8)
        cfg.model.layer_exchange = True
        cfg.model.boundary_smoothing = True
        model = perturb(MildModel(cfg.model), rng)
        den = model.denoiser
        zf, zb = rng.normal((2,) + den.latent_shape), rng.spawn(1).normal((1,) + den.latent_shape)
        cf, cb = rng.spawn(2).normal((2, 5, 8)), rng.spawn(3).normal((1, 5, 8))
        mf = (rng.spawn(4).uniform((2, 8, 8)) < 0.5).astype(float)
        mb = mf.max(axis=0)[None]
        params = [den.attn.bias.alpha_st, den.conv_in.weight]
        f = lambda: T.sum_squares(T.concat(list(den.predict_noise_exchange(zf, zb, 5, 5, cf, cb, mf, mb)), axis=0))
        g = T.grad(f(), params)
        with T.no_grad():
            n = T.finite_diff_grad(lambda: f().item(), params, indices=[[0, 1, 2, 3], [0, 5, 17]])
        for ga, gn, idx in zip(g, n, [[0, 1, 2, 3], [0, 5, 17]]):
            assert T.relative_error(ga.reshape(-1)[idx], gn.reshape(-1)[idx], 1e-6) < 1e-5
