"""
Tests for the convolutional VAE: shapes, loss terms, reparameterization,
gradients through the whole network and a short training run.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from avae.affine_vae import train_vanilla
from avae.data import MnistSet
from avae.exceptions import ConfigError, DomainError, ShapeError
from avae.functional import sigmoid
from avae.gradcheck import gradcheck
from avae.optim import OptimizerState
from avae.tensor import Tensor
from avae.vae import (
    LatentStats,
    LossReport,
    VaeConfig,
    VaeModel,
    decode,
    draw_latent_noise,
    elbo_loss,
    encode,
    reparameterize,
    vae_forward,
)

from .conftest import as_tensor, make_images


class TestConfig:

    def test_defaults(self):
        cfg = VaeConfig()
        assert cfg.latent_size == 8
        assert cfg.encoder_channels == (32, 32, 64, 16)

    def test_round_trip(self):
        cfg = VaeConfig(latent_size=3, normalize_input=True, input_mean=0.1, input_std=0.3)
        assert VaeConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("overrides,field", [
        ({"latent_size": 0}, "latent_size"),
        ({"input_hw": 28}, "input_hw"),
        ({"batchnorm_layers": 4}, "batchnorm_layers"),
        ({"bn_eps": 0.0}, "bn_eps"),
    ])
    def test_invalid(self, overrides, field):
        with pytest.raises(ConfigError) as excinfo:
            VaeConfig(**overrides)
        assert field in excinfo.value.errors

    def test_last_decoder_layer_is_one_channel(self):
        with pytest.raises(ConfigError):
            VaeConfig(decoder_channels=(32, 16, 16, 2))


class TestShapes:

    def test_encode_decode(self, small_model, images):
        small_model.eval()
        stats = encode(small_model, as_tensor(images))
        assert stats.mu.shape == (4, 2)
        assert stats.logvar.shape == (4, 2)
        out = decode(small_model, stats.mu)
        assert out.shape == (4, 1, 40, 40)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_wrong_input_size(self, small_model):
        with pytest.raises(ShapeError) as excinfo:
            encode(small_model, as_tensor(np.zeros((2, 1, 28, 28))))
        assert excinfo.value.op == "encode"

    def test_wrong_latent_size(self, small_model):
        with pytest.raises(ShapeError):
            decode(small_model, as_tensor(np.zeros((2, 3))))

    def test_eval_mode_is_deterministic(self, small_model, images):
        small_model.eval()
        eps = np.zeros((4, 2))
        a = vae_forward(small_model, as_tensor(images), eps=eps)[0].data
        b = vae_forward(small_model, as_tensor(images), eps=eps)[0].data
        assert_array_equal(a, b)

    def test_eval_mode_is_per_sample(self, small_model, images):
        small_model.eval()
        eps = np.random.default_rng(0).standard_normal((4, 2))
        _, full = vae_forward(small_model, as_tensor(images), eps=eps)
        _, half = vae_forward(small_model, as_tensor(images[:2]), eps=eps[:2])
        assert_allclose(full.sample_total.data[:2], half.sample_total.data, rtol=1e-10)


class TestLoss:

    def test_reconstruction_of_half_probability(self):
        x = np.zeros((1, 1, 40, 40))
        x[0, 0, ::2] = 1.0
        stats = LatentStats(as_tensor(np.zeros((1, 2))), as_tensor(np.zeros((1, 2))))
        loss = elbo_loss(x, as_tensor(np.full((1, 1, 40, 40), 0.5)), stats)
        assert_allclose(loss.recon.item(), 1600 * math.log(2.0))
        assert loss.kl.item() == 0.0

    @pytest.mark.parametrize("mu,logvar,expected", [
        ([0.0, 0.0], [0.0, 0.0], 0.0),
        ([1.0, 0.0], [0.0, 0.0], 0.5),
        ([1.0, 1.0], [0.0, 0.0], 1.0),
        ([0.0], [math.log(2.0)], 0.5 * (2.0 - 1.0 - math.log(2.0))),
    ])
    def test_kl(self, mu, logvar, expected):
        stats = LatentStats(as_tensor([mu]), as_tensor([logvar]))
        loss = elbo_loss(np.zeros((1, 1, 2, 2)), as_tensor(np.full((1, 1, 2, 2), 0.5)), stats)
        assert_allclose(loss.kl.item(), expected, atol=1e-15)

    def test_kl_is_non_negative(self):
        gen = np.random.default_rng(5)
        mu = gen.normal(scale=3.0, size=(500, 8))
        logvar = gen.uniform(-10.0, 5.0, size=(500, 8))
        stats = LatentStats(as_tensor(mu), as_tensor(logvar))
        loss = elbo_loss(np.zeros((500, 1, 2, 2)), as_tensor(np.full((500, 1, 2, 2), 0.5)), stats)
        assert loss.sample_kl.data.min() >= -1e-6

    def test_total_ignores_batch_order(self, small_model, images):
        model = small_model.eval()
        eps = np.random.default_rng(3).standard_normal((4, 2))
        order = np.array([2, 0, 3, 1])
        _, loss = vae_forward(model, as_tensor(images), eps=eps)
        _, shuffled = vae_forward(model, as_tensor(images[order]), eps=eps[order])
        assert_allclose(shuffled.total.item(), loss.total.item(), rtol=1e-12)
        assert_allclose(shuffled.sample_total.data, loss.sample_total.data[order], rtol=1e-10)

    def test_recon_falls_as_predictor_sharpens(self):
        x = np.zeros((1, 1, 40, 40))
        x[0, 0, 10:30, 18:22] = 1.0
        stats = LatentStats(as_tensor(np.zeros((1, 2))), as_tensor(np.zeros((1, 2))))
        recon = []
        for scale in (0.5, 1.0, 2.0, 4.0, 8.0, 12.0):
            p = sigmoid(as_tensor(scale * (2.0 * x - 1.0)))
            recon.append(elbo_loss(x, p, stats).recon.item())
        assert np.all(np.diff(recon) < 0.0)
        assert recon[-1] < 0.02

    def test_total_is_sum(self, small_model, images):
        _, loss = vae_forward(small_model, as_tensor(images), eps=np.zeros((4, 2)))
        assert_allclose(loss.total.item(), loss.recon.item() + loss.kl.item())
        assert_allclose(loss.sample_total.data, loss.sample_recon.data + loss.sample_kl.data)
        assert_allclose(loss.total.item(), loss.sample_total.data.mean())

    def test_pixels_out_of_range(self):
        stats = LatentStats(as_tensor([[0.0]]), as_tensor([[0.0]]))
        with pytest.raises(DomainError):
            elbo_loss(np.full((1, 1, 2, 2), 1.5), as_tensor(np.full((1, 1, 2, 2), 0.5)), stats)

    def test_report_from_samples(self):
        report = LossReport.from_samples(np.array([1.0, 3.0]), np.array([0.5, 0.5]))
        assert report.as_floats() == {"total": 2.5, "recon": 2.0, "kl": 0.5}
        assert_array_equal(report.sample_total.data, [1.5, 3.5])


class TestReparameterize:

    def test_tiny_variance_returns_mean(self):
        stats = LatentStats(as_tensor([[0.3, -1.2]]), as_tensor([[-50.0, -50.0]]))
        z = reparameterize(stats, np.random.default_rng(0))
        assert_allclose(z.data, [[0.3, -1.2]], atol=1e-9)

    def test_sample_mean(self):
        n = 100_000
        stats = LatentStats(as_tensor(np.full((n, 1), 0.5)), as_tensor(np.zeros((n, 1))))
        z = reparameterize(stats, np.random.default_rng(1))
        assert abs(z.data.mean() - 0.5) < 4.0 / math.sqrt(n)

    def test_given_noise(self):
        stats = LatentStats(as_tensor([[1.0]]), as_tensor([[math.log(4.0)]]))
        assert_allclose(reparameterize(stats, eps=np.array([[0.5]])).data, [[2.0]])

    def test_needs_noise_source(self):
        stats = LatentStats(as_tensor([[1.0]]), as_tensor([[0.0]]))
        with pytest.raises(ConfigError) as excinfo:
            reparameterize(stats)
        assert "eps" in excinfo.value.errors

    def test_noise_is_drawn_in_f64(self):
        a = draw_latent_noise(np.random.default_rng(3), 2, 3, np.float32)
        b = draw_latent_noise(np.random.default_rng(3), 2, 3, np.float64)
        assert a.dtype == np.float32
        assert_array_equal(a, b.astype(np.float32))


class TestModel:

    def test_frozen_view_shares_storage(self, small_model):
        frozen = small_model.frozen()
        assert not frozen.training
        assert all(not p.requires_grad for p in frozen.parameters())
        name, p = small_model.named_parameters()[0]
        p.data[...] = 0.25
        assert np.all(frozen.params[name].data == 0.25)

    def test_state_dict_round_trip(self, small_model):
        other = VaeModel.init(VaeConfig(latent_size=2), np.random.default_rng(99), dtype=np.float64)
        other.load_state_dict(small_model.state_dict())
        for name, value in small_model.state_dict().items():
            assert_array_equal(other.state_dict()[name], value)

    def test_state_dict_layout_checked(self, small_model):
        state = dict(small_model.state_dict())
        state.pop("dec.fc.bias")
        with pytest.raises(ShapeError):
            small_model.load_state_dict(state)

    def test_running_statistics_are_in_state(self, small_model):
        names = set(small_model.state_dict())
        assert "enc.bn0.running_mean" in names
        assert "dec.bn2.running_var" in names

    def test_f32_matches_f64(self, small_model, images):
        small_model.eval()
        single = small_model.astype(np.float32).eval()
        eps = np.random.default_rng(2).standard_normal((4, 2))
        _, loss64 = vae_forward(small_model, as_tensor(images), eps=eps)
        _, loss32 = vae_forward(single, Tensor(images, dtype=np.float32), eps=eps)
        assert loss32.total.dtype == np.float32
        assert_allclose(loss32.total.item(), loss64.total.item(), rtol=1e-3)

    def test_gradients(self, small_model, images):
        eps = np.random.default_rng(4).standard_normal((2, 2))
        x = as_tensor(images[:2])

        def fn(*params):
            return vae_forward(small_model, x, eps=eps)[1].total

        result = gradcheck(fn, small_model.parameters(), max_elements=3, rng=np.random.default_rng(0))
        assert result.passed(1e-4)


class TestTraining:

    @pytest.fixture
    def dataset(self):
        gen = np.random.default_rng(5)
        return MnistSet(make_images(64, gen), gen.integers(0, 10, size=64))

    def test_loss_decreases(self, small_model, dataset):
        log = train_vanilla(small_model, dataset, epochs=4, optimizer=OptimizerState.adam(3e-3),
                            rng=np.random.default_rng(0), batch_size=16)
        assert len(log) == 4
        totals = log.totals()
        assert totals[-1] < totals[0]
        assert log.records[0].n == 64

    def test_runs_are_reproducible(self, dataset, float64):
        totals = []
        for _ in range(2):
            model = VaeModel.init(VaeConfig(latent_size=2), np.random.default_rng(1), dtype=np.float64)
            log = train_vanilla(model, dataset, epochs=2, optimizer=OptimizerState.adam(),
                                rng=np.random.default_rng(3), batch_size=32)
            totals.append(log.totals())
        assert_array_equal(totals[0], totals[1])
