"""
Tests for binary checkpoints.
"""

import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from avae.checkpoint import (
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from avae.exceptions import CheckpointError
from avae.tensor import Tensor
from avae.vae import VaeConfig, VaeModel, vae_forward

from .conftest import make_images


@pytest.fixture(params=[np.float32, np.float64])
def model(request):
    return VaeModel.init(VaeConfig(latent_size=3), np.random.default_rng(0), dtype=request.param)


class TestRoundTrip:

    def test_evaluation_is_bit_exact(self, model, tmp_path):
        model.eval()
        path = save_checkpoint(tmp_path / "run" / "model.ckpt", model, {"seed": 7})
        restored = load_checkpoint(path).build_model()
        assert restored.dtype == model.dtype
        assert not restored.training

        x = Tensor(make_images(3, np.random.default_rng(1)), dtype=model.dtype)
        eps = np.random.default_rng(2).standard_normal((3, 3))
        a, loss_a = vae_forward(model, x, eps=eps)
        b, loss_b = vae_forward(restored, x, eps=eps)
        assert_array_equal(a.data, b.data)
        assert_array_equal(loss_a.sample_total.data, loss_b.sample_total.data)

    def test_config_and_order_survive(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.ckpt", model, {"seed": 7, "mode": "vae"})
        loaded = load_checkpoint(path)
        assert loaded.config["seed"] == 7
        assert loaded.config["vae"]["latent_size"] == 3
        assert list(loaded.tensors) == list(model.state_dict())
        assert not (tmp_path / "model.ckpt.tmp").exists()

    def test_rng_state(self, model, tmp_path):
        rng = np.random.default_rng(11)
        rng.standard_normal(5)
        path = save_checkpoint(tmp_path / "model.ckpt", model, {}, rng=rng)
        expected = rng.standard_normal(4)
        assert_array_equal(load_checkpoint(path).restore_rng().standard_normal(4), expected)

    def test_header(self, model):
        blob = encode_checkpoint(Checkpoint({"vae": model.config.to_dict()}, model.state_dict()))
        assert blob[:5] == MAGIC
        assert struct.unpack("<H", blob[5:7]) == (1,)


class TestCorruption:

    @pytest.fixture
    def blob(self):
        return encode_checkpoint(Checkpoint({"a": 1}, {"w": np.arange(6.0).reshape(2, 3)}))

    def test_decode(self, blob):
        checkpoint = decode_checkpoint(blob)
        assert checkpoint.config == {"a": 1}
        assert_array_equal(checkpoint.tensors["w"], np.arange(6.0).reshape(2, 3))
        assert checkpoint.rng_state is None

    def test_bad_magic(self, blob):
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(b"XXXX1" + blob[5:])

    def test_version(self, blob):
        with pytest.raises(CheckpointError) as excinfo:
            decode_checkpoint(blob[:5] + struct.pack("<H", 9) + blob[7:])
        assert excinfo.value.detail["got"] == 9

    @pytest.mark.parametrize("cut", [3, 8, 20, -1])
    def test_truncated(self, blob, cut):
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:cut])

    def test_trailing_bytes(self, blob):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(blob + b"\x00")

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError):
            encode_checkpoint(Checkpoint({}, {"i": np.arange(3)}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(tmp_path / "none.ckpt")
        assert excinfo.value.code == 32

    def test_model_needs_vae_section(self, blob):
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob).build_model()
