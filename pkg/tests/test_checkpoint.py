"""Checkpoint format: bitwise round-trip and negative controls."""

from __future__ import annotations

import numpy as np
import pytest

from bertforge.autograd import ShapeError
from bertforge.checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigMismatchError,
    TruncatedCheckpointError,
    UnknownTensorError,
    assign_parameters,
    load_checkpoint,
    save_checkpoint,
)
from bertforge.model import EncoderModel, Heads, ModelConfig, all_params
from bertforge.runtime import file_sha256

SMALL = ModelConfig(num_layers=1, hidden_size=8, num_heads=2, vocab_size=16, max_positions=8)
OTHER = ModelConfig(num_layers=2, hidden_size=8, num_heads=2, vocab_size=16, max_positions=8)


@pytest.fixture
def saved(tmp_path):
    model = EncoderModel(SMALL, seed=9)
    heads = Heads.for_pretraining(model, seed=9)
    params = all_params(model, heads)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(params, SMALL, path, extra={"step": 123})
    return model, heads, params, path


class TestRoundTrip:
    def test_bitwise_equal_tensors(self, saved):
        _, _, params, path = saved
        ckpt = load_checkpoint(path)
        assert ckpt.config == SMALL
        assert ckpt.extra == {"step": 123}
        assert set(ckpt.tensors) == set(params)
        for name, arr in ckpt.tensors.items():
            original = params[name].data
            assert arr.dtype == np.float32
            assert arr.tobytes() == original.tobytes()

    def test_assign_restores_model(self, saved):
        model, heads, params, path = saved
        fresh_model = EncoderModel(SMALL, seed=1)
        fresh_heads = Heads.for_pretraining(fresh_model, seed=1)
        fresh = all_params(fresh_model, fresh_heads)
        assert not np.array_equal(
            fresh["embeddings/token"].data, params["embeddings/token"].data
        )
        assign_parameters(fresh, load_checkpoint(path).tensors)
        for name in params:
            np.testing.assert_array_equal(fresh[name].data, params[name].data)

    def test_save_is_deterministic(self, saved, tmp_path):
        _, _, params, path = saved
        again = str(tmp_path / "again.ckpt")
        save_checkpoint(params, SMALL, again, extra={"step": 123})
        assert file_sha256(path) == file_sha256(again)

    def test_scalar_and_zero_d(self, tmp_path):
        path = str(tmp_path / "s.ckpt")
        from bertforge.autograd import Tensor
        params = {"x": Tensor(np.float32(3.5)), "y": Tensor(np.ones(3, dtype=np.float32))}
        save_checkpoint(params, SMALL, path)
        ckpt = load_checkpoint(path)
        assert ckpt.tensors["x"].shape == ()
        assert float(ckpt.tensors["x"]) == 3.5


class TestNegativeControls:
    def test_truncated_by_one_byte(self, saved):
        _, _, _, path = saved
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-1])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, saved):
        _, _, _, path = saved
        blob = open(path, "rb").read()
        open(path, "wb").write(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        _, _, _, path = saved
        blob = bytearray(open(path, "rb").read())
        blob[4] = 99
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointVersionError, match="99"):
            load_checkpoint(path)

    def test_config_mismatch(self, saved):
        _, _, _, path = saved
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(path, expect_config=OTHER)
        assert load_checkpoint(path, expect_config=SMALL).config == SMALL

    def test_mangled_header_json(self, saved):
        _, _, _, path = saved
        blob = bytearray(open(path, "rb").read())
        blob[12] ^= 0xFF  # first header byte
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="header"):
            load_checkpoint(path)

    def test_unknown_tensor_rejected(self, saved):
        model, _, _, path = saved
        state = load_checkpoint(path).tensors
        with pytest.raises(UnknownTensorError, match="no target"):
            assign_parameters(model.params, state)

    def test_missing_tensor_rejected(self, saved):
        model, heads, params, path = saved
        state = load_checkpoint(path).tensors
        del state["pooler/w"]
        with pytest.raises(UnknownTensorError, match="missing"):
            assign_parameters(params, state)

    def test_shape_mismatch_rejected(self, saved):
        _, _, params, path = saved
        state = load_checkpoint(path).tensors
        state["pooler/w"] = state["pooler/w"][:4]
        with pytest.raises(ShapeError, match="pooler/w"):
            assign_parameters(params, state)

    def test_empty_file(self, tmp_path):
        path = str(tmp_path / "empty.ckpt")
        open(path, "wb").close()
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)
