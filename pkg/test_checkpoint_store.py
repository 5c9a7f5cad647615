"""Checkpoint encoding, the on-disk store and parameter restore"""

import numpy as np
import pytest

from checkpoint_store import CheckpointStore, HEADER_LENGTH, decode_checkpoint, encode_checkpoint, restore_parameters
from lab_errors import DimensionError, FormatError
from models import CQural


class TestEncoding:
    def test_arrays_survive_bit_exactly(self, rng):
        params = {"fc4.w": rng.normal(size=(3, 5)), "head.w": np.array([0.25]), "scalar": np.array(1.5)}
        decoded = decode_checkpoint(encode_checkpoint(params))
        assert sorted(decoded) == sorted(params)
        for name, array in params.items():
            assert decoded[name].shape == array.shape
            np.testing.assert_array_equal(decoded[name], array)

    def test_insertion_order_does_not_matter(self):
        a = encode_checkpoint({"b": np.ones(2), "a": np.zeros(3)})
        b = encode_checkpoint({"a": np.zeros(3), "b": np.ones(2)})
        assert a == b

    def test_truncated_payload(self):
        data = encode_checkpoint({"w": np.ones(4)})
        with pytest.raises(FormatError):
            decode_checkpoint(data[:-3])

    def test_trailing_bytes(self):
        data = encode_checkpoint({"w": np.ones(4)})
        with pytest.raises(FormatError):
            decode_checkpoint(data + b"\x00" * 8)

    def test_header_not_json(self):
        body = b"not json"
        with pytest.raises(FormatError, match="byte offset 8"):
            decode_checkpoint(HEADER_LENGTH.pack(len(body)) + body)

    def test_too_short(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"\x01\x02")


class TestStore:
    def test_save_load_and_list(self, tmp_path, rng):
        store = CheckpointStore(tmp_path / "ckpt")
        store.save("seed_0", {"w": rng.normal(size=(2, 2))})
        store.save("seed_1", {"w": np.zeros((2, 2))})
        assert store.list_checkpoints() == ["seed_0", "seed_1"]
        np.testing.assert_array_equal(store.load("seed_1")["w"], np.zeros((2, 2)))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            CheckpointStore(tmp_path).load("nope")

    def test_restored_model_predicts_identically(self, tmp_path, tiny_config, tiny_task):
        trained = CQural(tiny_config)
        for tensor in trained.parameters().values():
            tensor.data = tensor.data + 0.1
        store = CheckpointStore(tmp_path)
        store.save("model", trained.parameters())

        fresh = CQural(tiny_config)
        restore_parameters(fresh.parameters(), store.load("model"))
        np.testing.assert_array_equal(fresh.probabilities(tiny_task.test), trained.probabilities(tiny_task.test))

    def test_restore_checks_shapes(self, tiny_config):
        model = CQural(tiny_config)
        arrays = {name: tensor.data for name, tensor in model.parameters().items()}
        arrays["fc4.w"] = np.zeros((1, 1))
        with pytest.raises(DimensionError):
            restore_parameters(model.parameters(), arrays)

    def test_restore_checks_names(self, tiny_config):
        model = CQural(tiny_config)
        with pytest.raises(DimensionError, match="lacks"):
            restore_parameters(model.parameters(), {})
