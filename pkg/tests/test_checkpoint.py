import struct

import numpy as np
import pytest

from floodtransformer import checkpoint
from floodtransformer.errors import CheckpointError
from floodtransformer.model import FloodTransformer, ModelConfig


def test_byte_layout():
    buf = checkpoint.encode({"a": "1"}, {"w": np.array([1.0, 2.0])})
    expect = (
        b"FLOODTR\x00" + struct.pack("<I", 1)
        + struct.pack("<I", 4) + b"a=1\n"
        + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w" + struct.pack("<II", 1, 2)
        + struct.pack("<dd", 1.0, 2.0)
    )
    assert buf == expect


def test_scalar_array(tmp_path):
    kv, arrays = checkpoint.decode(checkpoint.encode({}, {"s": np.array(3.5)}))
    assert arrays["s"].shape == () and arrays["s"] == 3.5


def test_round_trip_bit_exact(tmp_path, rng):
    cfg = ModelConfig(image_size=(16, 16), depth=1, seed=4)
    model = FloodTransformer(cfg)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, {"train.step": "7"}, {"optim.m.x": np.ones(3)})
    back, kv, extra = checkpoint.load(path)
    assert back.config == cfg
    assert kv == {"train.step": "7"}
    np.testing.assert_array_equal(extra["optim.m.x"], np.ones(3))
    for k, p in model.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()
    img = rng.random((3, 16, 16))
    assert back(img).logits.data.tobytes() == model(img).logits.data.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:8] + struct.pack("<I", 2) + b[12:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_corrupt_bytes(tmp_path, mutate):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, FloodTransformer(ModelConfig(image_size=(8, 8), depth=0)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        checkpoint.load(path)


def test_missing_parameter(tmp_path):
    model = FloodTransformer(ModelConfig(image_size=(8, 8), depth=0))
    arrays = model.state_dict()
    arrays.pop(next(iter(arrays)))
    path = tmp_path / "m.ckpt"
    path.write_bytes(checkpoint.encode(model.config.to_kv(), arrays))
    with pytest.raises(CheckpointError):
        checkpoint.load(path)


def test_wrong_shape(tmp_path):
    model = FloodTransformer(ModelConfig(image_size=(8, 8), depth=0))
    arrays = model.state_dict()
    name = next(iter(arrays))
    arrays[name] = np.zeros(arrays[name].size + 1)
    path = tmp_path / "m.ckpt"
    path.write_bytes(checkpoint.encode(model.config.to_kv(), arrays))
    with pytest.raises(CheckpointError):
        checkpoint.load(path)


def test_bad_config_value(tmp_path):
    model = FloodTransformer(ModelConfig(image_size=(8, 8), depth=0))
    kv = model.config.to_kv()
    kv["embed_dim"] = "banana"
    path = tmp_path / "m.ckpt"
    path.write_bytes(checkpoint.encode(kv, model.state_dict()))
    with pytest.raises(CheckpointError):
        checkpoint.load(path)
