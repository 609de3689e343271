import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from saekit.checkpoint import MAGIC, load_checkpoint, load_model, save_checkpoint, save_model
from saekit.errors import ConfigError, FormatError
from saekit.models import ModelSpec, build_model, predict


def test_layout_by_hand(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, -2.0, 0.5]], np.float32)})
    raw = path.read_bytes()
    expect = MAGIC + struct.pack("<QQ", 1, 1) + b"w" + struct.pack("<QQQ", 2, 1, 3) + struct.pack("<3f", 1.0, -2.0, 0.5)
    assert raw == expect


@settings(max_examples=30, deadline=None)
@given(
    arrays=st.dictionaries(
        st.text("abcdefgh.", min_size=1, max_size=12),
        hnp.arrays(np.float32, hnp.array_shapes(max_dims=4, max_side=4), elements=st.floats(width=32, allow_nan=False)),
        max_size=4,
    )
)
def test_round_trip_is_bit_exact(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("ckpt") / "x.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_model_round_trip(tmp_path, rng):
    m = build_model(ModelSpec("tiny_senetv2", 3), seed=5)
    m["head.fc.bias"].data[...] = rng.normal(size=3)
    path = tmp_path / "m.ckpt"
    save_model(path, m)
    m2 = build_model(ModelSpec("tiny_senetv2", 3), seed=99)
    load_model(path, m2)
    for name in m.slots:
        assert m[name].data.tobytes() == m2[name].data.tobytes()
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(predict(m, x), predict(m2, x))
    save_model(tmp_path / "again.ckpt", m2)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_arch_mismatch(tmp_path):
    save_model(tmp_path / "m.ckpt", build_model(ModelSpec("tiny_resnet", 3)))
    with pytest.raises(ConfigError):
        load_model(tmp_path / "m.ckpt", build_model(ModelSpec("tiny_senetv2", 3)))


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XAEKIT1" + b[7:], "bad magic"),
        (lambda b: b[:-3], "truncated at byte offset"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_files(tmp_path, mutate, match):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"a": np.ones((2, 2), np.float32)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_checkpoint(path)
