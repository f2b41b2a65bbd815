import struct

import numpy as np
import pytest

from smearnet import modelio
from smearnet import network as net


@pytest.fixture
def model():
    m = net.init_model(net.default_config(20), 3)
    m.params["bn.running_mean"][...] = 0.25
    m.meta["epochs"] = 4
    return m


def test_save_load_save_identical(model, tmp_path):
    a, b = tmp_path / "a.mdf", tmp_path / "b.mdf"
    n = modelio.save_model(model, a)
    modelio.save_model(modelio.load_model(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert n == a.stat().st_size


def test_round_trip_preserves_forward_bits(model, tmp_path):
    modelio.save_model(model, tmp_path / "m.mdf")
    loaded = modelio.load_model(tmp_path / "m.mdf")
    assert loaded.meta == model.meta
    assert list(loaded.params) == list(model.params)
    x = np.random.default_rng(0).random((5, 3, 20, 20), dtype=np.float32)
    assert net.forward(loaded, x)[0].tobytes() == net.forward(model, x)[0].tobytes()


def test_header_layout(model):
    buf = modelio.model_to_bytes(model)
    assert buf[:4] == b"MDF1"
    version, length = struct.unpack_from("<HI", buf, 4)
    assert version == 1
    (count,) = struct.unpack_from("<I", buf, 10 + length)
    assert count == len(model.params)
    # first parameter record: name, rank, extents
    off = 14 + length
    (nlen,) = struct.unpack_from("<H", buf, off)
    assert buf[off + 2:off + 2 + nlen] == b"conv1.weight"
    assert buf[off + 2 + nlen] == 4
    assert struct.unpack_from("<4I", buf, off + 3 + nlen) == (32, 3, 3, 3)


def test_bad_magic(model):
    buf = bytearray(modelio.model_to_bytes(model))
    buf[:4] = b"XXXX"
    with pytest.raises(modelio.BadMagicError):
        modelio.model_from_bytes(bytes(buf))


def test_version_mismatch(model):
    buf = bytearray(modelio.model_to_bytes(model))
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(modelio.VersionMismatchError):
        modelio.model_from_bytes(bytes(buf))


def test_truncation(model):
    buf = modelio.model_to_bytes(model)
    for cut in (2, 8, 200, len(buf) - 1):
        with pytest.raises(modelio.TruncatedModelError):
            modelio.model_from_bytes(buf[:cut])


def test_trailing_garbage_rejected(model):
    with pytest.raises(modelio.ModelFormatError):
        modelio.model_from_bytes(modelio.model_to_bytes(model) + b"\0")


def test_parameter_free_model_is_header_only():
    cfg = net.NetworkConfig((2, 1, 1), [net.LayerSpec("flatten"), net.LayerSpec("softmax")])
    m = net.init_model(cfg, 0)
    buf = modelio.model_to_bytes(m)
    assert len(buf) == len(modelio.encode_header(modelio.FLOAT_MAGIC, cfg, m.meta)) + 4
