import struct

import numpy as np
import pytest

from conftest import assert_bitwise, randomize
from skip2lora import ModelSpec, build
from skip2lora.checkpoint import CheckpointError, expected_size, from_bytes, load, save, to_bytes
from skip2lora.network import FineTuneMode


@pytest.mark.parametrize("mode", list(FineTuneMode))
def test_round_trip_is_bitwise(tmp_path, mode):
    m = randomize(build(ModelSpec((7, 5, 4, 3), rank=2, mode=mode, seed=1)))
    p = tmp_path / "m.skl2"
    save(m, p)
    back = load(p)
    assert back.mode is m.mode and back.dims == m.dims and back.spec.rank == 2
    for (ka, a), (kb, b) in zip(m.tensors().items(), back.tensors().items()):
        assert ka == kb
        assert_bitwise(a, b)
    assert p.stat().st_size == expected_size(m.dims, 2, mode)


def test_size_formula_by_hand():
    # 256-96-96-3 ft-all: header 4+4+1+2 + 4*4 + 4, then weights, biases and BN for two layers
    floats = 256 * 96 + 96 + 96 * 96 + 96 + 96 * 3 + 3 + 2 * 4 * 96
    assert expected_size((256, 96, 96, 3), 4, "ft-all") == 31 + 4 * floats
    skip = floats + (256 * 4 + 4 * 3) + (96 * 4 + 4 * 3) + (96 * 4 + 4 * 3)
    assert expected_size((256, 96, 96, 3), 4, "skip2-lora") == 31 + 4 * skip


def test_bad_magic():
    buf = bytearray(to_bytes(build(ModelSpec((3, 2, 2)))))
    buf[:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(buf))


def test_bad_version():
    buf = bytearray(to_bytes(build(ModelSpec((3, 2, 2)))))
    buf[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(buf))


@pytest.mark.parametrize("cut", [2, 12, 20, -1])
def test_truncation_is_rejected(cut):
    buf = to_bytes(build(ModelSpec((3, 2, 2))))
    with pytest.raises(CheckpointError):
        from_bytes(buf[:cut])


def test_trailing_bytes_are_rejected():
    buf = to_bytes(build(ModelSpec((3, 2, 2))))
    with pytest.raises(CheckpointError):
        from_bytes(buf + b"\0")


def test_failed_save_leaves_no_file(tmp_path, monkeypatch):
    m = build(ModelSpec((3, 2, 2)))
    p = tmp_path / "m.skl2"

    def boom(*a, **k):
        raise OSError("disk full")
    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        save(m, p)
    assert not p.exists()
    assert list(tmp_path.iterdir()) == []


def test_loaded_model_predicts_identically(tmp_path):
    m = randomize(build(ModelSpec((7, 5, 4, 3), rank=2, mode="skip2-lora", seed=1)))
    m.set_bn_training(False)
    save(m, tmp_path / "m.skl2")
    back = load(tmp_path / "m.skl2")
    x = np.random.default_rng(0).normal(size=(9, 7)).astype(np.float32)
    assert_bitwise(m.forward(x), back.forward(x))
