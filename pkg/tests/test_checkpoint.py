import struct
import zlib

import numpy as np
import pytest

from hazegan.checkpoint import (
    CheckpointMismatchError,
    CorruptCheckpointError,
    UnsupportedVersionError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from hazegan.models import Discriminator, Generator


def _perturbed_generator():
    g = Generator(seed=2)
    # make buffers non-trivial so they are part of what must survive
    for _, buf in g.named_buffers():
        buf += np.random.default_rng(0).normal(size=buf.shape).astype(buf.dtype) ** 2
    return g


def test_round_trip_bit_exact(tmp_path):
    g = _perturbed_generator()
    path = save_checkpoint(tmp_path / "GEN-1.ckpt", {"generator": g}, {"variant": "GEN", "epoch": 1, "seed": 0})
    ck = load_checkpoint(path)
    assert ck.metadata["variant"] == "GEN" and ck.metadata["epoch"] == 1
    h = Generator(seed=99)
    ck.restore("generator", h)
    a, b = g.state_dict(), h.state_dict()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_encoding_is_byte_stable():
    g = Generator(seed=1)
    assert encode({"generator": g}, {"x": 1}) == encode({"generator": g}, {"x": 1})


def test_header_layout():
    buf = encode({"generator": Generator()}, {})
    assert buf[:4] == b"CNDY"
    assert struct.unpack("<H", buf[4:6])[0] == 1


def test_truncated_file_is_corrupt(tmp_path):
    path = save_checkpoint(tmp_path / "g.ckpt", {"generator": Generator()})
    data = path.read_bytes()
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptCheckpointError):
            decode(data[:cut])


def test_flipped_byte_is_corrupt():
    data = bytearray(encode({"generator": Generator()}))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CorruptCheckpointError):
        decode(bytes(data))


def test_unsupported_version():
    data = bytearray(encode({"generator": Generator()}))
    data[4:6] = struct.pack("<H", 7)
    # keep the checksum valid so the version check is what fires
    data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])) & 0xFFFFFFFF)
    with pytest.raises(UnsupportedVersionError):
        decode(bytes(data))


def test_failed_load_leaves_model_untouched(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(encode({"generator": Generator(seed=5)})[:-100])
    h = Generator(seed=6)
    before = {k: v.copy() for k, v in h.state_dict().items()}
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path).restore("generator", h)
    assert all(np.array_equal(before[k], v) for k, v in h.state_dict().items())


def test_generator_into_discriminator_names_first_bad_tensor():
    ck = decode(encode({"generator": Generator()}))
    d = Discriminator()
    gstate, dstate = ck.slot("generator"), d.state_dict()
    first = next(k for k in dstate if k in gstate and gstate[k].shape != dstate[k].shape)
    with pytest.raises(CheckpointMismatchError) as err:
        ck.restore("generator", d)
    assert err.value.tensor == first
    assert first in str(err.value)


def test_unknown_names_rejected():
    g = Generator()
    state = g.state_dict()
    state["extra.weight"] = np.zeros(1, np.float32)
    with pytest.raises(CheckpointMismatchError):
        Generator().load_state_dict(state)


def test_missing_slot():
    ck = decode(encode({"generator": Generator()}))
    with pytest.raises(CheckpointMismatchError):
        ck.slot("discriminator")


def test_atomic_write_leaves_no_temp(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"generator": Generator()})
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_extra_arrays_round_trip():
    extra = {"adam.generator": {"m.x": np.arange(6, dtype=np.float32).reshape(2, 3)}}
    ck = decode(encode({"generator": Generator()}, {}, extra))
    np.testing.assert_array_equal(ck.slot("adam.generator")["m.x"], extra["adam.generator"]["m.x"])
