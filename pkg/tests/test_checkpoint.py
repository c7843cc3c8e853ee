import struct

import numpy as np
import pytest

from dendrite_cascade.errors import (CheckpointChecksumError, CheckpointError, CheckpointNameError,
                                     CheckpointTruncatedError, CheckpointVersionError)
from dendrite_cascade.nn import ParamStore
from dendrite_cascade.nn.checkpoint import (decode_checkpoint, encode_checkpoint, load_checkpoint,
                                            load_into, save_checkpoint)


def sample_store(seed=0):
    rng = np.random.default_rng(seed)
    return ParamStore({"b.w": rng.normal(size=(2, 3, 3, 3)), "a.b": rng.normal(size=2),
                       "c.gamma": np.ones(4)})


def test_round_trip_is_bit_exact(tmp_path):
    store = sample_store()
    path = save_checkpoint(store, tmp_path / "m.ckpt", {"role": "D1"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"role": "D1"}
    assert loaded.names() == store.names()
    for name in store:
        assert loaded[name].data.tobytes() == store[name].data.tobytes()
    assert encode_checkpoint(loaded, meta) == path.read_bytes()


def test_encoding_is_deterministic():
    assert encode_checkpoint(sample_store(), {"x": 1}) == encode_checkpoint(sample_store(), {"x": 1})


def test_empty_store_round_trips():
    store, meta = decode_checkpoint(encode_checkpoint(ParamStore()))
    assert len(store) == 0


def test_flipped_payload_byte_fails_checksum():
    blob = bytearray(encode_checkpoint(sample_store()))
    blob[-10] ^= 0x01
    with pytest.raises(CheckpointChecksumError):
        decode_checkpoint(bytes(blob))


def test_truncated_file():
    blob = encode_checkpoint(sample_store())
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(blob[:-20])
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(blob[:6])


def test_unknown_version():
    blob = encode_checkpoint(sample_store())
    n = struct.unpack("<Q", blob[4:12])[0]
    manifest = blob[12:12 + n].replace(b'"format_version":1', b'"format_version":9')
    assert manifest != blob[12:12 + n]
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(blob[:12] + manifest + blob[12 + n:])


def test_bad_magic():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + encode_checkpoint(sample_store())[4:])


def test_load_into_rejects_unknown_and_missing_names():
    target = sample_store(1)
    extra = sample_store(2)
    extra.add("zz.w", np.zeros(3))
    with pytest.raises(CheckpointNameError, match="zz.w"):
        load_into(target, extra)
    partial = ParamStore({"a.b": np.zeros(2)})
    with pytest.raises(CheckpointNameError, match="lacks"):
        load_into(target, partial)


def test_load_into_copies_values():
    target, source = sample_store(1), sample_store(2)
    load_into(target, source)
    for name in target:
        np.testing.assert_array_equal(target[name].data, source[name].data)
