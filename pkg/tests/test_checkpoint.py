import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from wavereprog.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_state_strict,
                                   read_checkpoint, write_checkpoint)
from wavereprog.errors import (CheckpointMagicError, CheckpointSchemaError,
                               CheckpointTruncatedError, CheckpointVersionError, DataIOError)


def _state():
    g = torch.Generator().manual_seed(0)
    return {"a.weight": torch.randn(4, 3, generator=g), "a.bias": torch.randn(4, generator=g),
            "scalar": torch.tensor(2.5)}


def test_roundtrip_bit_exact(tmp_path):
    arrays = _state()
    write_checkpoint(tmp_path / "c.wrpg", {"epoch": 3, "seed": 1}, arrays)
    meta, loaded = read_checkpoint(tmp_path / "c.wrpg")
    assert meta["epoch"] == 3 and [t["name"] for t in meta["tensors"]] == list(arrays)
    for k, v in arrays.items():
        assert torch.equal(loaded[k], v)


def test_save_load_save_identical_bytes(tmp_path):
    write_checkpoint(tmp_path / "a.wrpg", {"x": [1, 2]}, _state())
    meta, arrays = read_checkpoint(tmp_path / "a.wrpg")
    meta.pop("tensors")
    write_checkpoint(tmp_path / "b.wrpg", meta, arrays)
    assert (tmp_path / "a.wrpg").read_bytes() == (tmp_path / "b.wrpg").read_bytes()


def test_header_layout():
    data = encode_checkpoint({}, {"w": torch.ones(2)})
    magic, version, length = struct.unpack_from("<4sHQ", data)
    assert magic == MAGIC == b"WRPG" and version == 1
    assert data[-8:] == np.ones(2, dtype="<f4").tobytes()
    assert len(data) == 14 + length + 8


def test_truncation_detected_at_every_cut():
    data = encode_checkpoint({"k": 1}, _state())
    for cut in (2, 10, 20, len(data) - 1):
        with pytest.raises((CheckpointTruncatedError, CheckpointMagicError)):
            decode_checkpoint(data[:cut])
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(data[:-4])


def test_bad_magic_and_version():
    data = encode_checkpoint({}, _state())
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(b"NOPE" + data[4:])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(data[:4] + struct.pack("<H", 2) + data[6:])


def test_error_codes_are_distinct():
    codes = {CheckpointMagicError.code, CheckpointVersionError.code,
             CheckpointTruncatedError.code, CheckpointSchemaError.code}
    assert len(codes) == 4


def test_schema_error_names_array():
    module = torch.nn.Linear(3, 4)
    arrays = {"weight": torch.zeros(4, 5), "bias": torch.zeros(4)}
    with pytest.raises(CheckpointSchemaError, match="'weight'"):
        load_state_strict(module, arrays)
    with pytest.raises(CheckpointSchemaError, match="missing array 'p.bias'"):
        load_state_strict(module, {"p.weight": torch.zeros(4, 3)}, "p.")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(DataIOError):
        read_checkpoint(tmp_path / "none.wrpg")


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(width=32, allow_nan=False)),
                       max_size=4))
def test_roundtrip_property(named):
    data = encode_checkpoint({"note": "x"}, named)
    meta, loaded = decode_checkpoint(data)
    assert list(loaded) == list(named)
    for k, v in named.items():
        assert loaded[k].numpy().tobytes() == v.astype("<f4").tobytes()
    assert encode_checkpoint({"note": "x"}, loaded) == data
