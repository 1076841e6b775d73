import struct

import pytest
import torch

from nerfmark.autodiff import Rng
from nerfmark.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_module,
    module_tensors,
    save_checkpoint,
)
from nerfmark.iqem import IqemModel, init_iqem


def sample_tensors():
    rng = Rng(0)
    return {"a.weight": rng.normal((3, 4, 2)), "b": rng.normal((5,)), "scalar": torch.tensor(2.5)}


def test_round_trip_bit_exact(tmp_path):
    tensors = sample_tensors()
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"seed": 17, "step": 3})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].numpy().tobytes() == v.numpy().tobytes()
    assert meta == {"seed": 17, "step": 3}


def test_encoding_is_byte_stable():
    assert encode_checkpoint(sample_tensors(), {"k": 1}) == encode_checkpoint(sample_tensors(), {"k": 1})


def test_header_layout():
    blob = encode_checkpoint({"w": torch.tensor([1.0, -2.0])}, {})
    assert blob[:8] == MAGIC
    version, meta_len = struct.unpack_from("<II", blob, 8)
    assert version == FORMAT_VERSION and blob[16 : 16 + meta_len] == b"{}"
    pos = 16 + meta_len
    assert struct.unpack_from("<I", blob, pos) == (1,)
    assert struct.unpack_from("<H", blob, pos + 4) == (1,)
    assert blob[pos + 6 : pos + 7] == b"w"
    assert struct.unpack_from("<BI", blob, pos + 7) == (1, 2)
    assert struct.unpack_from("<2f", blob, pos + 12) == (1.0, -2.0)
    assert len(blob) == pos + 20 + 32


def test_truncated_file_fails_checksum(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", sample_tensors(), {})
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_flipped_byte_fails_checksum():
    blob = bytearray(encode_checkpoint(sample_tensors(), {}))
    blob[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(blob))


def test_version_mismatch_rejected():
    import hashlib

    blob = encode_checkpoint(sample_tensors(), {})
    body = bytearray(blob[:-32])
    struct.pack_into("<I", body, 8, FORMAT_VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_not_a_checkpoint_and_missing(tmp_path):
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        decode_checkpoint(b"hello world" * 10)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_module_round_trip(tmp_path):
    model = init_iqem(IqemModel(), Rng(1))
    save_checkpoint(tmp_path / "m.ckpt", module_tensors(model, "iqem."), {"seed": 1})
    tensors, _ = load_checkpoint(tmp_path / "m.ckpt")
    other = load_module(IqemModel(), tensors, "iqem.")
    for (k, v), (k2, v2) in zip(model.state_dict().items(), other.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
