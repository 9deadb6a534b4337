import json
import struct

import numpy as np
import pytest

from dmdk.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint

RNG = np.random.default_rng(37)


def test_round_trip_values_and_meta(tmp_path):
    tensors = [
        ("a", RNG.normal(size=(2, 3))),
        ("b", np.array([[1e-300, -0.0]])),
    ]
    meta = {"nested": {"k": [1, 2]}, "s": "text"}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, tensors, meta)
    loaded, loaded_meta = load_checkpoint(p)
    assert set(loaded) == {"a", "b"}
    for name, arr in tensors:
        assert np.array_equal(loaded[name], arr)
    assert loaded_meta == meta


def test_byte_layout(tmp_path):
    p = tmp_path / "m.ckpt"
    arr = np.array([[1.5, -2.0]])
    save_checkpoint(p, [("w", arr)], {"v": 1})
    data = p.read_bytes()
    assert data[:4] == MAGIC == b"DMDK"
    assert struct.unpack_from("<I", data, 4)[0] == VERSION == 1
    hlen = struct.unpack_from("<Q", data, 8)[0]
    header = json.loads(data[16 : 16 + hlen])
    assert header["meta"] == {"v": 1}
    assert header["tensors"] == [{"cols": 2, "name": "w", "offset": 0, "rows": 1}]
    payload = data[16 + hlen :]
    assert payload == arr.astype("<f8").tobytes()


def test_save_is_byte_deterministic(tmp_path):
    tensors = [("x", RNG.normal(size=(3, 3)))]
    meta = {"b": 2, "a": 1}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, tensors, meta)
    save_checkpoint(p2, tensors, dict(reversed(list(meta.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_duplicate_tensor_names_rejected(tmp_path):
    with pytest.raises(ValueError, match="duplicate tensor name 'w'"):
        save_checkpoint(tmp_path / "m.ckpt", [("w", np.zeros((1, 1))), ("w", np.ones((1, 1)))], {})


def test_non_2d_tensor_rejected(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        save_checkpoint(tmp_path / "m.ckpt", [("w", np.zeros(3))], {})


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(p)


def test_short_file_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"DMDK\x01")
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(p)


def test_unsupported_version_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, [], {})
    data = bytearray(p.read_bytes())
    data[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="version 9"):
        load_checkpoint(p)


def test_truncated_header_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(ValueError, match="truncated header"):
        load_checkpoint(p)


def test_malformed_header_json_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    body = b"not json!!"
    p.write_bytes(MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(body)) + body)
    with pytest.raises(ValueError, match="malformed"):
        load_checkpoint(p)


def test_tensor_past_end_of_file_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, [("w", np.zeros((2, 2)))], {})
    data = p.read_bytes()
    p.write_bytes(data[:-8])  # drop one float64
    with pytest.raises(ValueError, match="'w' extends past end"):
        load_checkpoint(p)


def test_empty_checkpoint_round_trips(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, [], {"only": "meta"})
    tensors, meta = load_checkpoint(p)
    assert tensors == {}
    assert meta == {"only": "meta"}
