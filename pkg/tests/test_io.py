import json
import struct

import numpy as np
import pytest

from glyrag import io


def test_checkpoint_roundtrip_and_layout(tmp_path):
    state = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.0]), "s": np.array(3.0)}
    io.save_checkpoint(tmp_path / "m.ckpt", state, {"seed": 1})
    back, meta = io.load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == ["w", "b", "s"] and meta == {"seed": 1}
    assert all(np.array_equal(back[k], state[k]) for k in state)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"GRCK" and struct.unpack_from("<II", raw, 4) == (io.VERSION, 3)
    assert struct.unpack_from("<H", raw, 12) == (1,) and raw[14:15] == b"w"
    assert raw.endswith(struct.pack("<d", 3.0))


def test_index_roundtrip(tmp_path):
    z, y = np.random.default_rng(0).normal(size=(5, 4)), np.zeros((5, 12))
    io.save_index_arrays(tmp_path / "i.bin", z, y, {"refs": list("abcde")})
    z2, y2, meta = io.load_index_arrays(tmp_path / "i.bin")
    assert np.array_equal(z, z2) and np.array_equal(y, y2) and meta["refs"] == list("abcde")
    assert len((tmp_path / "i.bin").read_bytes()) == 4 + struct.calcsize("<IQII") + 8 * (20 + 60)


def test_sidecar_is_sorted_json(tmp_path):
    io.write_json(tmp_path / "x.json", {"b": 1, "a": [1, 2]})
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"') and text.endswith("\n")
    assert json.loads(text) == {"a": [1, 2], "b": 1}


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_corrupt_checkpoint_rejected(tmp_path, cut):
    io.save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones((3, 3))}, {})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:cut])
    with pytest.raises(io.ArtifactError):
        io.load_checkpoint(tmp_path / "m.ckpt")


def test_corrupt_index_and_missing_files(tmp_path):
    io.save_index_arrays(tmp_path / "i.bin", np.ones((3, 2)), np.ones((3, 12)), {})
    (tmp_path / "i.bin").write_bytes((tmp_path / "i.bin").read_bytes() + b"\0")
    with pytest.raises(io.ArtifactError):
        io.load_index_arrays(tmp_path / "i.bin")
    (tmp_path / "j.bin").write_bytes(b"GRCK....")
    with pytest.raises(io.ArtifactError):
        io.load_index_arrays(tmp_path / "j.bin")
    for fn in (io.load_checkpoint, io.load_index_arrays, io.read_json):
        with pytest.raises(io.ArtifactError):
            fn(tmp_path / "nope")
