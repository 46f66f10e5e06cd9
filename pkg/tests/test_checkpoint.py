import json
import struct

import numpy as np
import pytest

from sspot.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_header, save_checkpoint
from sspot.model import ModelConfig, build_model
from sspot.training import OptimState, adam_step


def tiny():
    return ModelConfig(variant="3d", channels=2, timesteps=8, image_h=64, image_w=128,
                       filter_counts=(2, 3, 2, 3, 2, 3))


def trained_state(params, steps=3):
    s = OptimState(lr=1e-3)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        adam_step(params, {n: rng.normal(size=t.shape) for n, t in params.items()}, s)
    return s


def test_roundtrip_bit_exact(tmp_path):
    p = build_model(tiny(), 1)
    s = trained_state(p)
    path = save_checkpoint(p, s, tmp_path / "a.ckpt", extra={"epoch": 3})
    q, s2 = load_checkpoint(path)
    assert q.config == p.config
    assert list(q.tensors) == list(p.tensors)
    for n, t in p.items():
        assert q[n].data.tobytes() == t.data.tobytes()
        assert s2.m[n].tobytes() == s.m[n].tobytes()
        assert s2.v[n].tobytes() == s.v[n].tobytes()
    assert s2.settings() == s.settings() and s2.step == 3
    # a second save of the loaded state is byte-identical
    save_checkpoint(q, s2, tmp_path / "b.ckpt", extra={"epoch": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_without_optimizer(tmp_path):
    p = build_model(tiny(), 1)
    q, s = load_checkpoint(save_checkpoint(p, None, tmp_path / "c.ckpt"))
    assert s is None and q["enc0.w"].data.tobytes() == p["enc0.w"].data.tobytes()


def test_layout(tmp_path):
    p = build_model(tiny(), 1)
    raw = save_checkpoint(p, None, tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == MAGIC == b"SSPOTCKP"
    assert raw[8] == 1
    (n,) = struct.unpack("<Q", raw[9:17])
    header = json.loads(raw[17:17 + n])
    first = header["tensors"][0]
    blob = raw[17 + n + first["offset"]: 17 + n + first["offset"] + first["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(blob, "<f8").reshape(first["shape"]), p[first["name"]].data)


def test_full_size_parameter_count_in_header(tmp_path):
    p = build_model(ModelConfig.full("3d"), 0)
    path = save_checkpoint(p, None, tmp_path / "full.ckpt")
    del p
    assert round(read_header(path)["parameter_count"] / 1e6, 2) == 50.02


@pytest.mark.parametrize("cut", [4, 12, 40, -1, -100])
def test_truncated_rejected(tmp_path, cut):
    p = build_model(tiny(), 1)
    path = save_checkpoint(p, trained_state(p), tmp_path / "t.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut > 0 else raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bit_flip_names_tensor(tmp_path):
    p = build_model(tiny(), 1)
    path = save_checkpoint(p, None, tmp_path / "f.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC32 mismatch in tensor box.b"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 40)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    p = build_model(tiny(), 1)
    path = save_checkpoint(p, None, tmp_path / "g.ckpt")
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointError, match="body"):
        load_checkpoint(path)


def test_atomic_write_leaves_no_tmp(tmp_path):
    p = build_model(tiny(), 1)
    save_checkpoint(p, None, tmp_path / "h.ckpt")
    assert [f.name for f in tmp_path.iterdir()] == ["h.ckpt"]
