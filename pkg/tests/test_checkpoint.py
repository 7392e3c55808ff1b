import struct

import numpy as np
import pytest

from kroute import checkpoint as ckpt
from kroute.fusion import RouterParams, StaticCoeffs, merge_experts
from kroute.lora import init_adapter

from helpers import random_experts


def test_adapter_roundtrip_bit_exact(tmp_path, tiny_config):
    ad = random_experts(tiny_config).ordered[2]
    p = tmp_path / "a.ckpt"
    ckpt.save_adapter(p, ad, tiny_config)
    back = ckpt.load_adapter(p)
    assert back.keys == ad.keys and back.rank == ad.rank and back.scale == ad.scale
    for k in ad.keys:
        assert back.A[k].data.tobytes() == ad.A[k].data.tobytes()
        assert back.B[k].data.tobytes() == ad.B[k].data.tobytes()
    assert back.checksum() == ad.checksum()
    assert not back.trainable


def test_backbone_roundtrip(tmp_path, tiny_backbone):
    p = tmp_path / "b.ckpt"
    ckpt.save_backbone(p, tiny_backbone)
    back = ckpt.load_backbone(p)
    assert back.content_hash() == tiny_backbone.content_hash()
    assert back.frozen and back.config == tiny_backbone.config


def test_router_static_merged_roundtrip(tmp_path, tiny_config):
    rng = np.random.default_rng(0)
    r = RouterParams.zeros(tiny_config.layers, tiny_config.d_model)
    r.W.data[...] = rng.normal(size=r.W.shape)
    ckpt.save_router(tmp_path / "r.ckpt", r)
    assert ckpt.load_router(tmp_path / "r.ckpt").checksum() == r.checksum()
    s = StaticCoeffs.init(tiny_config.layers)
    ckpt.save_static(tmp_path / "s.ckpt", s)
    assert ckpt.load_static(tmp_path / "s.ckpt").checksum() == s.checksum()
    merged = merge_experts(random_experts(tiny_config), "ties", 0.2)
    ckpt.save_merged(tmp_path / "m.ckpt", merged, "ties", 0.2)
    back, meta = ckpt.load_merged(tmp_path / "m.ckpt")
    assert meta == {"strategy": "ties", "density": 0.2}
    for k in merged:
        assert back[k].tobytes() == merged[k].tobytes()


def test_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "x.ckpt"
    ckpt.save_checkpoint(p, "static", {"gamma": arr})
    blob = p.read_bytes()
    assert blob[:4] == b"RDK1"
    (hlen,) = struct.unpack("<I", blob[4:8])
    payload = blob[8 + hlen:]
    assert payload == arr.astype("<f4").tobytes()
    ck = ckpt.load_checkpoint(p)
    assert ck.arrays["gamma"].tobytes() == arr.tobytes()


def test_flipped_byte_is_corruption(tmp_path, tiny_config):
    p = tmp_path / "a.ckpt"
    ckpt.save_adapter(p, init_adapter(tiny_config, 0, rank=4, scale=4))
    blob = bytearray(p.read_bytes())
    blob[-3] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(ckpt.CorruptCheckpoint):
        ckpt.load_adapter(p)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "x.ckpt"
    ckpt.save_checkpoint(p, "static", {"gamma": np.zeros(3, dtype=np.float32)})
    blob = p.read_bytes()
    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ckpt.CorruptCheckpoint):
        ckpt.load_checkpoint(tmp_path / "m.ckpt")
    hlen = struct.unpack("<I", blob[4:8])[0]
    header = blob[8:8 + hlen].replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "v.ckpt").write_bytes(blob[:8] + header + blob[8 + hlen:])
    with pytest.raises(ckpt.UnsupportedVersion):
        ckpt.load_checkpoint(tmp_path / "v.ckpt")


def test_kind_mismatch(tmp_path, tiny_backbone):
    p = tmp_path / "b.ckpt"
    ckpt.save_backbone(p, tiny_backbone)
    with pytest.raises(ckpt.KindMismatch):
        ckpt.load_adapter(p)


def test_only_float32(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.save_checkpoint(tmp_path / "x", "static", {"gamma": np.zeros(2)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.save_checkpoint(tmp_path / "x", "optimizer", {})
