"""Self-describing binary container for every parameter kind.

Layout::

    b"RDK1" | uint32 LE header length | UTF-8 JSON header | payload

The payload is the little-endian float32 tensors back to back, in manifest
order. ``content_hash`` is the SHA-256 of the payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneWeights, ModelConfig
from .fusion import RouterParams, StaticCoeffs
from .lora import LoraAdapter
from .numerics import Tensor

MAGIC = b"RDK1"
FORMAT_VERSION = 1
KINDS = ("backbone", "adapter", "router", "static", "ties-merged")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class KindMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    model_config: dict | None
    meta: dict
    content_hash: str


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray],
                    model_config: ModelConfig | dict | None = None, meta: dict | None = None) -> str:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}; checkpoints hold float32 only")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    if isinstance(model_config, ModelConfig):
        model_config = asdict(model_config)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model_config": model_config,
        "meta": meta or {},
        "tensors": manifest,
        "content_hash": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return header["content_hash"]


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: unsupported format version {header.get('format_version')}")
    kind = header["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatch(f"{path}: expected a {expected_kind} checkpoint, found {kind}")
    payload = blob[8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["content_hash"]:
        raise CorruptCheckpoint(f"{path}: content hash mismatch")
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=_DTYPE, count=n, offset=start)
        arrays[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return Checkpoint(kind, arrays, header.get("model_config"), header.get("meta", {}),
                      header["content_hash"])


# ---------------------------------------------------------------- typed helpers


def save_backbone(path, weights: BackboneWeights) -> str:
    return save_checkpoint(path, "backbone", {n: t.data for n, t in weights.params.items()},
                           weights.config, {"frozen": weights.frozen})


def load_backbone(path) -> BackboneWeights:
    ck = load_checkpoint(path, "backbone")
    cfg = ModelConfig.from_dict(ck.model_config)
    weights = BackboneWeights(cfg, {n: Tensor(a) for n, a in ck.arrays.items()})
    if ck.meta.get("frozen", True):
        weights.freeze()
    return weights


def save_adapter(path, adapter: LoraAdapter, model_config: ModelConfig | None = None) -> str:
    return save_checkpoint(path, "adapter", adapter.named_arrays(), model_config,
                           {"rank": adapter.rank, "scale": adapter.scale, "expert": adapter.kind})


def load_adapter(path) -> LoraAdapter:
    ck = load_checkpoint(path, "adapter")
    adapter = LoraAdapter.from_arrays(ck.arrays, int(ck.meta["rank"]), float(ck.meta["scale"]),
                                      ck.meta.get("expert", ""))
    adapter.freeze()
    return adapter


def save_router(path, router: RouterParams, model_config=None) -> str:
    return save_checkpoint(path, "router", router.named_arrays(), model_config,
                           {"experts": ["base", "high", "fine"]})


def load_router(path) -> RouterParams:
    ck = load_checkpoint(path, "router")
    return RouterParams(Tensor(ck.arrays["W"]), Tensor(ck.arrays["b"]))


def save_static(path, coeffs: StaticCoeffs, model_config=None) -> str:
    return save_checkpoint(path, "static", coeffs.named_arrays(), model_config,
                           {"experts": ["base", "high", "fine"]})


def load_static(path) -> StaticCoeffs:
    ck = load_checkpoint(path, "static")
    return StaticCoeffs(Tensor(ck.arrays["gamma"]))


def save_merged(path, merged: dict, strategy: str, density: float | None = None, model_config=None) -> str:
    arrays = {f"l{l}.{name}": np.asarray(v, dtype=np.float32) for (l, name), v in merged.items()}
    return save_checkpoint(path, "ties-merged", arrays, model_config,
                           {"strategy": strategy, "density": density})


def load_merged(path) -> tuple[dict, dict]:
    ck = load_checkpoint(path, "ties-merged")
    merged = {}
    for name, arr in ck.arrays.items():
        layer, proj = name.split(".")
        merged[(int(layer[1:]), proj)] = arr
    return merged, ck.meta
