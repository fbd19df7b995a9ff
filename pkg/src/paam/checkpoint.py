"""Versioned single-file checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"PAAMCKPT"
    offset 8   uint32    format version
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, no insignificant whitespace
    offset 20+H          array payload

The header holds ``meta`` (network description, attention layout, activation,
schedule phase, run configuration and free-form extras) and ``arrays``, a map
from array name to ``{"dtype", "shape", "offset", "nbytes"}``. Offsets are
relative to the payload start and every array begins on an 8-byte boundary
(zero padding in between). Arrays are stored C-contiguous in little-endian
byte order. Writing the same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn
from .analysis import atomic_write_bytes
from .cnn import Network
from .scoring import ActivationSpec, KQAttention, VanillaAttention
from .tensor import Tensor

MAGIC = b"PAAMCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net: Network
    attention: list | None = None
    scores: list[np.ndarray] | None = None
    phase: str = "Warmup"
    cycle: int = 0
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _attention_meta(an) -> dict:
    if isinstance(an, VanillaAttention):
        return {"variant": "vanilla", "layer_index": an.layer_index}
    return {"variant": "kq", "layer_index": an.layer_index, "alpha": an.alpha}


def _collect(ck: Checkpoint) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {f"net/{k}": v for k, v in cnn.state_arrays(ck.net).items()}
    meta = {
        "network": cnn.describe(ck.net),
        "phase": ck.phase,
        "cycle": int(ck.cycle),
        "activation": {"kind": ck.activation.kind, "a": ck.activation.a, "b": ck.activation.b},
        "config": ck.config,
        "extra": ck.extra,
        "attention": None,
        "num_scores": None,
    }
    if ck.attention is not None:
        meta["attention"] = [_attention_meta(an) for an in ck.attention]
        for l, an in enumerate(ck.attention):
            for name, arr in an.state().items():
                arrays[f"an/{l}/{name}"] = arr
    if ck.scores is not None:
        meta["num_scores"] = len(ck.scores)
        for l, s in enumerate(ck.scores):
            arrays[f"scores/{l}"] = np.asarray(s)
    return meta, arrays


def to_bytes(ck: Checkpoint) -> bytes:
    meta, arrays = _collect(ck)
    index, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        le = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        raw = le.tobytes()
        index[name] = {"dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":"),
                        allow_nan=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def save(ck: Checkpoint, path) -> Path:
    """Write ``ck`` to ``path`` atomically (temporary file, then rename)."""
    path = Path(path)
    atomic_write_bytes(path, to_bytes(ck))
    return path


def read_header(buf: bytes) -> tuple[int, dict, int]:
    """``(format_version, header, payload_offset)``; raises on bad magic or version."""
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"file too short for a checkpoint ({len(buf)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise CheckpointError("truncated header")
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    return version, header, start + hlen


def from_bytes(buf: bytes) -> Checkpoint:
    _, header, base = read_header(buf)
    arrays = {}
    for name, info in header["arrays"].items():
        lo = base + info["offset"]
        hi = lo + info["nbytes"]
        if hi > len(buf):
            raise CheckpointError(f"array {name} extends past end of file")
        arr = np.frombuffer(buf[lo:hi], dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    meta = header["meta"]
    net = cnn.from_state(meta["network"], {k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
    attention = None
    if meta["attention"] is not None:
        attention = []
        for l, am in enumerate(meta["attention"]):
            if am["variant"] == "vanilla":
                attention.append(VanillaAttention(Tensor(arrays[f"an/{l}/W_F"]), am["layer_index"]))
            else:
                attention.append(KQAttention(Tensor(arrays[f"an/{l}/W_Q"]), Tensor(arrays[f"an/{l}/W_K"]),
                                             am["alpha"], am["layer_index"]))
    scores = None
    if meta["num_scores"] is not None:
        scores = [arrays[f"scores/{l}"] for l in range(meta["num_scores"])]
    act = ActivationSpec(**meta["activation"])
    return Checkpoint(net, attention, scores, meta["phase"], meta["cycle"], act, meta["config"], meta["extra"])


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    return from_bytes(buf)
