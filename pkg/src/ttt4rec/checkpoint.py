"""Binary checkpoint format.

Layout: 8-byte magic ``TTT4REC1``; one UTF-8 JSON header line (version,
config digest, config, vocabulary, record count, payload SHA-256); then one
record per parameter: name length (u32 LE), name, dtype code (u8, 0 = f32),
rank (u8), dims (u32 LE each), raw little-endian values.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigMismatchError
from .model import ModelConfig, TTT4Rec

MAGIC = b"TTT4REC1"
VERSION = 1
_F32 = 0


def snap_to_float32(model):
    """Round every parameter to the float32 grid in place (what a checkpoint can hold)."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


def _encode_records(model):
    chunks = []
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BB", _F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path, items=None):
    """Write ``model`` to ``path``; parameters are snapped to float32 first."""
    snap_to_float32(model)
    payload = _encode_records(model)
    header = {
        "version": VERSION,
        "config_digest": model.config.digest(model.n_items),
        "config": model.config.to_dict(),
        "n_items": model.n_items,
        "items": list(items) if items is not None else None,
        "records": len(model.parameters()),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n"
    Path(path).write_bytes(MAGIC + line + payload)
    return path


def read_header(blob):
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a TTT4REC1 checkpoint (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    return header, end + 1


def _decode_records(payload, count):
    state = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        piece = payload[pos:pos + n]
        pos += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != _F32:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        state[name] = values.astype(np.float64)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after checkpoint records")
    return state


def load_checkpoint(path, config=None):
    """Restore a model; returns ``(model, header)``.

    With ``config`` given, its digest must match the stored one.
    """
    blob = Path(path).read_bytes()
    header, offset = read_header(blob)
    payload = blob[offset:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload is truncated or corrupted (checksum mismatch)")
    stored = ModelConfig.from_dict(header["config"])
    n_items = int(header["n_items"])
    if stored.digest(n_items) != header["config_digest"]:
        raise CheckpointError("checkpoint header digest does not match its config")
    if config is not None and config.digest(n_items) != header["config_digest"]:
        raise ConfigMismatchError("checkpoint was written for a different model configuration")
    state = _decode_records(payload, int(header["records"]))
    model = TTT4Rec(config or stored, n_items)
    model.load_state_dict(state)
    return model, header
