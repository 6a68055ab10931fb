"""Binary checkpoint format.

Layout: 8-byte magic ``SAPOCKPT``, uint32 little-endian header length, UTF-8
JSON header, then ``param_count`` little-endian float64 policy parameters and,
when ``includes_ema`` is set, ``param_count`` more for the EMA shadow.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .model import PolicyModel, model_from_shapes

MAGIC = b"SAPOCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: PolicyModel
    ema_shadow: np.ndarray | None
    header: dict


def encode(model: PolicyModel, ema_shadow=None, rng_note: str = "") -> bytes:
    params = model.get_params()
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "shapes": model.shapes(),
        "vocab_size": model.vocab_size,
        "param_count": int(params.size),
        "includes_ema": ema_shadow is not None,
        "rng_note": rng_note,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = params.astype("<f8").tobytes()
    if ema_shadow is not None:
        shadow = np.asarray(ema_shadow, dtype=np.float64)
        if shadow.shape != params.shape:
            raise ValueError("EMA shadow length differs from the parameter count")
        body += shadow.astype("<f8").tobytes()
    return MAGIC + struct.pack("<I", len(head)) + head + body


def save(path: str | Path, model: PolicyModel, ema_shadow=None, rng_note: str = "") -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = encode(model, ema_shadow, rng_note)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise DataFormatError("not a checkpoint: bad magic")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise DataFormatError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        n = int(header["param_count"])
        with_ema = bool(header["includes_ema"])
        kind, shapes = header["model_kind"], header["shapes"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"checkpoint header unreadable: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {header.get('format_version')}")
    expected = 12 + hlen + 8 * n * (2 if with_ema else 1)
    if len(blob) != expected:
        raise DataFormatError(f"checkpoint length {len(blob)} != expected {expected}")
    try:
        model = model_from_shapes(kind, shapes)
    except Exception as exc:
        raise DataFormatError(f"checkpoint model description invalid: {exc}") from None
    if model.param_count != n:
        raise DataFormatError("checkpoint shapes disagree with param_count")
    data = np.frombuffer(blob, dtype="<f8", offset=12 + hlen).astype(np.float64)
    model.set_params(data[:n])
    return Checkpoint(model, data[n:].copy() if with_ema else None, header)


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(model: PolicyModel) -> str:
    return hashlib.sha256(model.get_params().astype("<f8").tobytes()).hexdigest()
