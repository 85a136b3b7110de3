"""Portable JSON envelope for trained parameter sets.

Arrays are stored as base64 of their little-endian bytes, so a checkpoint
round-trips bit-exactly. Serialization is canonical (sorted keys, fixed
separators), which makes the content hash of a checkpoint a function of its
contents only.
"""
from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

from .errors import ValidationError

FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


def encode_array(a):
    a = np.ascontiguousarray(a)
    le = a.dtype.newbyteorder("<")
    if le not in _NAMES:
        raise ValidationError(f"cannot serialize arrays of dtype {a.dtype}")
    return {"shape": list(a.shape), "dtype": _NAMES[le],
            "data": base64.b64encode(a.astype(le).tobytes()).decode("ascii")}


def decode_array(obj):
    try:
        dtype = _DTYPES[obj["dtype"]]
        raw = base64.b64decode(obj["data"])
        return np.frombuffer(raw, dtype=dtype).reshape(obj["shape"]).astype(dtype.newbyteorder("="))
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidationError(f"malformed array record ({exc})") from None


def dumps(kind, config, arrays, **extra):
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
           "arrays": {k: encode_array(v) for k, v in arrays.items()}}
    doc.update(extra)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads(text, kind):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint is not valid JSON ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    if doc.get("kind") != kind:
        raise ValidationError(f"expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    doc["arrays"] = {k: decode_array(v) for k, v in doc["arrays"].items()}
    return doc


def sha256_hex(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise ValidationError(f"checkpoint file not found: {path}") from None


def write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
