"""``GECK`` checkpoint container.

Layout: magic ``GECK``, u32 version, u64 header length, a UTF-8 JSON header,
then the raw little-endian tensor payloads back to back.  The header holds
free-form metadata plus an ordered tensor table of name, dtype, shape and
byte offset (relative to the payload start).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MagicMismatch, ShapeMismatch, TruncatedPayload, VersionMismatch

MAGIC = b"GECK"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint64": "<u8", "uint32": "<u4"}


def save(path, tensors: dict, meta: dict | None = None):
    """Write named arrays and JSON-serialisable ``meta``."""
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise FormatError(f"unsupported dtype {key} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        table.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load(path):
    """Return ``(tensors, meta)``; raises a :class:`FormatError` subclass on any defect."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise MagicMismatch(f"{path}: not a GECK checkpoint (magic {raw[:4]!r})")
    if len(raw) < 16:
        raise TruncatedPayload(f"{path}: header truncated")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if len(raw) < 16 + hlen:
        raise TruncatedPayload(f"{path}: header truncated")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        table = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    payload = memoryview(raw)[16 + hlen:]
    expected = sum(t["nbytes"] for t in table)
    if len(payload) != expected:
        raise TruncatedPayload(f"{path}: payload has {len(payload)} bytes, header lists {expected}")
    tensors = {}
    for t in table:
        dt = np.dtype(_DTYPES.get(t["dtype"], "V"))
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if count * dt.itemsize != t["nbytes"] or t["offset"] + t["nbytes"] > len(payload):
            raise ShapeMismatch(f"{path}: tensor {t['name']} shape {t['shape']} disagrees with its size")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(t["dtype"])
    return tensors, header["meta"]


def split(tensors: dict, prefix: str) -> dict:
    """Sub-dictionary of entries named ``prefix/...`` with the prefix removed."""
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def join(**groups) -> dict:
    return {f"{g}/{k}": v for g, d in groups.items() if d for k, v in d.items()}


def model_meta(model) -> dict:
    return {
        "net": model.net.as_dict(),
        "diffusion": model.diffusion.as_dict(),
        "conditioning": model.conditioning,
        "normalization": model.normalization.as_dict(),
        "camera": None if model.camera is None else model.camera.as_dict(),
        "frustum": model.frustum,
        "image_channels": model.image_channels,
        "feature_channels": list(model.feature_channels),
        "max_points": model.max_points,
    }


def model_from_meta(meta: dict, params: dict):
    from .diffusion import DiffusionConfig
    from .errors import StructuralError
    from .geometry import CameraIntrinsics, NormalizationStats
    from .model import ScoreModel
    from .scorenet import NetConfig

    cam = meta.get("camera")
    try:
        return ScoreModel(NetConfig(**meta["net"]), DiffusionConfig(**meta["diffusion"]), params,
                          meta["conditioning"], NormalizationStats.from_dict(meta["normalization"]),
                          None if cam is None else CameraIntrinsics(**cam), meta["frustum"],
                          meta["image_channels"], tuple(meta["feature_channels"]), meta["max_points"])
    except (StructuralError, KeyError) as exc:
        raise ShapeMismatch(f"checkpoint tensors disagree with its configuration: {exc}") from None


def save_model(path, model, ema: dict | None = None, extra_tensors: dict | None = None,
               meta: dict | None = None):
    """Model weights (``params/``), optional EMA shadow (``ema/``) and extra groups."""
    tensors = join(params=model.params, ema=ema)
    tensors.update(extra_tensors or {})
    save(path, tensors, {"model": model_meta(model), **(meta or {})})


def load_model(path, use_ema: bool = True):
    """Return ``(model, tensors, meta)``; the model carries the EMA weights when present."""
    tensors, meta = load(path)
    params, ema = split(tensors, "params"), split(tensors, "ema")
    if "model" not in meta:
        raise FormatError(f"{path}: checkpoint has no model configuration")
    model = model_from_meta(meta["model"], ema if use_ema and ema else params)
    return model, tensors, meta
