"""Binary and text formats: point-cloud batches, images, matrices, PLY.

All binary containers are little-endian with a 4-byte magic:

* ``PCB1`` point-cloud batch: u32 B, N, D then B*N*D float32
* ``IMG1`` image grid:        u32 H, W, C then H*W*C float32
* ``MTX1`` matrix:            u32 rows, cols then rows*cols float64
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MagicMismatch, TruncatedPayload


def _write(path, magic: bytes, dims, array, dtype):
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<" + "I" * len(dims), *dims))
        fh.write(data.tobytes())


def _read(path, magic: bytes, ndims, dtype):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise MagicMismatch(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise TruncatedPayload(f"{path}: header truncated")
    dims = struct.unpack("<" + "I" * ndims, raw[4:head])
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) - head != expected:
        raise TruncatedPayload(f"{path}: payload has {len(raw) - head} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dt, offset=head).reshape(dims).astype(dtype)


def write_pcb(path, clouds):
    clouds = np.asarray(clouds)
    if clouds.ndim == 2:
        clouds = clouds[None]
    _write(path, b"PCB1", clouds.shape, clouds, np.float32)


def read_pcb(path) -> np.ndarray:
    """(B, N, D) float32 batch."""
    return _read(path, b"PCB1", 3, np.float32)


def write_img1(path, image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    _write(path, b"IMG1", image.shape, image, np.float32)


def read_img1(path) -> np.ndarray:
    return _read(path, b"IMG1", 3, np.float32)


def write_mtx1(path, matrix):
    matrix = np.asarray(matrix)
    _write(path, b"MTX1", matrix.shape, matrix, np.float64)


def read_mtx1(path) -> np.ndarray:
    return _read(path, b"MTX1", 2, np.float64)


def write_ply(path, points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{x:.7g} {y:.7g} {z:.7g}" for x, y, z in points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise MagicMismatch(f"{path}: not a PLY file")
    end = text.index("end_header")
    count = next(int(t.split()[2]) for t in text[:end] if t.startswith("element vertex"))
    rows = [list(map(float, t.split()[:3])) for t in text[end + 1:end + 1 + count]]
    if len(rows) != count:
        raise TruncatedPayload(f"{path}: expected {count} vertices, found {len(rows)}")
    return np.asarray(rows)


def _pnm_tokens(data: bytes, count: int, start: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i = [], start
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i


def read_pnm(path) -> np.ndarray:
    """PGM/PPM (P2, P3, P5, P6) as an (H, W, C) float array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise MagicMismatch(f"{path}: unsupported PNM magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (w, h, maxval), pos = _pnm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        values, _ = _pnm_tokens(data, count, pos) if count else ([], pos)
        arr = np.array([int(v) for v in values], dtype=float)
    else:
        pos += 1
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dt.itemsize
        if len(data) - pos < need:
            raise TruncatedPayload(f"{path}: binary raster truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).astype(float)
    if arr.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {arr.size}")
    return arr.reshape(h, w, channels) / maxval


def write_pnm(path, image, maxval=255, binary=True):
    """PGM (1 channel) or PPM (3 channels) from values in [0, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise FormatError("PNM supports 1 or 3 channels")
    raster = np.clip(np.rint(image * maxval), 0, maxval).astype(np.uint8)
    with open(path, "wb") as fh:
        if binary:
            fh.write(b"P5" if c == 1 else b"P6")
            fh.write(f"\n{w} {h}\n{maxval}\n".encode())
            fh.write(raster.tobytes())
        else:
            fh.write(b"P2" if c == 1 else b"P3")
            fh.write(f"\n{w} {h}\n{maxval}\n".encode())
            fh.write("\n".join(" ".join(map(str, row.reshape(-1))) for row in raster).encode() + b"\n")


def read_image(path) -> np.ndarray:
    """Dispatch on the first bytes: IMG1 grid or PGM/PPM."""
    head = Path(path).read_bytes()[:4]
    if head == b"IMG1":
        return read_img1(path)
    return read_pnm(path)
