"""File codecs: canonical JSON, PNG, PFM, OBJ, and atomic writes.

Canonical JSON uses sorted keys, compact separators and 9-significant-digit
float formatting so that load -> save round trips are byte identical.
"""

import json
import math
import os
import struct
import tempfile

import numpy as np
from PIL import Image

from .errors import DataFormatError


def _format_float(x):
    if not math.isfinite(x):
        raise DataFormatError(f"non-finite float in canonical JSON: {x!r}")
    if x == 0.0:
        return "0"
    s = "%.9g" % x
    return s


def canonical_json_dumps(obj):
    """Serialize with sorted keys and %.9g floats; deterministic bytes."""
    out = []
    _encode(obj, out)
    return "".join(out)


def _encode(obj, out):
    if obj is None or obj is True or obj is False:
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise DataFormatError("canonical JSON keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)) or (
        isinstance(obj, np.ndarray) and obj.ndim >= 1
    ):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise DataFormatError(f"cannot canonically serialize {type(obj).__name__}")


def atomic_write_bytes(path, data):
    """Write via temp file + rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_png(path, rgb):
    """rgb: (H, W, 3) floats in [0, 1]; stored as 8-bit RGB."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataFormatError(f"expected (H, W, 3) image, got {rgb.shape}")
    if not np.isfinite(rgb).all():
        raise DataFormatError("non-finite pixels in image")
    quant = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(quant, mode="RGB")
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path):
    """Returns (H, W, 3) float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_pfm(path, data):
    """Single-channel PFM, little-endian float32, rows bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DataFormatError(f"PFM writer expects (H, W), got {data.shape}")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = data[::-1].astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise DataFormatError(f"not a single-channel PFM file: {magic!r}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataFormatError("malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        count = w * h
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise DataFormatError("truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=endian).reshape(h, w)
    return arr[::-1].astype(np.float32)


def write_obj(path, vertices, faces):
    """ASCII Wavefront OBJ with v/f records (1-based face indices)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = []
    for v in vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for f in faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path):
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


HEADER_LEN_STRUCT = struct.Struct("<Q")
