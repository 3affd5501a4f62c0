"""Binary PPM images and raw float32 depth maps with JSON sidecars."""

from __future__ import annotations

import json
import os

import numpy as np


class FormatError(ValueError):
    """Malformed or truncated image/depth file."""


class MissingFileError(FileNotFoundError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as 8-bit binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H,W,3), got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H,W,3) float64 image in [0,1]."""
    if not os.path.exists(path):
        raise MissingFileError(path)
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (bad magic at byte 0)")
    # header: magic, width, height, maxval, separated by whitespace/comments
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(v) for v in fields)
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric header field") from e
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    need = width * height * 3
    pixels = raw[pos : pos + need]
    if len(pixels) < need:
        raise FormatError(
            f"{path}: truncated pixel data at byte {pos + len(pixels)}"
            f" (expected {need} bytes)")
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return data.astype(np.float64) / 255.0


def write_mask_ppm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).astype(bool)
    write_ppm(path, np.repeat(m[..., None].astype(np.float64), 3, axis=2))


def read_mask_ppm(path) -> np.ndarray:
    return read_ppm(path)[..., 0] > 0.5


def write_depth(path, depth: np.ndarray) -> None:
    """Raw little-endian float32 depth plus a JSON sidecar (path + '.json')."""
    d = np.ascontiguousarray(np.asarray(depth, dtype="<f4"))
    if d.ndim != 2:
        raise ValueError(f"expected (H,W) depth, got {d.shape}")
    with open(path, "wb") as f:
        f.write(d.tobytes())
    meta = {
        "width": int(d.shape[1]), "height": int(d.shape[0]),
        "dtype": "float32", "order": "row-major",
        "min": float(d.min()), "max": float(d.max()),
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f)


def read_depth(path) -> np.ndarray:
    sidecar = str(path) + ".json"
    if not os.path.exists(path) or not os.path.exists(sidecar):
        raise MissingFileError(path)
    with open(sidecar) as f:
        meta = json.load(f)
    with open(path, "rb") as f:
        raw = f.read()
    need = meta["width"] * meta["height"] * 4
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(meta["height"], meta["width"]).copy()
