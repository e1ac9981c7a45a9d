"""PNG / binary PPM output for float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise DimensionError(f"expected H x W or H x W x 3 image, got {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img) -> None:
    """Binary P6 with maxval 255; grayscale input is written as gray RGB."""
    data = to_uint8(img)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_image(path, img) -> None:
    """Pick the format from the file suffix (.png or .ppm)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise ValueError(f"unsupported image format {suffix!r} (use .png or .ppm)")
