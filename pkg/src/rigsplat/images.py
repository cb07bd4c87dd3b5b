"""Image files: 8-bit PNG and a lossless float dump.

Float dump layout (little-endian): 4-byte magic ``RSFI``, u32 version (1), u32
height, u32 width, u32 channels, then ``height*width*channels`` f32 values in
row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLOAT_MAGIC = b"RSFI"
FLOAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
GAMMA = 2.2


class ImageFileError(OSError):
    pass


def write_float_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FLOAT_MAGIC, FLOAT_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_float_image(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageFileError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ImageFileError(f"{path}: truncated header")
    magic, version, h, w, c = _HEADER.unpack_from(raw)
    if magic != FLOAT_MAGIC or version != FLOAT_VERSION:
        raise ImageFileError(f"{path}: not a float image (magic {magic!r}, version {version})")
    expected = _HEADER.size + 4 * h * w * c
    if len(raw) != expected:
        raise ImageFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float64)


def to_8bit(image: np.ndarray, srgb: bool) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if srgb:
        img = img ** (1.0 / GAMMA)
    return np.round(img * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray, srgb: bool = True) -> None:
    """Save a linear [0, 1] image; ``srgb`` applies the x^(1/2.2) display encoding."""
    data = to_8bit(image, srgb)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    Image.fromarray(data).save(path, format="PNG")


def read_png(path, srgb: bool = False) -> np.ndarray:
    """Load an 8-bit PNG as floats in [0, 1] (divided by 255, optionally decoded from sRGB)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot read {path}: {exc}") from exc
    img = data.astype(np.float64) / 255.0
    return img ** GAMMA if srgb else img


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= 128
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot read {path}: {exc}") from exc
