"""Float-image I/O: 8-bit PNG and binary PPM (P6), byte layouts in docs/formats.md."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidInputError


def float_to_u8(img: np.ndarray) -> np.ndarray:
    """Clamp a linear float image to [0,1] and quantize to 8 bits (round half up)."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {img.shape}")
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def u8_to_float(img: np.ndarray, dtype=np.float64) -> np.ndarray:
    return img.astype(dtype) / dtype(255.0)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(float_to_u8(img), mode="RGB").save(str(path), format="PNG")


def read_png(path, dtype=np.float64) -> np.ndarray:
    with PILImage.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8_to_float(arr, dtype)


def png_dimensions(path) -> tuple:
    """(width, height) from the header without decoding pixel data."""
    with PILImage.open(str(path)) as im:
        return im.size


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, maxval 255: 'P6\\n{w} {h}\\n255\\n' + row-major RGB bytes."""
    u8 = float_to_u8(img)
    h, w = u8.shape[:2]
    with open(str(path), "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path, dtype=np.float64) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise InvalidInputError(f"{path} is not a binary P6 PPM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise InvalidInputError("only maxval 255 is supported")
    pixels = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise InvalidInputError("truncated PPM payload")
    return u8_to_float(pixels.reshape(h, w, 3), dtype)
