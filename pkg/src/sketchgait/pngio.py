"""PNG raster I/O. Float rasters live in [0,1]; 8-bit files are scaled by 255."""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def _open(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return img


def read_rgb(path) -> np.ndarray:
    img = _open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_gray(path) -> np.ndarray:
    img = _open(path)
    if img.mode == "I;16":
        return np.asarray(img, dtype=np.float64) / 65535.0
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return (read_gray(path) >= 0.5).astype(np.uint8)


def read_labels(path) -> np.ndarray:
    """Paletted PNGs yield palette indices, gray PNGs their raw values."""
    img = _open(path)
    if img.mode not in ("P", "L", "I", "I;16"):
        raise DataError(f"label map {path} has mode {img.mode}; expected P or L")
    return np.asarray(img, dtype=np.int64)


def to_u8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path, data: np.ndarray) -> None:
    Image.fromarray(to_u8(data)).save(Path(path))


def write_rgb(path, data: np.ndarray) -> None:
    Image.fromarray(to_u8(data)).save(Path(path))


def write_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError("label values must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8)).save(Path(path))
