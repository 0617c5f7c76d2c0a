"""8-bit PNG in/out.

Images live in memory as float64 ``(h, w, 3)`` arrays in ``[0, 1]``; masks as
boolean ``(h, w)`` arrays.  ``to_bytes(from_bytes(x)) == x`` for any 8-bit
image, so untouched pixels survive a read/write cycle exactly.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, IOFailure, ShapeError
from .tensorfile import atomic_write_bytes

MASK_THRESHOLD = 128


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def _open(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except FileNotFoundError as exc:
        raise IOFailure(f"no such file: {path}") from exc
    except OSError as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def read_rgb(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as RGB; ``size=(w, h)`` resizes (bicubic) when it differs."""
    im = _open(path).convert("RGB")
    if size is not None and im.size != tuple(size):
        im = im.resize(tuple(size), Image.BICUBIC)
    return dequantize(np.asarray(im))


def read_mask(path) -> np.ndarray:
    im = _open(path).convert("L")
    return np.asarray(im) >= MASK_THRESHOLD


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_rgb(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) image, got {img.shape}")
    atomic_write_bytes(path, png_bytes(quantize(img)))


def write_gray_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    atomic_write_bytes(path, png_bytes(arr))


def write_mask(path, mask: np.ndarray) -> None:
    write_gray_png(path, np.where(mask, 255, 0).astype(np.uint8))


_FRAME_RE = re.compile(r"^frame_(\d{4})\.png$")


def list_frames(directory) -> list[Path]:
    """Numbered ``frame_%04d.png`` files in index order; gaps are an error."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IOFailure(f"not a directory: {directory}")
    found = {}
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise InputError(f"no frame_%04d.png files in {directory}")
    order = sorted(found)
    if order != list(range(order[0], order[0] + len(order))):
        raise InputError(f"frame numbering in {directory} has gaps")
    return [found[i] for i in order]


def frame_name(i: int) -> str:
    return f"frame_{i:04d}.png"
