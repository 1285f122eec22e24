"""Image file I/O: binary PGM (P5) read/write, PNG read, heat-map export.

All loaders return float32 arrays scaled to [0, 1]; color inputs are
converted to grayscale with ITU-R BT.601 luma weights.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace/comment-separated header integers."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("malformed image: truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            try:
                tokens.append(int(data[i:j]))
            except ValueError:
                raise ValueError("malformed image: bad PGM header token") from None
            i = j
    return tokens, i


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5), 8- or 16-bit, scaled to [0, 1] float32."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError("malformed image: not a binary PGM (P5) file")
    (width, height, maxval), end = _read_pgm_tokens(data[2:], 3)
    end += 2
    if width < 1 or height < 1 or maxval < 1:
        raise ValueError("malformed image: bad PGM dimensions")
    if maxval > 65535:
        raise ValueError(f"unsupported bit depth: maxval {maxval} > 16 bit")
    # single whitespace byte separates header from raster
    end += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[end : end + need]
    if len(raster) < need:
        raise ValueError("malformed image: truncated PGM raster")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return (pixels.astype(np.float32) / maxval).astype(np.float32)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write an 8-bit binary PGM; intensities clipped to [0, 1]."""
    values = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)
    raster = values.astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + raster.tobytes())


def write_heatmap_pgm(path: str | Path, response_map: np.ndarray) -> None:
    """Export a response map as P5 after min-max scaling to [0, 255]."""
    values = np.asarray(response_map, dtype=np.float64)
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    write_pgm(path, scaled)


def _gray_from_rgb(rgb: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
                return (_gray_from_rgb(arr) / 255.0).astype(np.float32)
            if im.mode == "L":
                return (np.asarray(im, dtype=np.float32) / 255.0).astype(np.float32)
            if im.mode in ("I", "I;16"):
                return (np.asarray(im, dtype=np.float32) / 65535.0).astype(np.float32)
            raise ValueError(f"unsupported PNG mode: {im.mode}")
    except UnidentifiedImageError:
        raise ValueError("malformed image: unreadable PNG") from None


def load_image(path: str | Path) -> np.ndarray:
    """Load a PGM (P5) or PNG file as a [0, 1] float32 grayscale image."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic.startswith(b"P5"):
        return read_pgm(path)
    if magic.startswith(b"\x89PNG"):
        return read_png(path)
    raise ValueError(f"malformed image: unrecognized format in {path.name}")
