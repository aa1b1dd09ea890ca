"""On-disk tensor and image formats.

PTF1 is the kit-wide binary tensor file: the 4-byte magic ``PTF1``, a u32
little-endian rank, ``rank`` u32 little-endian dims, then the row-major
float32 payload. Every module uses it for fixtures and dumps. PGM (P5) and
PPM (P6) writers cover grayscale/RGB image renderings.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PTF1"


def write_ptf(path: str | Path, array: np.ndarray) -> None:
    """Write an array as PTF1. Data is stored as little-endian float32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_ptf(path: str | Path) -> np.ndarray:
    """Read a PTF1 file back into a float32 array."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated dims (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - header_end} bytes, expected {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return data.reshape(shape).copy()


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a single-channel image in [0,1] as binary PGM (P5)."""
    if image.ndim != 2:
        raise FormatError(f"PGM wants a 2-d image, got shape {image.shape}")
    data = _to_u8(image)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an HxWx3 image in [0,1] as binary PPM (P6)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM wants an HxWx3 image, got shape {image.shape}")
    data = _to_u8(image)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
