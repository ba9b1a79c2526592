"""File formats: binary PGM images (+ sidecar masks), DFLD displacement
fields, plain-text minutiae and seam lists.

Layouts
-------
PGM   ``P5`` header, maxval 255, one byte per pixel.  A sidecar mask is a PGM of
      the same size where 255 marks foreground; no sidecar means all foreground.
DFLD  ``b"DFLD"``, little-endian uint32 width, uint32 height, then the dx plane
      and the dy plane, each row-major little-endian float32.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import DisplacementField, GrayImage

DFLD_MAGIC = b"DFLD"


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


def _pgm_tokens(data: bytes, count: int):
    """Yield header tokens and the offset right after the last one."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}") from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PGM size {width}x{height}")
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise FormatError(f"PGM raster truncated at byte {offset + len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def mask_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".mask.pgm")


def read_image(path, mask_path=None) -> GrayImage:
    """Read a PGM and its sidecar mask (``<stem>.mask.pgm``) if present."""
    path = Path(path)
    pixels = decode_pgm(path.read_bytes())
    mpath = Path(mask_path) if mask_path is not None else mask_path_for(path)
    mask = None
    if mpath.exists():
        m = decode_pgm(mpath.read_bytes())
        if m.shape != pixels.shape:
            raise FormatError(f"mask {mpath} is {m.shape}, image is {pixels.shape}")
        mask = m >= 128
    return GrayImage(pixels, mask)


def write_image(path, image: GrayImage, write_mask: Optional[bool] = None) -> None:
    """Write pixels as PGM; the sidecar mask is written unless the mask is
    all foreground (or ``write_mask`` forces the choice)."""
    path = Path(path)
    path.write_bytes(encode_pgm(image.pixels))
    if write_mask is None:
        write_mask = not bool(image.mask.all())
    if write_mask:
        mask_path_for(path).write_bytes(encode_pgm(np.where(image.mask, 255, 0)))
    elif mask_path_for(path).exists():
        os.remove(mask_path_for(path))


def encode_dfld(field: DisplacementField) -> bytes:
    header = DFLD_MAGIC + struct.pack("<II", field.width, field.height)
    return (
        header
        + field.dx.astype("<f4").tobytes(order="C")
        + field.dy.astype("<f4").tobytes(order="C")
    )


def decode_dfld(data: bytes) -> DisplacementField:
    if len(data) < 12 or data[:4] != DFLD_MAGIC:
        raise FormatError(f"bad DFLD magic {data[:4]!r}")
    width, height = struct.unpack("<II", data[4:12])
    n = width * height
    expected = 12 + 8 * n
    if len(data) != expected:
        raise FormatError(f"DFLD payload is {len(data)} bytes, expected {expected}")
    planes = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    dx = planes[:n].reshape(height, width)
    dy = planes[n:].reshape(height, width)
    if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
        raise FormatError("DFLD contains non-finite values")
    return DisplacementField(dx, dy)


def read_field(path) -> DisplacementField:
    return decode_dfld(Path(path).read_bytes())


def write_field(path, field: DisplacementField) -> None:
    Path(path).write_bytes(encode_dfld(field))


def read_minutiae(path):
    """Parse ``x y theta kind`` lines; blank lines and ``#`` comments skipped."""
    from .initreg import Minutia

    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 'x y theta kind'")
        try:
            x, y, theta = (float(p) for p in parts[:3])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from None
        kind = parts[3] if len(parts) == 4 else "unknown"
        out.append(Minutia(x, y, theta, kind))
    return out


def write_minutiae(path, minutiae) -> None:
    lines = [f"{m.x:.3f} {m.y:.3f} {m.theta:.6f} {m.kind}" for m in minutiae]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_seam(path, seam: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(f"{int(x)} {int(y)}\n" for x, y in seam))


def read_seam(path) -> list[tuple[int, int]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'x y'")
        out.append((int(parts[0]), int(parts[1])))
    return out


def seam_overlay(image: GrayImage, seam: Iterable[Sequence[int]]) -> GrayImage:
    """Copy of ``image`` with the seam drawn at intensity 255."""
    px = image.pixels.copy()
    for x, y in seam:
        px[int(y), int(x)] = 255
    return GrayImage(px, image.mask)
