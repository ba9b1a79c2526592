"""Rasters shared by every stage: images with validity masks, displacement
fields, orientation fields, and the warping / similarity primitives.

Field convention (used everywhere in the package): a displacement field is a
*backward* map.  For each pixel ``p`` of the reference grid, ``p + D(p)`` is the
location to sample in the input image, so ``warp(input, D)`` lands the input on
the reference grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "GrayImage",
    "DisplacementField",
    "OrientationField",
    "round_half_away",
    "warp_nearest",
    "warp_bilinear",
    "sample_field",
    "transform_points",
    "compose_fields",
    "invert_field",
    "correlation_coefficient",
    "estimate_orientation",
    "UNRELIABLE_COHERENCE",
]

UNRELIABLE_COHERENCE = 0.1
SNAP_TOLERANCE = 1e-9  # px


@dataclass(frozen=True)
class GrayImage:
    """8-bit single-channel raster plus a foreground mask.

    ``pixels`` is a ``(height, width)`` uint8 array; ``mask`` a boolean array of
    the same shape (True = valid ridge area).  Both are copied and made
    read-only on construction.
    """

    pixels: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(~np.isfinite(px)) or px.min(initial=0) < 0 or px.max(initial=0) > 255:
                raise ValueError("intensities must lie in [0, 255]")
            px = round_half_away(px).astype(np.uint8)
        px = px.copy()
        if self.mask is None:
            mask = np.ones(px.shape, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != px.shape:
                raise ValueError(f"mask shape {mask.shape} != pixel shape {px.shape}")
        px.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def from_float(cls, values: np.ndarray, mask: Optional[np.ndarray] = None) -> "GrayImage":
        """Clip to [0, 255] and round half away from zero."""
        return cls(round_half_away(np.clip(values, 0.0, 255.0)).astype(np.uint8), mask)

    def with_mask(self, mask: np.ndarray) -> "GrayImage":
        return GrayImage(self.pixels, mask)

    def masked_pixels(self) -> np.ndarray:
        """Pixels with background forced to zero."""
        return np.where(self.mask, self.pixels, 0).astype(np.uint8)

    def crop(self, x0: int, y0: int, width: int, height: int) -> "GrayImage":
        return GrayImage(
            self.pixels[y0:y0 + height, x0:x0 + width],
            self.mask[y0:y0 + height, x0:x0 + width],
        )

    def pad(self, left: int, top: int, right: int, bottom: int) -> "GrayImage":
        widths = ((top, bottom), (left, right))
        return GrayImage(np.pad(self.pixels, widths), np.pad(self.mask, widths))

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels) and np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement ``(dx, dy)`` in pixels, both ``(height, width)``."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64)
        dy = np.array(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"dx {dx.shape} and dy {dy.shape} must be equal 2-D rasters")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("displacement field contains non-finite values")
        dx.setflags(write=False)
        dy.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, dx: float, dy: float) -> "DisplacementField":
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def stack(self) -> np.ndarray:
        """``(2, height, width)`` array, channel 0 = dx."""
        return np.stack([self.dx, self.dy])

    def crop(self, x0: int, y0: int, width: int, height: int) -> "DisplacementField":
        return DisplacementField(
            self.dx[y0:y0 + height, x0:x0 + width], self.dy[y0:y0 + height, x0:x0 + width]
        )

    def __neg__(self) -> "DisplacementField":
        return DisplacementField(-self.dx, -self.dy)

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        _check_same(self.shape, other.shape)
        return DisplacementField(self.dx + other.dx, self.dy + other.dy)

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return np.array_equal(self.dx, other.dx) and np.array_equal(self.dy, other.dy)

    __hash__ = None


@dataclass(frozen=True)
class OrientationField:
    """Ridge orientation in [0, pi) and coherence in [0, 1] per cell.

    A cell covers ``block_size x block_size`` pixels; ``block_size == 1`` means
    a dense, per-pixel field.
    """

    theta: np.ndarray
    coherence: np.ndarray
    block_size: int = 1

    def __post_init__(self):
        theta = np.mod(np.asarray(self.theta, dtype=np.float64), np.pi)
        # mod can return exactly pi for tiny negative inputs
        theta[theta >= np.pi] = 0.0
        coh = np.clip(np.asarray(self.coherence, dtype=np.float64), 0.0, 1.0)
        if theta.shape != coh.shape:
            raise ValueError("theta and coherence shapes differ")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "coherence", coh)

    @property
    def reliable(self) -> np.ndarray:
        return self.coherence >= UNRELIABLE_COHERENCE

    def to_pixels(self, height: int, width: int) -> "OrientationField":
        """Expand a block field to a dense one by cell replication."""
        if self.block_size == 1 and self.theta.shape == (height, width):
            return self
        rows = np.minimum(np.arange(height) // self.block_size, self.theta.shape[0] - 1)
        cols = np.minimum(np.arange(width) // self.block_size, self.theta.shape[1] - 1)
        return OrientationField(
            self.theta[np.ix_(rows, cols)], self.coherence[np.ix_(rows, cols)], 1
        )


def _check_same(a, b):
    if tuple(a) != tuple(b):
        raise ValueError(f"dimension mismatch: {tuple(a)} vs {tuple(b)}")


def round_half_away(values):
    """Round to nearest integer, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _snap(c):
    # round-off residue (e.g. a spline fitted to identical points) must not
    # push a border sample outside the raster
    r = np.round(c)
    return np.where(np.abs(c - r) < SNAP_TOLERANCE, r, c)


def _source_coords(field: DisplacementField):
    ys, xs = np.mgrid[0:field.height, 0:field.width]
    return _snap(xs + field.dx), _snap(ys + field.dy)


def warp_nearest(image: GrayImage, field: DisplacementField) -> GrayImage:
    """Resample ``image`` at ``p + D(p)`` using nearest-neighbour lookup.

    Sources falling outside the raster are masked out (pixel value 0).
    """
    _check_same(image.shape, field.shape)
    sx, sy = _source_coords(field)
    ix = round_half_away(sx).astype(np.int64)
    iy = round_half_away(sy).astype(np.int64)
    inside = (ix >= 0) & (ix < image.width) & (iy >= 0) & (iy < image.height)
    cx = np.clip(ix, 0, image.width - 1)
    cy = np.clip(iy, 0, image.height - 1)
    mask = inside & image.mask[cy, cx]
    pixels = np.where(inside, image.pixels[cy, cx], 0).astype(np.uint8)
    return GrayImage(pixels, mask)


def _bilinear_taps(sx, sy, width, height):
    inside = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)
    x0 = np.clip(np.floor(sx), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    return inside, x0, y0, x1, y1, fx, fy


def _bilinear(values, sx, sy):
    h, w = values.shape
    inside, x0, y0, x1, y1, fx, fy = _bilinear_taps(sx, sy, w, h)
    out = (
        values[y0, x0] * (1 - fx) * (1 - fy)
        + values[y0, x1] * fx * (1 - fy)
        + values[y1, x0] * (1 - fx) * fy
        + values[y1, x1] * fx * fy
    )
    return out, inside


def warp_bilinear(image: GrayImage, field: DisplacementField) -> GrayImage:
    """Resample ``image`` at ``p + D(p)`` with bilinear interpolation.

    A pixel stays in the foreground only if every tap carrying non-zero weight
    is foreground.
    """
    _check_same(image.shape, field.shape)
    sx, sy = _source_coords(field)
    h, w = image.shape
    inside, x0, y0, x1, y1, fx, fy = _bilinear_taps(sx, sy, w, h)
    v = image.pixels.astype(np.float64)
    out = (
        v[y0, x0] * (1 - fx) * (1 - fy)
        + v[y0, x1] * fx * (1 - fy)
        + v[y1, x0] * (1 - fx) * fy
        + v[y1, x1] * fx * fy
    )
    m = image.mask
    mask = (
        inside
        & (m[y0, x0] | ((1 - fx) * (1 - fy) == 0))
        & (m[y0, x1] | (fx * (1 - fy) == 0))
        & (m[y1, x0] | ((1 - fx) * fy == 0))
        & (m[y1, x1] | (fx * fy == 0))
    )
    out = np.where(inside, out, 0.0)
    return GrayImage.from_float(out, mask)


def sample_field(field: DisplacementField, x: float, y: float) -> tuple[float, float]:
    """Bilinearly interpolated field value at a (possibly fractional) point."""
    if not (0 <= x <= field.width - 1 and 0 <= y <= field.height - 1):
        raise ValueError(f"point ({x}, {y}) lies outside the {field.width}x{field.height} field")
    sx, sy = np.array([x], float), np.array([y], float)
    vx, _ = _bilinear(field.dx, sx, sy)
    vy, _ = _bilinear(field.dy, sx, sy)
    return float(vx[0]), float(vy[0])


def transform_points(
    field: DisplacementField, points: Iterable[Sequence[float]]
) -> list[tuple[float, float]]:
    """Move each point by the field value at its location.

    Integer points read the field directly; fractional points are
    bilinearly interpolated.  Raises ``ValueError`` naming the first point
    that falls outside the field.
    """
    out = []
    for x, y in points:
        vx, vy = sample_field(field, float(x), float(y))
        out.append((float(x) + vx, float(y) + vy))
    return out


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field equivalent to warping by ``outer`` and then by ``inner``.

    ``warp(warp(I, outer), inner)`` samples ``I`` at
    ``p + inner(p) + outer(p + inner(p))``.
    """
    _check_same(outer.shape, inner.shape)
    sx, sy = _source_coords(inner)
    sx = np.clip(sx, 0, inner.width - 1)
    sy = np.clip(sy, 0, inner.height - 1)
    ox, _ = _bilinear(outer.dx, sx, sy)
    oy, _ = _bilinear(outer.dy, sx, sy)
    return DisplacementField(inner.dx + ox, inner.dy + oy)


def invert_field(field: DisplacementField, iterations: int = 30) -> DisplacementField:
    """Approximate inverse by fixed-point iteration ``v(p) = -u(p + v(p))``."""
    vx = -field.dx.copy()
    vy = -field.dy.copy()
    ys, xs = np.mgrid[0:field.height, 0:field.width]
    for _ in range(iterations):
        sx = np.clip(xs + vx, 0, field.width - 1)
        sy = np.clip(ys + vy, 0, field.height - 1)
        ux, _ = _bilinear(field.dx, sx, sy)
        uy, _ = _bilinear(field.dy, sx, sy)
        vx, vy = -ux, -uy
    return DisplacementField(vx, vy)


def correlation_coefficient(a: GrayImage, b: GrayImage) -> Optional[float]:
    """Pearson correlation over the joint foreground.

    Returns ``None`` when the score is undefined (empty joint mask or a
    constant image on it).
    """
    _check_same(a.shape, b.shape)
    joint = a.mask & b.mask
    if not joint.any():
        return None
    x = a.pixels[joint].astype(np.float64)
    y = b.pixels[joint].astype(np.float64)
    x -= x.mean()
    y -= y.mean()
    sxx = float(x @ x)
    syy = float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(x @ y) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def estimate_orientation(image: GrayImage, block_size: int = 16, dense: bool = False) -> OrientationField:
    """Ridge orientation from the averaged squared-gradient tensor.

    With ``dense=False`` one value per non-overlapping block is returned;
    with ``dense=True`` the tensor is averaged over a sliding
    ``block_size`` window centred on every pixel.
    """
    if block_size < 3:
        raise ValueError("block_size must be >= 3")
    v = image.pixels.astype(np.float64)
    gx = ndimage.sobel(v, axis=1, mode="nearest")
    gy = ndimage.sobel(v, axis=0, mode="nearest")
    valid = ndimage.binary_erosion(image.mask, iterations=1, border_value=1)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    gxx, gyy, gxy = gx * gx, gy * gy, gx * gy
    if dense:
        gxx, gyy, gxy = (ndimage.uniform_filter(t, block_size, mode="constant") for t in (gxx, gyy, gxy))
        cell = 1
    else:
        h, w = v.shape
        nby, nbx = h // block_size, w // block_size
        if nby == 0 or nbx == 0:
            raise ValueError("image smaller than one block")

        def pool(t):
            t = t[: nby * block_size, : nbx * block_size]
            return t.reshape(nby, block_size, nbx, block_size).sum(axis=(1, 3))

        gxx, gyy, gxy = pool(gxx), pool(gyy), pool(gxy)
        cell = block_size
    diff = gxx - gyy
    num = np.hypot(diff, 2.0 * gxy)
    den = gxx + gyy
    tiny = den <= 1e-12 * max(float(den.max(initial=0.0)), 1.0)
    coherence = np.where(tiny, 0.0, num / np.where(tiny, 1.0, den))
    # gradient direction is 0.5*atan2(2Gxy, Gxx-Gyy); ridges run perpendicular
    theta = 0.5 * np.arctan2(2.0 * gxy, diff) + np.pi / 2
    theta = np.where(tiny, 0.0, theta)
    return OrientationField(theta, coherence, cell)
