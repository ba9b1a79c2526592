"""Training-pair synthesis: ridge images, smooth random displacement
fields, aligned crops, and the flip / rotate / swap augmentations.

Every sample carries ``warp(i1, d) ~= i2`` (backward convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import DisplacementField, GrayImage, invert_field, warp_bilinear
from .initreg import fit_tps, tps_to_field

PATTERNS = ("parallel", "whorl", "noise")


class FoldingError(RuntimeError):
    """No fold-free field was found within the retry budget."""


@dataclass(frozen=True)
class RidgeParams:
    """Ridge pattern generator settings.

    ``angle`` is the ridge direction for the parallel/noise patterns
    (radians, image axes, y down).  ``singularities`` adds that many
    phase vortices, each of which creates one ridge ending or bifurcation.
    """

    period: float = 9.0
    pattern: str = "whorl"
    contrast: float = 1.0
    seed: int = 0
    angle: float = math.pi / 2
    singularities: int = 0
    phase_noise: float = 0.0
    intensity_noise: float = 0.0
    texture: float = 0.0
    texture_scale: float = 2.0

    def __post_init__(self):
        if self.period < 4:
            raise ValueError("period must be >= 4 px")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")


@dataclass(frozen=True)
class FieldSampler:
    spacing: float = 32.0
    max_perturbation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if not 0 <= self.max_perturbation < self.spacing / 2:
            raise ValueError("max_perturbation must be below spacing / 2 to avoid folding")


@dataclass(frozen=True)
class TrainSample:
    i1: GrayImage
    i2: GrayImage
    d: DisplacementField

    def __post_init__(self):
        if not (self.i1.shape == self.i2.shape == self.d.shape):
            raise ValueError(
                f"sample rasters differ: {self.i1.shape}, {self.i2.shape}, {self.d.shape}"
            )

    def __eq__(self, other):
        if not isinstance(other, TrainSample):
            return NotImplemented
        return self.i1 == other.i1 and self.i2 == other.i2 and self.d == other.d

    __hash__ = None


def sub_seed(master: int, index: int) -> int:
    """Independent per-item seed derived from (master, index)."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = n.std()
    return n / sd if sd > 0 else n


def ridge_phase(params: RidgeParams, width: int, height: int) -> np.ndarray:
    """Phase whose cosine draws the ridge pattern."""
    rng = np.random.default_rng(params.seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    k = 2 * math.pi / params.period
    if params.pattern == "whorl":
        # centre somewhere around the image so that arcs of varying curvature show
        cx = width * rng.uniform(-0.2, 1.2)
        cy = height * rng.uniform(-0.2, 1.2)
        phase = k * np.hypot(xs - cx, ys - cy)
    else:
        # wave vector is perpendicular to the ridge direction
        a = params.angle + math.pi / 2
        phase = k * (xs * math.cos(a) + ys * math.sin(a))
    phase = phase + rng.uniform(0, 2 * math.pi)
    if params.pattern == "noise" or params.phase_noise > 0:
        amp = params.phase_noise if params.phase_noise > 0 else 0.6
        phase = phase + amp * _smooth_noise(rng, (height, width), sigma=3 * params.period)
    for _ in range(params.singularities):
        sx = rng.uniform(0.15, 0.85) * width
        sy = rng.uniform(0.15, 0.85) * height
        sign = rng.choice([-1.0, 1.0])
        phase = phase + sign * np.arctan2(ys - sy, xs - sx)
    return phase


def synth_ridge_image(params: RidgeParams, width: int, height: int) -> GrayImage:
    """``127.5 (1 + contrast cos(phase))`` plus optional noise; full mask.

    ``texture`` adds blobs of about ``texture_scale`` px (pore- and
    width-like variation along the ridges); ``intensity_noise`` is finer
    grain at 1 px.
    """
    rng = np.random.default_rng(sub_seed(params.seed, 1))
    phase = ridge_phase(params, width, height)
    img = 127.5 * (1.0 + params.contrast * np.cos(phase))
    if params.texture > 0:
        trng = np.random.default_rng(sub_seed(params.seed, 3))
        img = img + params.texture * _smooth_noise(trng, (height, width), sigma=params.texture_scale)
    if params.intensity_noise > 0:
        img = img + params.intensity_noise * _smooth_noise(rng, (height, width), sigma=1.0)
    return GrayImage.from_float(img)


def lattice_points(width: int, height: int, spacing: float) -> np.ndarray:
    """Regular lattice reaching one spacing beyond every border."""
    xs = np.arange(-spacing, width + spacing + 1e-9, spacing)
    ys = np.arange(-spacing, height + spacing + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def lattice_field(points, displacements, width: int, height: int) -> DisplacementField:
    """TPS field interpolating ``displacements`` at ``points`` exactly."""
    points = np.asarray(points, dtype=np.float64)
    model = fit_tps(points, points + np.asarray(displacements, dtype=np.float64), 0.0)
    return tps_to_field(model, width, height)


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Determinant of ``d(p + D(p))/dp`` by central differences."""
    ddx_dy, ddx_dx = np.gradient(field.dx)
    ddy_dy, ddy_dx = np.gradient(field.dy)
    return (1 + ddx_dx) * (1 + ddy_dy) - ddx_dy * ddy_dx


def sample_field(sampler: FieldSampler, width: int, height: int, max_attempts: int = 10) -> DisplacementField:
    """Random smooth field: lattice nodes jittered uniformly within
    ``max_perturbation`` and interpolated by a thin-plate spline.

    Folded draws (non-positive Jacobian anywhere) are redrawn with the next
    sub-seed, at most ``max_attempts`` times.
    """
    pts = lattice_points(width, height, sampler.spacing)
    if sampler.max_perturbation == 0:
        return DisplacementField.zeros(width, height)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(sub_seed(sampler.seed, attempt))
        disp = rng.uniform(-sampler.max_perturbation, sampler.max_perturbation, size=pts.shape)
        fld = lattice_field(pts, disp, width, height)
        if jacobian_determinant(fld).min() > 0:
            return fld
    raise FoldingError(f"no fold-free field after {max_attempts} attempts (seed {sampler.seed})")


def make_pair(
    image: GrayImage,
    field: DisplacementField,
    crop: int,
    origin: Optional[tuple[int, int]] = None,
) -> TrainSample:
    """Crop ``image`` and ``warp_bilinear(image, field)`` at the same window.

    The window is centred unless ``origin = (x0, y0)`` is given; it must keep
    a margin of at least the largest displacement inside it from the border.
    """
    if image.shape != field.shape:
        raise ValueError(f"image {image.shape} and field {field.shape} differ")
    h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {w}x{h}")
    if origin is None:
        x0, y0 = (w - crop) // 2, (h - crop) // 2
    else:
        x0, y0 = origin
    if x0 < 0 or y0 < 0 or x0 + crop > w or y0 + crop > h:
        raise ValueError(f"crop window at ({x0}, {y0}) leaves the image")
    d = field.crop(x0, y0, crop, crop)
    reach = float(np.ceil(d.magnitude().max(initial=0.0)))
    margin = min(x0, y0, w - x0 - crop, h - y0 - crop)
    if margin < reach:
        raise ValueError(f"crop margin {margin} px is below the field reach {reach} px")
    warped = warp_bilinear(image, field)
    return TrainSample(image.crop(x0, y0, crop, crop), warped.crop(x0, y0, crop, crop), d)


# -- augmentation ------------------------------------------------------------

def augment_flip(s: TrainSample) -> TrainSample:
    """Mirror about the vertical centre line; dx changes sign."""
    def img(g):
        return GrayImage(g.pixels[:, ::-1], g.mask[:, ::-1])

    return TrainSample(img(s.i1), img(s.i2), DisplacementField(-s.d.dx[:, ::-1], s.d.dy[:, ::-1]))


def _rot90_once(s: TrainSample) -> TrainSample:
    # vectors: (dx, dy) -> (dx cos t + dy sin t, -dx sin t + dy cos t) at t = 90 deg
    def img(g):
        return GrayImage(np.rot90(g.pixels), np.rot90(g.mask))

    return TrainSample(img(s.i1), img(s.i2), DisplacementField(np.rot90(s.d.dy), -np.rot90(s.d.dx)))


def augment_rotate(s: TrainSample, theta: int) -> TrainSample:
    """Rotate by 90, 180 or 270 degrees about the centre.

    Field vectors ``v`` become ``R v`` with
    ``R = [[cos t, sin t], [-sin t, cos t]]`` and the rasters are permuted so
    that ``warp(i1, d) ~= i2`` still holds.
    """
    if theta not in (90, 180, 270):
        raise ValueError(f"rotation must be 90, 180 or 270 degrees, got {theta}")
    for _ in range(theta // 90):
        s = _rot90_once(s)
    return s


def augment_swap(s: TrainSample, exact_inverse: bool = False) -> TrainSample:
    """Exchange ``i1`` and ``i2``.

    The field is negated by default (first-order inverse); with
    ``exact_inverse=True`` it is replaced by the fixed-point inverse.
    """
    d = invert_field(s.d) if exact_inverse else -s.d
    return TrainSample(s.i2, s.i1, d)


def augment_variants(s: TrainSample, exact_inverse: bool = False) -> list[TrainSample]:
    """All 16 combinations, ordered flip-major, then rotation, then swap."""
    out = []
    for flip in (False, True):
        base = augment_flip(s) if flip else s
        for rot in (0, 90, 180, 270):
            r = augment_rotate(base, rot) if rot else base
            out.append(r)
            out.append(augment_swap(r, exact_inverse))
    return out


def expand_dataset(samples: Sequence[TrainSample], exact_inverse: bool = False) -> list[TrainSample]:
    """Sixteen-fold augmentation, deterministic order."""
    out = []
    for s in samples:
        out.extend(augment_variants(s, exact_inverse))
    return out


# -- dataset generation ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    count: int = 10
    crop: int = 64
    margin: int = 16
    seed: int = 0
    period: float = 9.0
    pattern: str = "whorl"
    singularities: int = 8
    phase_noise: float = 0.5
    intensity_noise: float = 8.0
    texture: float = 30.0
    texture_scale: float = 2.0
    spacing: float = 32.0
    max_perturbation: float = 4.0
    augment: bool = False
    exact_inverse: bool = False


def ridge_params(config: SynthConfig, seed: int) -> RidgeParams:
    """Ridge generator settings taken from ``config`` with a given seed."""
    return RidgeParams(
        period=config.period,
        pattern=config.pattern,
        seed=seed,
        singularities=config.singularities,
        phase_noise=config.phase_noise,
        intensity_noise=config.intensity_noise,
        texture=config.texture,
        texture_scale=config.texture_scale,
    )


def synth_sample(config: SynthConfig, index: int) -> TrainSample:
    """The ``index``-th sample; depends only on ``(config.seed, index)``."""
    seed = sub_seed(config.seed, index)
    size = config.crop + 2 * config.margin
    image = synth_ridge_image(ridge_params(config, seed), size, size)
    fld = sample_field(FieldSampler(config.spacing, config.max_perturbation, sub_seed(seed, 2)), size, size)
    return make_pair(image, fld, config.crop)


def synth_dataset(config: SynthConfig, threads: int = 1) -> list[TrainSample]:
    """Generate ``config.count`` samples (16x that with ``augment``).

    Each sample is seeded from ``(config.seed, index)`` so the result does
    not depend on ``threads``.
    """
    indices = range(config.count)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            base = list(pool.map(lambda i: synth_sample(config, i), indices))
    else:
        base = [synth_sample(config, i) for i in indices]
    return expand_dataset(base, config.exact_inverse) if config.augment else base


def pair_images_with_fields(n_images: int, n_fields: int, per_image: int, seed: int):
    """Seeded ``(image_index, field_index)`` pairing, ``per_image`` distinct
    fields per image (all fields when ``per_image >= n_fields``)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        if per_image >= n_fields:
            chosen = range(n_fields)
        else:
            chosen = sorted(rng.choice(n_fields, size=per_image, replace=False).tolist())
        out.extend((i, int(j)) for j in chosen)
    return out
