"""Registration, verification, identification and mosaicking metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from ..core import DisplacementField, GrayImage, transform_points
from .minutiae import detect_minutiae

log = logging.getLogger(__name__)

CDF_STEP = 0.5
SEAM_BAND = 24


@dataclass(frozen=True)
class RegistrationErrorReport:
    errors: np.ndarray  # sorted ascending
    mean: float
    grid: np.ndarray
    cdf: np.ndarray
    excluded: tuple  # indices of pairs whose p2 fell outside the field


def error_cdf(errors) -> tuple[np.ndarray, np.ndarray]:
    """Share of errors <= g for g = 0, 0.5, ... up to the largest error."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    top = CDF_STEP * math.ceil(e.max() / CDF_STEP) if len(e) else 0.0
    grid = np.arange(0.0, top + CDF_STEP / 2, CDF_STEP)
    cdf = np.searchsorted(e, grid, side="right") / len(e) if len(e) else np.zeros_like(grid)
    return grid, cdf


def registration_error(
    transform: Union[DisplacementField, Callable],
    correspondences: Sequence,
) -> RegistrationErrorReport:
    """Distance between each transformed ``p2`` and its mate ``p1``.

    ``transform`` is a field (points move by its value) or a callable on a
    single ``(x, y)``.  Points outside the field are skipped and listed in
    ``excluded``.  The CDF is sampled every 0.5 px from 0 up to the largest
    error.
    """
    errs, excluded = [], []
    for idx, (p1, p2) in enumerate(correspondences):
        try:
            if isinstance(transform, DisplacementField):
                (qx, qy), = transform_points(transform, [p2])
            else:
                qx, qy = transform(p2)
        except ValueError:
            excluded.append(idx)
            continue
        errs.append(math.hypot(qx - p1[0], qy - p1[1]))
    if excluded:
        log.warning("%d correspondences fell outside the field", len(excluded))
    e = np.sort(np.array(errs, dtype=np.float64))
    grid, cdf = error_cdf(e)
    mean = float(e.mean()) if len(e) else math.nan
    return RegistrationErrorReport(e, mean, grid, cdf, tuple(excluded))


@dataclass(frozen=True)
class ScoreSet:
    genuine: tuple
    impostor: tuple = ()

    def __post_init__(self):
        g = tuple(float(v) for v in self.genuine)
        i = tuple(float(v) for v in self.impostor)
        if not all(math.isfinite(v) for v in g + i):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "genuine", g)
        object.__setattr__(self, "impostor", i)


@dataclass(frozen=True)
class ErrorCurves:
    thresholds: np.ndarray
    fnmr: np.ndarray
    fmr: Optional[np.ndarray]  # None when there are no impostor scores

    @property
    def det(self):
        """``(FMR, FNMR)`` points, one per threshold."""
        if self.fmr is None:
            return None
        return np.column_stack([self.fmr, self.fnmr])


def default_thresholds() -> np.ndarray:
    return np.round(np.linspace(-1.0, 1.0, 201), 10)


def fnmr_fmr_curves(scores: ScoreSet, thresholds=None) -> ErrorCurves:
    """FNMR(t) = share of genuine scores < t; FMR(t) = share of impostor
    scores >= t."""
    if len(scores.genuine) == 0:
        raise ValueError("no genuine scores")
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    g = np.sort(np.asarray(scores.genuine))
    fnmr = np.searchsorted(g, t, side="left") / len(g)
    fmr = None
    if scores.impostor:
        im = np.sort(np.asarray(scores.impostor))
        fmr = (len(im) - np.searchsorted(im, t, side="left")) / len(im)
    return ErrorCurves(t, fnmr, fmr)


def mate_ranks(score_matrix, mates) -> np.ndarray:
    """1-based rank of each probe's mate: higher scores rank first, equal
    scores at a lower gallery index rank ahead."""
    s = np.asarray(score_matrix, dtype=np.float64)
    mates = np.asarray(mates, dtype=np.int64)
    if s.ndim != 2 or s.shape[0] != len(mates):
        raise ValueError(f"score matrix {s.shape} does not match {len(mates)} probes")
    if ((mates < 0) | (mates >= s.shape[1])).any():
        raise ValueError("mate index outside the gallery")
    ms = s[np.arange(len(mates)), mates][:, None]
    idx = np.arange(s.shape[1])[None, :]
    above = (s > ms) | ((s == ms) & (idx < mates[:, None]))
    return 1 + above.sum(axis=1)


def cmc(score_matrix, mates) -> np.ndarray:
    """``rates[k-1]`` = share of probes whose mate ranks within the top k."""
    ranks = mate_ranks(score_matrix, mates)
    g = np.asarray(score_matrix).shape[1]
    return np.array([(ranks <= k).mean() for k in range(1, g + 1)])


@dataclass(frozen=True)
class MosaickingErrorReport:
    n1: int
    n2: int
    n1_tilde: int
    n2_tilde: int

    @property
    def e(self) -> int:
        return abs(self.n1_tilde - self.n1) + abs(self.n2_tilde - self.n2)


def seam_band(partition, band: int = SEAM_BAND) -> np.ndarray:
    seam = partition.seam_mask
    if not seam.any():
        return np.zeros_like(seam)
    return ndimage.distance_transform_edt(~seam) <= band / 2


def count_in(minutiae, region: np.ndarray) -> int:
    return sum(1 for m in minutiae if region[int(round(m.y)), int(round(m.x))])


def mosaicking_error(
    i1: GrayImage, i2: GrayImage, im: GrayImage, partition, band: int = SEAM_BAND
) -> MosaickingErrorReport:
    """Minutiae-count consistency near the seam.

    All three images are examined through the same overlap mask, so the
    detector sees identical borders; counts are taken inside a ``band``-px
    strip around the seam, split into R1 (which also holds the seam pixels)
    and R2.
    """
    overlap = partition.overlap
    strip = seam_band(partition, band)
    reg1 = strip & (partition.r1 | partition.seam_mask)
    reg2 = strip & partition.r2
    m1 = detect_minutiae(i1.with_mask(i1.mask & overlap))
    m2 = detect_minutiae(i2.with_mask(i2.mask & overlap))
    mm = detect_minutiae(im.with_mask(im.mask & overlap))
    return MosaickingErrorReport(count_in(m1, reg1), count_in(m2, reg2), count_in(mm, reg1), count_in(mm, reg2))
