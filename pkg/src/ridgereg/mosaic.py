"""Seam-based stitching of two registered images and ordered multi-image
mosaicking.

The seam runs between the two points where the image outlines cross and
minimises the summed per-pixel penalty

    |I1 - I2| + lambda1 * angle(O1, O2) + lambda2 * exp(-distance to overlap edge)

over 4-connected paths inside the overlap.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import GrayImage, OrientationField, correlation_coefficient, estimate_orientation

log = logging.getLogger(__name__)

FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)
# (dy, dx) in lexicographic (y, x) order of the resulting neighbour
NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))


class SeamError(RuntimeError):
    """No seam exists between the requested endpoints."""


class RegistrationFailed(RuntimeError):
    """The registration stage could not align the pair."""


@dataclass(frozen=True)
class MosaicConfig:
    lambda1: float = 20.0
    lambda2: float = 50.0
    tie_break: str = "yx-lexicographic"
    orientation_block: int = 16

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2):
            if not math.isfinite(v) or v < 0:
                raise ValueError("penalty weights must be finite and non-negative")
        if self.tie_break != "yx-lexicographic":
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")


@dataclass(frozen=True)
class Endpoints:
    a: tuple
    b: tuple
    degenerate: bool = False


@dataclass(frozen=True)
class PenaltyMap:
    cost: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class OverlapPartition:
    seam: tuple
    r1: np.ndarray
    r2: np.ndarray
    endpoints: Endpoints

    @property
    def overlap(self) -> np.ndarray:
        return self.r1 | self.r2 | self.seam_mask

    @property
    def seam_mask(self) -> np.ndarray:
        m = np.zeros(self.r1.shape, dtype=bool)
        for x, y in self.seam:
            m[y, x] = True
        return m


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, FOUR, border_value=0)


def _farthest_pair(points: np.ndarray):
    best, pair = -1.0, (0, 0)
    for i in range(len(points)):
        d = ((points[i + 1:] - points[i]) ** 2).sum(axis=1)
        if len(d) and d.max() > best:
            best = float(d.max())
            pair = (i, i + 1 + int(d.argmax()))
    return pair


def find_endpoints(mask1: np.ndarray, mask2: np.ndarray) -> Endpoints:
    """Points where the outlines of the two masks cross.

    Crossing pixels lie in the overlap and on both outlines; each 8-connected
    cluster of them yields one point (the member nearest its centroid).
    With more than two clusters the farthest-apart pair wins.  With fewer
    than two (one mask contains the other) the two mutually farthest
    overlap-boundary pixels are returned and flagged ``degenerate``.
    """
    mask1 = np.asarray(mask1, dtype=bool)
    mask2 = np.asarray(mask2, dtype=bool)
    if mask1.shape != mask2.shape:
        raise ValueError(f"mask shapes differ: {mask1.shape} vs {mask2.shape}")
    overlap = mask1 & mask2
    if not overlap.any():
        raise ValueError("masks do not overlap")
    cross = overlap & boundary(mask1) & boundary(mask2)
    labels, n = ndimage.label(cross, EIGHT)
    reps = []
    for k in range(1, n + 1):
        ys, xs = np.nonzero(labels == k)
        cy, cx = ys.mean(), xs.mean()
        i = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        reps.append((int(xs[i]), int(ys[i])))
    if len(reps) >= 2:
        i, j = _farthest_pair(np.array(reps, dtype=np.float64))
        return Endpoints(reps[i], reps[j], False)
    ys, xs = np.nonzero(boundary(overlap))
    pts = np.column_stack([xs, ys]).astype(np.float64)
    if len(pts) == 1:
        p = (int(xs[0]), int(ys[0]))
        return Endpoints(p, p, True)
    i, j = _farthest_pair(pts)
    return Endpoints((int(xs[i]), int(ys[i])), (int(xs[j]), int(ys[j])), True)


def orientation_difference(t1, t2):
    """Smallest angle between two mod-pi orientations, in [0, pi/2]."""
    d = np.mod(np.asarray(t1) - np.asarray(t2), np.pi)
    return np.minimum(d, np.pi - d)


def penalty_map(
    i1: GrayImage,
    i2: GrayImage,
    o1: OrientationField,
    o2: OrientationField,
    overlap: np.ndarray,
    config: MosaicConfig = MosaicConfig(),
) -> PenaltyMap:
    """Per-pixel seam cost on the overlap (zero outside).

    Orientation differences count only where both fields are reliable;
    the distance term uses the Euclidean distance to the nearest
    overlap-boundary pixel.
    """
    overlap = np.asarray(overlap, dtype=bool)
    shape = i1.shape
    if i2.shape != shape or overlap.shape != shape:
        raise ValueError("rasters must share dimensions")
    o1 = o1.to_pixels(*shape)
    o2 = o2.to_pixels(*shape)
    if o1.theta.shape != shape or o2.theta.shape != shape:
        raise ValueError("orientation fields must cover the image")
    inten = np.abs(i1.pixels.astype(np.float64) - i2.pixels.astype(np.float64))
    reliable = o1.reliable & o2.reliable
    orient = np.where(reliable, orientation_difference(o1.theta, o2.theta), 0.0)
    edge = boundary(overlap)
    if edge.any():
        dist = ndimage.distance_transform_edt(~edge)
    else:
        dist = np.full(shape, np.inf)
    cost = inten + config.lambda1 * orient + config.lambda2 * np.exp(-dist)
    cost = np.where(overlap, cost, 0.0)
    return PenaltyMap(cost, overlap)


def optimal_seam(pmap: PenaltyMap, endpoints) -> list[tuple[int, int]]:
    """Minimum-penalty 4-connected path inside the overlap, as ``(x, y)`` list.

    Path cost is the sum of the penalties of all pixels on it (start pixel
    included).  Equal-cost alternatives resolve by popping and relaxing in
    ``(y, x)`` order.
    """
    if isinstance(endpoints, Endpoints):
        a, b = endpoints.a, endpoints.b
    else:
        a, b = endpoints
    cost, mask = pmap.cost, pmap.mask
    h, w = cost.shape
    for x, y in (a, b):
        if not (0 <= x < w and 0 <= y < h and mask[y, x]):
            raise SeamError(f"endpoint ({x}, {y}) is outside the overlap")
    start = (a[1], a[0])
    goal = (b[1], b[0])
    dist = np.full((h, w), np.inf)
    prev = {}
    dist[start] = cost[start]
    heap = [(cost[start], start[0], start[1])]
    done = np.zeros((h, w), dtype=bool)
    while heap:
        d, y, x = heapq.heappop(heap)
        if done[y, x]:
            continue
        done[y, x] = True
        if (y, x) == goal:
            break
        for dy, dx in NEIGHBOURS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not done[ny, nx]:
                nd = d + cost[ny, nx]
                if nd < dist[ny, nx]:
                    dist[ny, nx] = nd
                    prev[(ny, nx)] = (y, x)
                    heapq.heappush(heap, (nd, ny, nx))
    if not done[goal]:
        raise SeamError(f"endpoints {a} and {b} are not connected inside the overlap")
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return [(x, y) for y, x in reversed(path)]


def seam_cost(pmap: PenaltyMap, seam) -> float:
    return float(sum(pmap.cost[y, x] for x, y in seam))


def partition_overlap(mask1, mask2, seam, endpoints: Endpoints) -> OverlapPartition:
    """Split the overlap minus the seam into the part kept from image 1 and
    the part kept from image 2.

    Each 4-connected piece goes to the image whose exclusive region it
    touches more; pieces touching neither go, largest first, to image 1 and
    the rest to image 2.
    """
    mask1 = np.asarray(mask1, dtype=bool)
    mask2 = np.asarray(mask2, dtype=bool)
    overlap = mask1 & mask2
    seam_mask = np.zeros(overlap.shape, dtype=bool)
    for x, y in seam:
        seam_mask[y, x] = True
    rest = overlap & ~seam_mask
    labels, n = ndimage.label(rest, FOUR)
    near1 = ndimage.binary_dilation(mask1 & ~mask2, FOUR)
    near2 = ndimage.binary_dilation(mask2 & ~mask1, FOUR)
    r1 = np.zeros_like(overlap)
    r2 = np.zeros_like(overlap)
    undecided = []
    for k in range(1, n + 1):
        comp = labels == k
        t1 = int((comp & near1).sum())
        t2 = int((comp & near2).sum())
        if t1 > t2:
            r1 |= comp
        elif t2 > t1:
            r2 |= comp
        else:
            undecided.append((-int(comp.sum()), k, comp))
    undecided.sort(key=lambda t: (t[0], t[1]))
    for i, (_, _, comp) in enumerate(undecided):
        if i == 0 and not r1.any():
            r1 |= comp
        else:
            r2 |= comp
    return OverlapPartition(tuple((int(x), int(y)) for x, y in seam), r1, r2, endpoints)


def stitch(i1: GrayImage, i2: GrayImage, partition: Optional[OverlapPartition]) -> GrayImage:
    """Hard cut along the seam.

    ``r1`` and the region only ``i1`` covers come from ``i1``; ``r2`` and
    the ``i2``-only region from ``i2``.  A seam pixel takes whichever
    image's value is closer to the mean of its already-assigned 3x3
    neighbours.
    """
    if i1.shape != i2.shape:
        raise ValueError(f"image shapes differ: {i1.shape} vs {i2.shape}")
    m1, m2 = i1.mask, i2.mask
    out = np.zeros(i1.shape, dtype=np.float64)
    assigned = np.zeros(i1.shape, dtype=bool)
    take1 = m1 & ~m2
    take2 = m2 & ~m1
    seam = ()
    if partition is not None:
        take1 = take1 | partition.r1
        take2 = take2 | partition.r2
        seam = partition.seam
    else:
        # no partition: overlap (if any) is taken from i1
        take1 = take1 | (m1 & m2)
    out[take1] = i1.pixels[take1]
    out[take2] = i2.pixels[take2]
    assigned |= take1 | take2
    p1 = i1.pixels.astype(np.float64)
    p2 = i2.pixels.astype(np.float64)
    h, w = i1.shape
    for x, y in seam:
        y0, y1, x0, x1 = max(y - 1, 0), min(y + 2, h), max(x - 1, 0), min(x + 2, w)
        nb = assigned[y0:y1, x0:x1]
        if nb.any():
            ref = out[y0:y1, x0:x1][nb].mean()
            use1 = abs(p1[y, x] - ref) <= abs(p2[y, x] - ref)
        else:
            use1 = True
        out[y, x] = p1[y, x] if use1 else p2[y, x]
    return GrayImage(out.astype(np.uint8), m1 | m2)


# -- end-to-end ------------------------------------------------------------------

@dataclass(frozen=True)
class MosaicResult:
    image: GrayImage
    partition: Optional[OverlapPartition]
    aligned: GrayImage
    penalty: Optional[PenaltyMap] = None


def mosaic_aligned(i1: GrayImage, i2: GrayImage, config: MosaicConfig = MosaicConfig()) -> MosaicResult:
    """Seam-stitch an already registered ``i1`` onto ``i2``."""
    overlap = i1.mask & i2.mask
    if not overlap.any():
        return MosaicResult(stitch(i1, i2, None), None, i1)
    ends = find_endpoints(i1.mask, i2.mask)
    o1 = estimate_orientation(i1, config.orientation_block, dense=True)
    o2 = estimate_orientation(i2, config.orientation_block, dense=True)
    pmap = penalty_map(i1, i2, o1, o2, overlap, config)
    seam = optimal_seam(pmap, ends)
    part = partition_overlap(i1.mask, i2.mask, seam, ends)
    return MosaicResult(stitch(i1, i2, part), part, i1, pmap)


def mosaic_pair(
    input_image: GrayImage,
    reference: GrayImage,
    register: Callable,
    config: MosaicConfig = MosaicConfig(),
) -> MosaicResult:
    """Register ``input_image`` onto ``reference`` then seam-stitch.

    ``register(input, reference)`` returns an object with ``aligned`` and
    ``failed`` attributes; a failed registration raises
    ``RegistrationFailed``.
    """
    reg = register(input_image, reference)
    if reg.failed:
        raise RegistrationFailed("registration of the input onto the reference failed")
    return mosaic_aligned(reg.aligned, reference, config)


def order_multi(scores) -> list[int]:
    """Seed = largest row sum; the rest by descending score to the seed.
    Ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ValueError("score matrix must be square")
    if n == 0:
        return []
    if (s < 0).any() or not np.allclose(s, s.T):
        raise ValueError("score matrix must be symmetric and non-negative")
    totals = np.where(np.eye(n, dtype=bool), 0.0, s).sum(axis=1)
    seed = int(np.flatnonzero(totals == totals.max())[0])
    rest = [i for i in range(n) if i != seed]
    rest.sort(key=lambda i: (-s[seed, i], i))
    return [seed] + rest


@dataclass
class MultiMosaicResult:
    image: GrayImage
    order: list
    skipped: list
    steps: list = field(default_factory=list)
    scores: Optional[np.ndarray] = None


def pairwise_scores(images: Sequence[GrayImage], register: Callable) -> np.ndarray:
    """Symmetric post-registration correlation (both directions averaged,
    failures and negative values count as 0)."""
    n = len(images)
    s = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            reg = register(images[j], images[i])
            r = None if reg.failed else correlation_coefficient(reg.aligned, images[i])
            s[i, j] = max(r or 0.0, 0.0)
    return (s + s.T) / 2


def mosaic_multi(
    images: Sequence[GrayImage],
    register: Callable,
    config: MosaicConfig = MosaicConfig(),
    scores: Optional[np.ndarray] = None,
) -> MultiMosaicResult:
    """Grow a mosaic by registering each image onto the running result in
    ``order_multi`` order.  Pairs that fail registration are skipped."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    if len(images) == 1:
        return MultiMosaicResult(images[0], [0], [])
    if scores is None:
        scores = pairwise_scores(images, register)
    order = order_multi(scores)
    running = images[order[0]]
    skipped, steps = [], []
    for idx in order[1:]:
        try:
            res = mosaic_pair(images[idx], running, register, config)
        except (RegistrationFailed, SeamError) as exc:
            log.warning("skipping image %d: %s", idx, exc)
            skipped.append(idx)
            continue
        running = res.image
        steps.append((idx, res))
    return MultiMosaicResult(running, order, skipped, steps, scores)
