"""Coarse registration from minutiae.

Pipeline: local sector/direction histograms describe each minutia, a
spectral relaxation over pairwise geometric compatibilities picks a
one-to-one correspondence set, and a thin-plate spline through the matched
points gives a dense backward field.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DisplacementField, GrayImage, correlation_coefficient, warp_nearest

log = logging.getLogger(__name__)

KINDS = ("termination", "bifurcation", "unknown")

DESCRIPTOR_RADIUS = 70.0
N_SECTORS = 6
N_RINGS = 4
N_DIRECTIONS = 6


class SingularTpsError(np.linalg.LinAlgError):
    """Landmarks are collinear or coincident; the spline system is singular."""


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    theta: float
    kind: str = "unknown"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown minutia kind {self.kind!r}")
        object.__setattr__(self, "theta", float(self.theta) % (2 * math.pi))


@dataclass(frozen=True)
class CorrespondenceSet:
    """One-to-one pairs ``(index_a, index_b, confidence)``."""

    pairs: tuple = ()

    def __post_init__(self):
        pairs = tuple((int(a), int(b), float(c)) for a, b, c in self.pairs)
        a_idx = [p[0] for p in pairs]
        b_idx = [p[1] for p in pairs]
        if len(set(a_idx)) != len(a_idx) or len(set(b_idx)) != len(b_idx):
            raise ValueError("correspondences must be one-to-one")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def index_pairs(self):
        return [(a, b) for a, b, _ in self.pairs]


@dataclass(frozen=True)
class CompatParams:
    sigma_distance: float = 15.0
    sigma_angle: float = 0.3
    keep_fraction: float = 0.15
    max_iterations: int = 200
    tolerance: float = 1e-9
    max_candidates: int = 1500
    # a candidate must reach this compatibility with a strict majority of
    # the pairs already accepted
    consistency: float = 0.5


@dataclass(frozen=True)
class TpsModel:
    landmarks: np.ndarray  # (n, 2) source points
    affine: np.ndarray  # (2, 3): rows x/y, columns [1, x, y]
    weights: np.ndarray  # (n, 2) radial coefficients
    regularization: float = 0.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(points)
        chunk = 65536
        for s in range(0, len(points), chunk):
            p = points[s:s + chunk]
            u = _tps_kernel(p, self.landmarks)
            out[s:s + chunk] = self.affine[:, 0] + p @ self.affine[:, 1:].T + u @ self.weights
        return out


def _angle_diff(a, b):
    """Signed difference wrapped to (-pi, pi]."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2 * np.pi) - np.pi
    return d


def _coords(minutiae: Sequence[Minutia]):
    if not minutiae:
        return np.zeros((0, 2)), np.zeros(0)
    xy = np.array([(m.x, m.y) for m in minutiae], dtype=np.float64)
    th = np.array([m.theta for m in minutiae], dtype=np.float64)
    return xy, th


# -- descriptors -----------------------------------------------------------

def describe_minutiae(minutiae: Sequence[Minutia], radius: float = DESCRIPTOR_RADIUS) -> np.ndarray:
    """Histogram of neighbours over (sector, ring, relative direction).

    Neighbour offsets are rotated into each minutia's own frame, so the
    descriptor is unchanged by rigid motion of the whole constellation.
    Returns an ``(n, 144)`` array of unit vectors (zero rows for isolated
    minutiae).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(minutiae)
    size = N_SECTORS * N_RINGS * N_DIRECTIONS
    desc = np.zeros((n, size))
    if n == 0:
        return desc
    xy, th = _coords(minutiae)
    for i in range(n):
        off = xy - xy[i]
        c, s = math.cos(th[i]), math.sin(th[i])
        lx = c * off[:, 0] + s * off[:, 1]
        ly = -s * off[:, 0] + c * off[:, 1]
        r = np.hypot(lx, ly)
        sel = (r > 0) & (r <= radius)
        sel[i] = False
        if not sel.any():
            continue
        ang = np.mod(np.arctan2(ly[sel], lx[sel]), 2 * np.pi)
        sector = np.minimum((ang / (2 * np.pi / N_SECTORS)).astype(int), N_SECTORS - 1)
        ring = np.minimum((r[sel] / radius * N_RINGS).astype(int), N_RINGS - 1)
        rel = np.mod(th[sel] - th[i], 2 * np.pi)
        dbin = np.minimum((rel / (2 * np.pi / N_DIRECTIONS)).astype(int), N_DIRECTIONS - 1)
        flat = (sector * N_RINGS + ring) * N_DIRECTIONS + dbin
        np.add.at(desc[i], flat, 1.0)
        desc[i] /= np.linalg.norm(desc[i])
    return desc


def descriptor_similarity(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Cosine similarity of non-negative unit descriptors, in [0, 1]."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros((len(desc_a), len(desc_b)))
    return np.clip(desc_a @ desc_b.T, 0.0, 1.0)


# -- spectral matching -------------------------------------------------------

def pair_compatibility(xy_a, th_a, xy_b, th_b, cand_a, cand_b, params: CompatParams) -> np.ndarray:
    """Off-diagonal compatibility between candidate assignments.

    Two assignments (i->j) and (k->l) agree when |a_i a_k| is close to
    |b_j b_l| and the relative minutia directions match.  Assignments that
    share an index on either side get zero.
    """
    ia, jb = np.asarray(cand_a), np.asarray(cand_b)
    da = np.hypot(*(xy_a[ia][:, None, :] - xy_a[ia][None, :, :]).transpose(2, 0, 1))
    db = np.hypot(*(xy_b[jb][:, None, :] - xy_b[jb][None, :, :]).transpose(2, 0, 1))
    ra = th_a[ia][:, None] - th_a[ia][None, :]
    rb = th_b[jb][:, None] - th_b[jb][None, :]
    dang = _angle_diff(ra, rb)
    m = np.exp(-((da - db) ** 2) / (2 * params.sigma_distance ** 2)) * np.exp(
        -(dang ** 2) / (2 * params.sigma_angle ** 2)
    )
    conflict = (ia[:, None] == ia[None, :]) | (jb[:, None] == jb[None, :])
    m[conflict] = 0.0
    return m


def leading_eigenvector(m: np.ndarray, max_iterations: int = 200, tolerance: float = 1e-9) -> np.ndarray:
    """Power iteration from the all-ones vector; non-negative for non-negative ``m``."""
    n = m.shape[0]
    v = np.ones(n) / math.sqrt(n)
    for _ in range(max_iterations):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        change = np.linalg.norm(w - v)
        v = w
        if change < tolerance:
            break
    return v


def assignment_score(compat, sim, pairs) -> float:
    """``x^T M x`` for the indicator ``x`` of ``pairs`` (diagonal = similarity)."""
    if not pairs:
        return 0.0
    ia = np.array([p[0] for p in pairs])
    jb = np.array([p[1] for p in pairs])
    m = compat(ia, jb)
    np.fill_diagonal(m, sim[ia, jb])
    return float(m.sum())


def spectral_match(
    sim: np.ndarray,
    minutiae_a: Sequence[Minutia],
    minutiae_b: Sequence[Minutia],
    params: CompatParams = CompatParams(),
) -> CorrespondenceSet:
    """Select a one-to-one set of consistent minutia pairs.

    Candidate assignments form the nodes of a compatibility matrix; its
    leading eigenvector is discretised greedily (largest entry first, no
    reused index, entries below ``keep_fraction * max`` dropped, and each
    new pair geometrically consistent with most pairs accepted so far),
    then refined by score-improving single swaps until none remains.
    """
    na, nb = len(minutiae_a), len(minutiae_b)
    if na == 0 or nb == 0:
        return CorrespondenceSet()
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape != (na, nb):
        raise ValueError(f"similarity matrix is {sim.shape}, expected {(na, nb)}")
    if sim.min() < 0 or sim.max() > 1:
        raise ValueError("similarities must lie in [0, 1]")
    xy_a, th_a = _coords(minutiae_a)
    xy_b, th_b = _coords(minutiae_b)

    cand_a, cand_b = np.divmod(np.arange(na * nb), nb)
    if len(cand_a) > params.max_candidates:
        # keep the most similar assignments; stable order for determinism
        order = np.argsort(-sim[cand_a, cand_b], kind="stable")[: params.max_candidates]
        order.sort()
        cand_a, cand_b = cand_a[order], cand_b[order]

    def compat(ia, jb):
        return pair_compatibility(xy_a, th_a, xy_b, th_b, ia, jb, params)

    m = compat(cand_a, cand_b)
    m[np.diag_indices_from(m)] = sim[cand_a, cand_b]
    v = leading_eigenvector(m, params.max_iterations, params.tolerance)
    vmax = float(v.max())
    if vmax <= 0:
        return CorrespondenceSet()

    chosen, picked = [], []
    used_a, used_b = set(), set()
    for idx in np.argsort(-v, kind="stable"):
        if v[idx] < params.keep_fraction * vmax:
            break
        a, b = int(cand_a[idx]), int(cand_b[idx])
        if a in used_a or b in used_b:
            continue
        if picked and 2 * int((m[idx, picked] >= params.consistency).sum()) <= len(picked):
            continue
        picked.append(idx)
        chosen.append((a, b))
        used_a.add(a)
        used_b.add(b)

    chosen = _refine_swaps(chosen, sim, compat, na, nb)
    conf = {(int(a), int(b)): float(v[k]) / vmax for k, (a, b) in enumerate(zip(cand_a, cand_b))}
    pairs = [(a, b, conf.get((a, b), 0.0)) for a, b in chosen]
    return CorrespondenceSet(tuple(sorted(pairs)))


def single_swaps(pairs, na: int, nb: int):
    """Every assignment reachable by one swap: exchange partners between two
    pairs, or re-point one pair to an unused index on either side."""
    pairs = list(pairs)
    used_a = {a for a, _ in pairs}
    used_b = {b for _, b in pairs}
    for i, (a, b) in enumerate(pairs):
        for j in range(i + 1, len(pairs)):
            c, d = pairs[j]
            alt = pairs.copy()
            alt[i], alt[j] = (a, d), (c, b)
            yield alt
        for b2 in range(nb):
            if b2 not in used_b:
                alt = pairs.copy()
                alt[i] = (a, b2)
                yield alt
        for a2 in range(na):
            if a2 not in used_a:
                alt = pairs.copy()
                alt[i] = (a2, b)
                yield alt


def _refine_swaps(pairs, sim, compat, na, nb, max_rounds: int = 50):
    best = assignment_score(compat, sim, pairs)
    for _ in range(max_rounds):
        improved = False
        for alt in single_swaps(pairs, na, nb):
            s = assignment_score(compat, sim, alt)
            if s > best + 1e-12:
                pairs, best, improved = alt, s, True
                break
        if not improved:
            break
    return pairs


# -- thin-plate spline -------------------------------------------------------

def _tps_kernel(p: np.ndarray, c: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 between rows of ``p`` and ``c``."""
    d2 = ((p[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(d2 > 0, d2 * np.log(np.where(d2 > 0, d2, 1.0)), 0.0)
    return u


def fit_tps(source, target, regularization: float = 0.0) -> TpsModel:
    """Thin-plate spline with ``model(source[i]) ~= target[i]``.

    Solved in the null space of the affine constraints: with ``P = [1 x y]``
    and ``P = Q R`` (complete QR), the radial weights are
    ``w = Q2 (Q2^T K Q2)^-1 Q2^T v`` and the affine part follows from
    ``R a = Q1^T (v - K w)``.  The side conditions ``P^T w = 0`` hold by
    construction.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError(f"source {src.shape} and target {dst.shape} differ")
    if regularization < 0:
        raise ValueError("regularization must be non-negative")
    n = len(src)
    if n < 3:
        raise SingularTpsError(f"need at least 3 landmarks, got {n}")
    if regularization == 0 and len(np.unique(src, axis=0)) < n:
        raise SingularTpsError("coincident landmarks")
    p = np.column_stack([np.ones(n), src])
    q, r = np.linalg.qr(p, mode="complete")
    r = r[:3]
    scale = max(1.0, float(np.abs(src).max()))
    if np.abs(np.diag(r)).min() < 1e-9 * scale * math.sqrt(n):
        raise SingularTpsError("landmarks are collinear")
    k = _tps_kernel(src, src) + regularization * np.eye(n)
    q1, q2 = q[:, :3], q[:, 3:]
    if n > 3:
        inner = q2.T @ k @ q2
        if np.linalg.cond(inner) > 1e12:
            raise SingularTpsError("landmarks are coincident or degenerate")
        w = q2 @ np.linalg.solve(inner, q2.T @ dst)
    else:
        w = np.zeros((3, 2))
    a = np.linalg.solve(r, q1.T @ (dst - k @ w))  # (3, 2): rows [1, x, y]
    return TpsModel(src.copy(), a.T.copy(), w, float(regularization))


def tps_to_field(model: TpsModel, width: int, height: int) -> DisplacementField:
    """Field ``TPS(p) - p`` on a ``width x height`` grid."""
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    mapped = model(pts)
    disp = mapped - pts
    return DisplacementField(disp[:, 0].reshape(height, width), disp[:, 1].reshape(height, width))


# -- end to end --------------------------------------------------------------

@dataclass(frozen=True)
class CoarseResult:
    aligned: GrayImage
    field: DisplacementField
    correspondences: CorrespondenceSet
    failed: bool
    model: Optional[TpsModel] = None


MIN_CORRESPONDENCES = 3


def initial_register(
    input_image: GrayImage,
    input_minutiae: Sequence[Minutia],
    reference_image: GrayImage,
    reference_minutiae: Sequence[Minutia],
    params: CompatParams = CompatParams(),
    regularization: float = 0.0,
    radius: float = DESCRIPTOR_RADIUS,
    require_gain: bool = True,
) -> CoarseResult:
    """Align ``input_image`` onto the reference grid through matched minutiae.

    Correspondences index input minutiae (side A) and reference minutiae
    (side B).  With fewer than three consistent pairs, a degenerate spline,
    or (when ``require_gain``) an alignment that lowers the correlation with
    the reference, the input is returned untouched with ``failed=True``.
    """
    if input_image.shape != reference_image.shape:
        raise ValueError(f"image shapes differ: {input_image.shape} vs {reference_image.shape}")
    h, w = reference_image.shape
    zero = DisplacementField.zeros(w, h)
    desc_a = describe_minutiae(input_minutiae, radius)
    desc_b = describe_minutiae(reference_minutiae, radius)
    sim = descriptor_similarity(desc_a, desc_b)
    corr = spectral_match(sim, input_minutiae, reference_minutiae, params)
    if len(corr) < MIN_CORRESPONDENCES:
        log.info("coarse registration failed: %d correspondences", len(corr))
        return CoarseResult(input_image, zero, corr, True)
    src = np.array([(reference_minutiae[b].x, reference_minutiae[b].y) for _, b, _ in corr.pairs])
    dst = np.array([(input_minutiae[a].x, input_minutiae[a].y) for a, _, _ in corr.pairs])
    try:
        model = fit_tps(src, dst, regularization)
    except SingularTpsError as exc:
        log.info("coarse registration failed: %s", exc)
        return CoarseResult(input_image, zero, corr, True)
    fld = tps_to_field(model, w, h)
    aligned = warp_nearest(input_image, fld)
    if require_gain:
        pre = correlation_coefficient(input_image, reference_image)
        post = correlation_coefficient(aligned, reference_image)
        if post is None or (pre is not None and post < pre):
            # wrong matches produce a spline that makes the overlap worse
            log.info("coarse registration failed: correlation %s -> %s", pre, post)
            return CoarseResult(input_image, zero, corr, True, model)
    return CoarseResult(aligned, fld, corr, False, model)
