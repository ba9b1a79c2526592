import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ridgereg.core import GrayImage, OrientationField
from ridgereg.datasynth import RidgeParams, synth_ridge_image
from ridgereg.mosaic import (
    Endpoints,
    MosaicConfig,
    PenaltyMap,
    RegistrationFailed,
    SeamError,
    find_endpoints,
    mosaic_aligned,
    mosaic_multi,
    mosaic_pair,
    optimal_seam,
    order_multi,
    partition_overlap,
    penalty_map,
    seam_cost,
    stitch,
)
from ridgereg.pipeline import register


def identity_register(inp, ref):
    return SimpleNamespace(aligned=inp, failed=False)


def failing_register(inp, ref):
    return SimpleNamespace(aligned=inp, failed=True)


def rect_mask(shape, x0, y0, x1, y1):
    m = np.zeros(shape, bool)
    m[y0:y1 + 1, x0:x1 + 1] = True
    return m


def ridge(w=96, h=96, seed=0):
    return synth_ridge_image(RidgeParams(seed=seed, singularities=6, texture=30.0), w, h)


# -- seam oracle ------------------------------------------------------------------

def brute_force_seam_cost(cost, mask, a, b):
    """Cheapest simple 4-connected path by exhaustive depth-first search.

    Branches are cut only once their partial cost already exceeds the best
    complete path, which cannot drop an optimum because costs are >= 0.
    """
    h, w = cost.shape
    best = [math.inf]
    seen = np.zeros_like(mask)

    def dfs(y, x, acc):
        if acc > best[0]:
            return
        if (x, y) == b:
            best[0] = acc
            return
        seen[y, x] = True
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                dfs(ny, nx, acc + cost[ny, nx])
        seen[y, x] = False

    dfs(a[1], a[0], cost[a[1], a[0]])
    return best[0]


@pytest.mark.parametrize("seed", range(50))
def test_seam_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 7))
    cost = rng.uniform(0, 10, (h, w))
    mask = rng.random((h, w)) > 0.15
    cells = np.argwhere(mask)
    if len(cells) < 2:
        return
    i, j = rng.choice(len(cells), 2, replace=False)
    a = (int(cells[i][1]), int(cells[i][0]))
    b = (int(cells[j][1]), int(cells[j][0]))
    want = brute_force_seam_cost(cost, mask, a, b)
    pmap = PenaltyMap(np.where(mask, cost, 0.0), mask)
    if math.isinf(want):
        with pytest.raises(SeamError):
            optimal_seam(pmap, (a, b))
        return
    seam = optimal_seam(pmap, (a, b))
    assert seam[0] == a and seam[-1] == b
    assert seam_cost(pmap, seam) == pytest.approx(want, abs=1e-9)
    assert all(mask[y, x] for x, y in seam)
    assert all(abs(x1 - x2) + abs(y1 - y2) == 1 for (x1, y1), (x2, y2) in zip(seam, seam[1:]))


def test_uniform_band_gives_shortest_path():
    pmap = PenaltyMap(np.full((3, 5), 2.0), np.ones((3, 5), bool))
    seam = optimal_seam(pmap, ((0, 1), (4, 1)))
    assert len(seam) == 5 and seam_cost(pmap, seam) == 10.0
    assert seam == optimal_seam(pmap, ((0, 1), (4, 1)))


def test_seam_follows_zero_corridor():
    cost = np.full((4, 4), 9.0)
    corridor = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (3, 2), (3, 3)]
    for x, y in corridor:
        cost[y, x] = 0.0
    pmap = PenaltyMap(cost, np.ones((4, 4), bool))
    seam = optimal_seam(pmap, ((0, 0), (3, 3)))
    assert seam == corridor
    assert seam_cost(pmap, seam) == brute_force_seam_cost(cost, pmap.mask, (0, 0), (3, 3)) == 0.0


def test_seam_errors():
    mask = np.ones((3, 3), bool)
    mask[:, 1] = False
    pmap = PenaltyMap(np.ones((3, 3)), mask)
    with pytest.raises(SeamError, match="not connected"):
        optimal_seam(pmap, ((0, 0), (2, 2)))
    with pytest.raises(SeamError, match="outside"):
        optimal_seam(pmap, ((1, 0), (2, 2)))


# -- endpoints ----------------------------------------------------------------------------

def test_endpoints_of_overlapping_rectangles():
    # outline of mask1 (top edge y=5, bottom y=14) meets the left edge x=10 of mask2
    m1 = rect_mask((30, 30), 0, 5, 19, 14)
    m2 = rect_mask((30, 30), 10, 0, 29, 29)
    e = find_endpoints(m1, m2)
    assert not e.degenerate
    assert {e.a, e.b} == {(10, 5), (10, 14)}


def test_identical_masks_are_degenerate():
    m = rect_mask((20, 20), 3, 3, 12, 9)
    e = find_endpoints(m, m)
    assert e.degenerate
    # farthest pair of overlap-boundary pixels: opposite corners
    assert math.dist(e.a, e.b) == pytest.approx(math.hypot(9, 6))


def test_empty_overlap_raises():
    with pytest.raises(ValueError):
        find_endpoints(rect_mask((10, 10), 0, 0, 3, 3), rect_mask((10, 10), 5, 5, 9, 9))


def test_endpoints_circle_against_rectangle():
    yy, xx = np.mgrid[:80, :80]
    cx, cy, r = 30.0, 40.0, 20.0
    circle = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    rect = rect_mask((80, 80), 40, 0, 79, 79)
    e = find_endpoints(circle, rect)
    # analytic crossings of the circle with the line x = 40
    dy = math.sqrt(r * r - (40 - cx) ** 2)
    want = [(40, cy - dy), (40, cy + dy)]
    got = sorted([e.a, e.b], key=lambda p: p[1])
    assert not e.degenerate
    for g, t in zip(got, want):
        assert math.dist(g, t) <= 2.0


# -- penalty map ------------------------------------------------------------------------------

def penalty_oracle(p1, p2, t1, t2, c1, c2, overlap, lam1, lam2):
    h, w = overlap.shape
    edge = []
    for y in range(h):
        for x in range(w):
            if overlap[y, x]:
                nb = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                if any(not (0 <= a < h and 0 <= b < w) or not overlap[a, b] for a, b in nb):
                    edge.append((y, x))
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if not overlap[y, x]:
                continue
            d = min(math.hypot(y - a, x - b) for a, b in edge)
            diff = abs(t1[y, x] - t2[y, x]) % math.pi
            diff = min(diff, math.pi - diff)
            if c1[y, x] < 0.1 or c2[y, x] < 0.1:
                diff = 0.0
            out[y, x] = abs(float(p1[y, x]) - float(p2[y, x])) + lam1 * diff + lam2 * math.exp(-d)
    return out


@pytest.mark.parametrize("seed", range(5))
def test_penalty_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = 12, 15
    p1, p2 = rng.integers(0, 256, (h, w)).astype(np.uint8), rng.integers(0, 256, (h, w)).astype(np.uint8)
    t1, t2 = rng.uniform(0, math.pi, (h, w)), rng.uniform(0, math.pi, (h, w))
    c1, c2 = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    overlap = rect_mask((h, w), 2, 1, 12, 10)
    overlap[5, 6] = False
    cfg = MosaicConfig(lambda1=20, lambda2=50)
    pm = penalty_map(GrayImage(p1), GrayImage(p2), OrientationField(t1, c1), OrientationField(t2, c2), overlap, cfg)
    want = penalty_oracle(p1, p2, t1, t2, c1, c2, overlap, 20, 50)
    assert np.allclose(pm.cost, want, rtol=0, atol=1e-10)


def flat_orientation(h, w):
    return OrientationField(np.zeros((h, w)), np.ones((h, w)))


def test_penalty_identical_images_is_distance_term():
    img = ridge(20, 20)
    o = flat_orientation(20, 20)
    overlap = np.ones((20, 20), bool)
    pm = penalty_map(img, img, o, o, overlap, MosaicConfig(lambda2=50))
    assert pm.cost[0, 7] == pytest.approx(50.0)
    assert pm.cost[3, 10] == pytest.approx(50 * math.exp(-3))


def test_penalty_dimension_mismatch():
    o = flat_orientation(4, 4)
    with pytest.raises(ValueError):
        penalty_map(GrayImage(np.zeros((4, 4), np.uint8)), GrayImage(np.zeros((4, 5), np.uint8)), o, o, np.ones((4, 4), bool))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_penalty_symmetry_and_orientation_period(seed):
    rng = np.random.default_rng(seed)
    h, w = 8, 9
    a = GrayImage(rng.integers(0, 256, (h, w)).astype(np.uint8))
    b = GrayImage(rng.integers(0, 256, (h, w)).astype(np.uint8))
    t1, t2 = rng.uniform(0, math.pi, (h, w)), rng.uniform(0, math.pi, (h, w))
    ones = np.ones((h, w))
    o1, o2 = OrientationField(t1, ones), OrientationField(t2, ones)
    ov = np.ones((h, w), bool)
    base = penalty_map(a, b, o1, o2, ov).cost
    assert np.allclose(base, penalty_map(b, a, o2, o1, ov).cost, atol=1e-12)
    shifted = OrientationField(t1 + math.pi, ones)
    assert np.allclose(base, penalty_map(a, b, shifted, o2, ov).cost, atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        MosaicConfig(lambda1=-1)
    with pytest.raises(ValueError):
        MosaicConfig(lambda2=float("nan"))
    with pytest.raises(ValueError):
        MosaicConfig(tie_break="random")


# -- stitch -----------------------------------------------------------------------------------

def test_stitch_identical_images():
    img = ridge(40, 40)
    m1 = rect_mask((40, 40), 0, 0, 29, 39)
    m2 = rect_mask((40, 40), 10, 0, 39, 39)
    a, b = img.with_mask(m1), img.with_mask(m2)
    res = mosaic_aligned(a, b)
    assert res.image.mask.all()
    assert np.array_equal(res.image.pixels, img.pixels)


def test_stitch_disjoint_masks_is_plain_union():
    a = GrayImage(np.full((6, 6), 10, np.uint8), rect_mask((6, 6), 0, 0, 2, 5))
    b = GrayImage(np.full((6, 6), 200, np.uint8), rect_mask((6, 6), 4, 0, 5, 5))
    res = mosaic_aligned(a, b)
    assert res.partition is None
    assert res.image.pixels[:, :3].tolist() == [[10] * 3] * 6
    assert res.image.pixels[:, 4:].tolist() == [[200] * 2] * 6
    assert not res.image.mask[:, 3].any()


def test_stitch_vertical_seam_takes_each_side():
    h, w = 8, 10
    a = GrayImage(np.full((h, w), 40, np.uint8))
    b = GrayImage(np.full((h, w), 220, np.uint8))
    seam = [(5, y) for y in range(h)]
    part = partition_overlap(np.ones((h, w), bool), np.ones((h, w), bool), seam, Endpoints((5, 0), (5, h - 1)))
    # with full overlap neither side is exclusive: the larger piece goes to image 1
    r1 = part.r1
    left = rect_mask((h, w), 0, 0, 4, h - 1)
    right = rect_mask((h, w), 6, 0, w - 1, h - 1)
    assert np.array_equal(r1, left) and np.array_equal(part.r2, right)
    out = stitch(a, b, part)
    assert (out.pixels[:, :5] == 40).all() and (out.pixels[:, 6:] == 220).all()
    assert set(out.pixels[:, 5].tolist()) <= {40, 220}


@pytest.mark.parametrize("seed", range(5))
def test_stitch_regions_copy_exactly(seed):
    rng = np.random.default_rng(seed)
    a = GrayImage(rng.integers(0, 256, (48, 48)).astype(np.uint8), rect_mask((48, 48), 0, 0, 33, 47))
    b = GrayImage(rng.integers(0, 256, (48, 48)).astype(np.uint8), rect_mask((48, 48), 14, 0, 47, 47))
    res = mosaic_aligned(a, b)
    p = res.partition
    assert np.array_equal(res.image.pixels[p.r1], a.pixels[p.r1])
    assert np.array_equal(res.image.pixels[p.r2], b.pixels[p.r2])
    assert not (p.r1 & p.r2).any()
    assert np.array_equal(p.r1 | p.r2 | p.seam_mask, a.mask & b.mask)
    assert all(p.overlap[y, x] for x, y in p.seam)
    assert {p.seam[0], p.seam[-1]} == {p.endpoints.a, p.endpoints.b}


# -- end to end ---------------------------------------------------------------------------------

def test_self_mosaic_is_identity():
    img = ridge(64, 64, seed=3)
    res = mosaic_pair(img, img, lambda i, r: register(i, r, method="coarse"))
    assert res.image == img


def test_mosaic_pair_propagates_failure():
    img = ridge(32, 32)
    with pytest.raises(RegistrationFailed):
        mosaic_pair(img, img, failing_register)


def test_half_overlap_crops_have_zero_mosaicking_error():
    from ridgereg.eval import mosaicking_error

    img = ridge(96, 64, seed=5)
    a = img.with_mask(rect_mask((64, 96), 0, 0, 63, 63))
    b = img.with_mask(rect_mask((64, 96), 32, 0, 95, 63))
    res = mosaic_pair(a, b, identity_register)
    rep = mosaicking_error(a, b, res.image, res.partition)
    assert rep.e == 0


def test_order_multi_examples():
    assert order_multi([[0, 5, 1], [5, 0, 2], [1, 2, 0]]) == [1, 0, 2]
    assert order_multi(np.ones((4, 4))) == [0, 1, 2, 3]
    assert order_multi([[0]]) == [0]
    with pytest.raises(ValueError):
        order_multi([[0, 1], [2, 0]])


@given(st.integers(0, 10_000), st.integers(1, 7), st.floats(0.01, 100))
@settings(max_examples=50)
def test_order_multi_permutation_and_scale_invariance(seed, n, scale):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 1, (n, n))
    s = (s + s.T) / 2
    order = order_multi(s)
    assert sorted(order) == list(range(n))
    assert order_multi(s * scale) == order


def crops_of(img, boxes, seed):
    rng = np.random.default_rng(seed)
    out = []
    for x0, y0, x1, y1 in boxes:
        noisy = np.clip(img.pixels + rng.normal(0, 6, img.shape), 0, 255).astype(np.uint8)
        out.append(GrayImage(noisy, rect_mask(img.shape, x0, y0, x1, y1)))
    return out


def test_mosaic_multi_covers_union_and_ignores_input_order():
    img = ridge(96, 96, seed=7)
    boxes = [(0, 0, 59, 59), (30, 10, 95, 69), (10, 40, 79, 95)]
    crops = crops_of(img, boxes, 0)
    res = mosaic_multi(crops, identity_register)
    union = np.logical_or.reduce([c.mask for c in crops])
    assert np.array_equal(res.image.mask, union)
    assert all(res.image.mask.sum() >= c.mask.sum() for c in crops)
    assert res.skipped == []
    perm = [2, 0, 1]
    again = mosaic_multi([crops[i] for i in perm], identity_register)
    assert again.image == res.image
    assert [perm[i] for i in again.order] == res.order


def test_mosaic_multi_single_and_skips():
    img = ridge(32, 32)
    assert mosaic_multi([img], identity_register).image == img
    res = mosaic_multi([img, img], failing_register)
    assert res.skipped == [1] and res.image == img
    with pytest.raises(ValueError):
        mosaic_multi([], identity_register)
