import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ridgereg.core import GrayImage, warp_bilinear
from ridgereg.datasynth import FieldSampler, RidgeParams, sample_field, synth_ridge_image
from ridgereg.initreg import (
    N_DIRECTIONS,
    N_RINGS,
    N_SECTORS,
    CompatParams,
    CorrespondenceSet,
    Minutia,
    SingularTpsError,
    _tps_kernel,
    assignment_score,
    describe_minutiae,
    descriptor_similarity,
    fit_tps,
    initial_register,
    leading_eigenvector,
    pair_compatibility,
    single_swaps,
    spectral_match,
    tps_to_field,
)


def scatter(rng, n, size=200.0, min_gap=12.0):
    pts = []
    while len(pts) < n:
        p = rng.uniform(20, size - 20, 2)
        if all(np.hypot(*(p - q)) >= min_gap for q in pts):
            pts.append(p)
    th = rng.uniform(0, 2 * math.pi, n)
    return [Minutia(float(x), float(y), float(t), "termination") for (x, y), t in zip(pts, th)]


def rigid(ms, angle, tx, ty, cx=0.0, cy=0.0):
    c, s = math.cos(angle), math.sin(angle)
    out = []
    for m in ms:
        x, y = m.x - cx, m.y - cy
        out.append(Minutia(c * x - s * y + cx + tx, s * x + c * y + cy + ty, m.theta + angle, m.kind))
    return out


def match(a, b, params=CompatParams()):
    sim = descriptor_similarity(describe_minutiae(a), describe_minutiae(b))
    return spectral_match(sim, a, b, params)


# -- types -------------------------------------------------------------------------

def test_minutia_theta_wraps_and_kind_checked():
    assert Minutia(0, 0, -math.pi / 2).theta == pytest.approx(3 * math.pi / 2)
    with pytest.raises(ValueError):
        Minutia(0, 0, 0, "island")


def test_correspondence_set_one_to_one():
    with pytest.raises(ValueError):
        CorrespondenceSet(((0, 1, 1.0), (0, 2, 0.5)))
    with pytest.raises(ValueError):
        CorrespondenceSet(((0, 1, 1.0), (2, 1, 0.5)))


# -- descriptor ---------------------------------------------------------------------

def test_descriptor_isolated_is_zero():
    d = describe_minutiae([Minutia(10, 10, 0.3)])
    assert d.shape == (1, N_SECTORS * N_RINGS * N_DIRECTIONS)
    assert not d.any()


def test_descriptor_radius_must_be_positive():
    with pytest.raises(ValueError):
        describe_minutiae([Minutia(0, 0, 0)], 0)


def bin_count_oracle(ms, radius=70.0):
    out = []
    for i, m in enumerate(ms):
        h = np.zeros(N_SECTORS * N_RINGS * N_DIRECTIONS)
        for j, o in enumerate(ms):
            if i == j:
                continue
            dx, dy = o.x - m.x, o.y - m.y
            # rotate the offset by -theta into the minutia frame
            lx = dx * math.cos(m.theta) + dy * math.sin(m.theta)
            ly = -dx * math.sin(m.theta) + dy * math.cos(m.theta)
            r = math.hypot(lx, ly)
            if r == 0 or r > radius:
                continue
            a = math.atan2(ly, lx) % (2 * math.pi)
            sector = min(int(a // (2 * math.pi / N_SECTORS)), N_SECTORS - 1)
            ring = min(int(r // (radius / N_RINGS)), N_RINGS - 1)
            rel = (o.theta - m.theta) % (2 * math.pi)
            dbin = min(int(rel // (2 * math.pi / N_DIRECTIONS)), N_DIRECTIONS - 1)
            h[(sector * N_RINGS + ring) * N_DIRECTIONS + dbin] += 1
        n = np.linalg.norm(h)
        out.append(h / n if n else h)
    return np.array(out)


def test_descriptor_matches_bin_count_oracle():
    rng = np.random.default_rng(11)
    ms = [Minutia(float(x), float(y), float(t)) for x, y, t in zip(rng.uniform(0, 90, 5), rng.uniform(0, 90, 5), rng.uniform(0, 6.28, 5))]
    assert np.allclose(describe_minutiae(ms), bin_count_oracle(ms), atol=1e-12)


@given(st.floats(0, 2 * math.pi), st.floats(-50, 50), st.floats(-50, 50))
@settings(max_examples=40)
def test_descriptor_rigid_invariance(angle, tx, ty):
    rng = np.random.default_rng(3)
    ms = scatter(rng, 8, size=120, min_gap=10)
    # keep neighbours away from bin edges so rounding cannot flip a bin
    d0 = describe_minutiae(ms)
    d1 = describe_minutiae(rigid(ms, angle, tx, ty))
    diff = np.linalg.norm(d0 - d1, axis=1)
    assert (diff < 1e-6).sum() >= 7  # at most one borderline bin flip
    assert np.median(diff) < 1e-6


def test_descriptor_rigid_invariance_exact_quarter_turn():
    rng = np.random.default_rng(4)
    ms = scatter(rng, 10, size=150)
    d0 = describe_minutiae(ms)
    d1 = describe_minutiae(rigid(ms, math.pi / 2, 10, 5))
    assert np.abs(d0 - d1).max() < 1e-6


# -- spectral matching ----------------------------------------------------------------

def test_spectral_match_empty():
    assert len(spectral_match(np.zeros((0, 3)), [], [Minutia(0, 0, 0)] * 3)) == 0


def test_spectral_match_identical_sets():
    ms = scatter(np.random.default_rng(5), 12)
    corr = match(ms, ms)
    assert corr.index_pairs() == [(i, i) for i in range(12)]


def test_spectral_match_rotated_translated():
    ms = scatter(np.random.default_rng(6), 12)
    moved = rigid(ms, math.radians(30), 10, 5, 100, 100)
    corr = match(ms, moved)
    assert corr.index_pairs() == [(i, i) for i in range(12)]


def test_spectral_match_random_scatter_keeps_few_pairs():
    rng = np.random.default_rng(2024)
    a = scatter(rng, 10, size=300, min_gap=20)
    b = scatter(rng, 10, size=300, min_gap=20)
    sim = np.full((10, 10), 0.05)  # uninformative descriptors
    corr = spectral_match(sim, a, b)
    # pinned from the first seeded run (2 pairs survive)
    assert len(corr) == 2
    assert len(corr) <= 2


def test_spectral_match_rejects_bad_similarity():
    ms = scatter(np.random.default_rng(7), 3)
    with pytest.raises(ValueError):
        spectral_match(np.full((3, 3), 1.5), ms, ms)


def test_leading_eigenvector_matches_numpy():
    rng = np.random.default_rng(8)
    a = rng.random((6, 6))
    m = a + a.T
    v = leading_eigenvector(m, 2000, 1e-14)
    w, vec = np.linalg.eigh(m)
    ref = np.abs(vec[:, -1])
    assert np.allclose(v, ref, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_spectral_match_one_to_one_and_swap_optimal(seed):
    rng = np.random.default_rng(100 + seed)
    a = scatter(rng, 7, size=160)
    b = rigid(a, rng.uniform(-0.5, 0.5), *rng.uniform(-10, 10, 2), 80, 80)
    b = [Minutia(m.x + rng.normal(0, 3), m.y + rng.normal(0, 3), m.theta, m.kind) for m in b]
    b = b[:5] + scatter(rng, 2, size=160)
    sim = descriptor_similarity(describe_minutiae(a), describe_minutiae(b))
    corr = spectral_match(sim, a, b)
    pairs = corr.index_pairs()
    assert len({p[0] for p in pairs}) == len(pairs) == len({p[1] for p in pairs})
    xa = np.array([(m.x, m.y) for m in a])
    ta = np.array([m.theta for m in a])
    xb = np.array([(m.x, m.y) for m in b])
    tb = np.array([m.theta for m in b])

    def compat(ia, jb):
        return pair_compatibility(xa, ta, xb, tb, ia, jb, CompatParams())

    base = assignment_score(compat, sim, pairs)
    for alt in single_swaps(pairs, len(a), len(b)):
        assert assignment_score(compat, sim, alt) <= base + 1e-9


# -- TPS ------------------------------------------------------------------------------

def block_system_oracle(src, dst, lam=0.0):
    n = len(src)
    k = _tps_kernel(src, src) + lam * np.eye(n)
    p = np.column_stack([np.ones(n), src])
    big = np.zeros((n + 3, n + 3))
    big[:n, :n], big[:n, n:], big[n:, :n] = k, p, p.T
    rhs = np.vstack([dst, np.zeros((3, 2))])
    sol = np.linalg.solve(big, rhs)
    return sol[:n], sol[n:].T  # weights (n, 2), affine (2, 3)


def test_tps_identity_three_points():
    src = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    m = fit_tps(src, src)
    assert np.allclose(m.weights, 0)
    assert np.allclose(m.affine, [[0, 1, 0], [0, 0, 1]])


def test_tps_affine_reproduction():
    src = np.array([[0.0, 0.0], [10.0, 1.0], [3.0, 12.0], [9.0, 8.0]])
    a = np.array([[2.0, 1.1, 0.2], [-1.0, -0.1, 0.9]])
    dst = a[:, 0] + src @ a[:, 1:].T
    m = fit_tps(src, dst)
    assert np.abs(m.weights).max() < 1e-8
    assert np.allclose(m.affine, a)


@pytest.mark.parametrize("seed", range(5))
def test_tps_matches_block_system(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 100, (5, 2))
    dst = src + rng.normal(0, 5, (5, 2))
    m = fit_tps(src, dst)
    w, a = block_system_oracle(src, dst)
    assert np.allclose(m.weights, w, atol=1e-6)
    assert np.allclose(m.affine, a, atol=1e-6)
    assert np.abs(m(src) - dst).max() < 1e-6


def test_tps_side_conditions_and_regularization():
    rng = np.random.default_rng(9)
    src = rng.uniform(0, 100, (8, 2))
    dst = src + rng.normal(0, 4, (8, 2))
    m0, m1 = fit_tps(src, dst), fit_tps(src, dst, 50.0)
    for m in (m0, m1):
        p = np.column_stack([np.ones(8), src])
        assert np.abs(p.T @ m.weights).max() < 1e-8
    w, a = block_system_oracle(src, dst, 50.0)
    assert np.allclose(m1.weights, w, atol=1e-8)
    # regularised fit no longer interpolates but bends less
    assert np.abs(m1(src) - dst).max() > 1e-3

    def bending(m):
        return float(np.trace(m.weights.T @ _tps_kernel(src, src) @ m.weights))

    assert bending(m1) < bending(m0)


def test_tps_collinear_raises():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(SingularTpsError):
        fit_tps(src, src)


def test_tps_coincident_raises_without_regularization():
    src = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 0.0]])
    with pytest.raises(SingularTpsError):
        fit_tps(src, src)


def test_tps_too_few_points():
    with pytest.raises(SingularTpsError):
        fit_tps([[0, 0], [1, 0]], [[0, 0], [1, 0]])


def test_tps_to_field_identity_translation_and_landmarks():
    src = np.array([[2.0, 3.0], [20.0, 4.0], [5.0, 18.0], [17.0, 15.0]])
    ident = tps_to_field(fit_tps(src, src), 24, 20)
    assert np.abs(ident.dx).max() < 1e-9 and np.abs(ident.dy).max() < 1e-9
    shift = tps_to_field(fit_tps(src, src + [3.0, -2.0]), 24, 20)
    assert np.allclose(shift.dx, 3.0) and np.allclose(shift.dy, -2.0)
    dst = src + np.array([[1.0, 0.0], [0.0, 2.0], [-1.5, 0.5], [0.3, -0.7]])
    f = tps_to_field(fit_tps(src, dst), 24, 20)
    for (x, y), (tx, ty) in zip(src.astype(int), dst):
        assert f.dx[y, x] == pytest.approx(tx - x, abs=1e-6)
        assert f.dy[y, x] == pytest.approx(ty - y, abs=1e-6)


# -- end to end -------------------------------------------------------------------------

def test_initial_register_self():
    img = synth_ridge_image(RidgeParams(seed=1), 160, 160)
    ms = scatter(np.random.default_rng(10), 10, size=160)
    res = initial_register(img, ms, img, ms)
    assert not res.failed
    assert len(res.correspondences) == 10
    assert np.abs(res.field.dx).max() < 1e-6 and np.abs(res.field.dy).max() < 1e-6
    assert res.aligned == img


def test_initial_register_known_field():
    size = 160
    inp_img = synth_ridge_image(RidgeParams(seed=2), size, size)
    fld = sample_field(FieldSampler(48, 5, seed=3), size, size)
    ref_img = warp_bilinear(inp_img, fld)
    ref_ms = scatter(np.random.default_rng(12), 12, size=size)
    # the field maps reference points to their input positions
    inp_ms = [Minutia(m.x + fld.dx[int(m.y), int(m.x)], m.y + fld.dy[int(m.y), int(m.x)], m.theta, m.kind) for m in ref_ms]
    res = initial_register(inp_img, inp_ms, ref_img, ref_ms)
    assert not res.failed
    # the same spline applied to the wrong raster lowers the correlation
    swapped = initial_register(ref_img, inp_ms, inp_img, ref_ms)
    assert swapped.failed and swapped.aligned == ref_img
    assert not initial_register(ref_img, inp_ms, inp_img, ref_ms, require_gain=False).failed
    resid = [math.hypot(res.field.dx[int(m.y), int(m.x)] - fld.dx[int(m.y), int(m.x)],
                        res.field.dy[int(m.y), int(m.x)] - fld.dy[int(m.y), int(m.x)]) for m in ref_ms]
    assert np.mean(resid) < 2.0


def test_initial_register_no_minutiae_fails_cleanly():
    img = GrayImage(np.zeros((32, 32), np.uint8))
    res = initial_register(img, [], img, [Minutia(5, 5, 0)])
    assert res.failed
    assert res.aligned == img
    assert not res.field.dx.any()


def test_initial_register_shape_mismatch():
    with pytest.raises(ValueError):
        initial_register(GrayImage(np.zeros((4, 4), np.uint8)), [], GrayImage(np.zeros((5, 4), np.uint8)), [])
