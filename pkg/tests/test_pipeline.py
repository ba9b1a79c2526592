import numpy as np
import pytest

from ridgereg.core import GrayImage, warp_bilinear
from ridgereg.datasynth import RidgeParams, SynthConfig, synth_dataset, synth_ridge_image
from ridgereg.densenet import NetSpec, init_params
from ridgereg.pipeline import refine, register


@pytest.fixture(scope="module")
def pair():
    return synth_dataset(SynthConfig(count=1, seed=9))[0]


def test_identity_method_keeps_scores(pair):
    r = register(pair.i1, pair.i2, method="identity")
    assert r.post == r.pre and not r.field.dx.any() and r.aligned == pair.i1


def test_self_registration():
    img = synth_ridge_image(RidgeParams(seed=3, singularities=8, texture=30.0), 128, 128)
    r = register(img, img, method="coarse")
    assert len(r.correspondences) >= 3
    assert not r.failed
    assert r.post == pytest.approx(1.0, abs=1e-6)
    assert np.abs(r.field.magnitude()).max() < 1e-6


def test_zero_head_network_adds_nothing(pair):
    # an all-zero head makes the fine stage a no-op
    params = init_params(NetSpec.uniform(2), seed=0)
    params["head.w"][:] = 0.0
    fine = register(pair.i1, pair.i2, params, method="fine")
    coarse = register(pair.i1, pair.i2, method="coarse")
    assert fine.field == coarse.field and fine.post == coarse.post
    assert fine.method == "fine" and coarse.method == "coarse"


def test_default_method_follows_params(pair):
    assert register(pair.i1, pair.i2).method == "coarse"
    assert register(pair.i1, pair.i2, init_params(NetSpec.uniform(2))).method == "fine"


def test_refine_handles_any_size():
    img = synth_ridge_image(RidgeParams(seed=1), 40, 37)
    params = init_params(NetSpec.uniform(2), seed=0)
    params["head.w"][:] = 0.0
    params["head.b"][:] = 1.0
    f = refine(params, img, img)
    assert f.shape == (37, 40)
    assert np.allclose(f.dx, 1.0) and np.allclose(f.dy, 1.0)


def test_register_errors(pair):
    with pytest.raises(ValueError, match="unknown method"):
        register(pair.i1, pair.i2, method="dense")
    with pytest.raises(ValueError, match="network parameters"):
        register(pair.i1, pair.i2, method="fine")
    with pytest.raises(ValueError, match="shapes differ"):
        register(pair.i1, GrayImage(np.zeros((8, 8), np.uint8)))


def test_coarse_failure_is_flagged():
    blank = GrayImage(np.full((64, 64), 128, np.uint8))
    r = register(blank, blank, method="coarse")
    assert r.failed and r.aligned == blank


def test_aligned_is_bilinear_warp_of_input(pair):
    r = register(pair.i1, pair.i2, method="coarse")
    assert r.aligned == warp_bilinear(pair.i1, r.field)
