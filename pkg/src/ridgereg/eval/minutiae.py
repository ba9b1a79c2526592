"""Classical minutiae detector for synthetic ridge images.

Dark pixels below a masked 16x16 local mean are ridges; the ridge map is
thinned with the Zhang-Suen two-subiteration scheme and skeleton pixels are
classified by crossing number (1 = termination, 3 = bifurcation).
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from ..core import GrayImage
from ..initreg import Minutia

BORDER = 8
WINDOW = 16
SPUR_LENGTH = 4

# 8-neighbourhood in circular order, starting north, as (dy, dx)
RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def binarize(image: GrayImage, window: int = WINDOW) -> np.ndarray:
    """Ridge map: foreground pixels darker than their masked local mean."""
    m = image.mask.astype(np.float64)
    v = image.pixels.astype(np.float64) * m
    # light pre-smoothing, normalised by the mask so background does not bleed in
    sm = ndimage.gaussian_filter(m, 1.0)
    sv = ndimage.gaussian_filter(v, 1.0)
    smooth = np.where(sm > 0, sv / np.where(sm > 0, sm, 1.0), 0.0)
    lm = ndimage.uniform_filter(m, window, mode="constant")
    lv = ndimage.uniform_filter(smooth * m, window, mode="constant")
    local = np.where(lm > 0, lv / np.where(lm > 0, lm, 1.0), 0.0)
    return image.mask & (smooth < local)


def thin(ridges: np.ndarray) -> np.ndarray:
    return skeletonize(ridges, method="zhang")


def crossing_numbers(skel: np.ndarray) -> np.ndarray:
    """Half the number of 0/1 transitions around each skeleton pixel."""
    s = np.pad(skel.astype(np.int8), 1)
    h, w = skel.shape
    ring = [s[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in RING]
    cn = np.zeros((h, w), dtype=np.int8)
    for i in range(8):
        cn += np.abs(ring[i] - ring[(i + 1) % 8])
    return np.where(skel, cn // 2, 0)


def _neighbours(skel, y, x):
    h, w = skel.shape
    for dy, dx in RING:
        ny, nx = y + dy, x + dx
        if 0 <= ny < h and 0 <= nx < w and skel[ny, nx]:
            yield ny, nx


def _trace(skel, cn, y, x, first, length):
    """Follow the skeleton from (y, x) through ``first``; stop at ``length``
    steps or at another minutia.  Returns (end point, steps, hit_kind)."""
    prev, cur = (y, x), first
    visited = {prev, cur}
    steps = 1
    while steps < length:
        if cn[cur] != 2:
            return cur, steps, int(cn[cur])
        nxt = [p for p in _neighbours(skel, *cur) if p not in visited]
        if not nxt:
            break
        # prefer 4-neighbours to stay on the curve
        nxt.sort(key=lambda p: (abs(p[0] - cur[0]) + abs(p[1] - cur[1]), p))
        prev, cur = cur, nxt[0]
        visited.add(cur)
        steps += 1
    return cur, steps, int(cn[cur]) if cn[cur] != 2 else 2


def detect_minutiae(image: GrayImage, border: int = BORDER, spur_length: int = SPUR_LENGTH) -> list[Minutia]:
    """Terminations and bifurcations at least ``border`` + 1 px inside the mask.

    Adjacent bifurcation pixels collapse to one detection; a termination
    whose ridge reaches a bifurcation within ``spur_length`` steps is a spur
    and is dropped together with that bifurcation.
    """
    if not image.mask.any():
        return []
    skel = thin(binarize(image))
    cn = crossing_numbers(skel)
    inner = ndimage.distance_transform_edt(np.pad(image.mask, 1))[1:-1, 1:-1] > border

    ends = list(zip(*np.nonzero(cn == 1)))
    bif_labels, nb = ndimage.label(cn == 3, ndimage.generate_binary_structure(2, 2))
    bifs = []
    for k in range(1, nb + 1):
        ys, xs = np.nonzero(bif_labels == k)
        i = int(np.argmin((ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2))
        bifs.append((int(ys[i]), int(xs[i])))

    spur_bifs = set()
    found = []
    for y, x in ends:
        nbrs = list(_neighbours(skel, y, x))
        if not nbrs:
            continue
        end, steps, hit = _trace(skel, cn, y, x, nbrs[0], 2 * BORDER)
        if hit >= 3 and steps <= spur_length:
            spur_bifs.add(int(bif_labels[end]))
            continue
        theta = math.atan2(y - end[0], x - end[1])
        found.append((y, x, theta, "termination"))
    for k, (y, x) in enumerate(bifs, start=1):
        if k in spur_bifs:
            continue
        vx = vy = 0.0
        for p in _neighbours(skel, y, x):
            if bif_labels[p] == k:
                continue
            end, _, _ = _trace(skel, cn, y, x, p, 6)
            d = math.hypot(end[0] - y, end[1] - x)
            if d > 0:
                vx += (end[1] - x) / d
                vy += (end[0] - y) / d
        found.append((y, x, math.atan2(vy, vx), "bifurcation"))
    found.sort(key=lambda t: (t[0], t[1]))
    return [Minutia(float(x), float(y), theta, kind) for y, x, theta, kind in found if inner[y, x]]
