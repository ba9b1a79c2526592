"""Seeded benchmark harness: genuine and impostor pairs registered by one
method, scored by correlation, and summarised as CSV tables.

Report files written by :func:`write_reports` (all inside one directory):

``pairs.csv``
    ``index,a,b,genuine,pre,post,failed,epe,mosaic_e`` (one row per pair; empty
    cells mark undefined values)
``fnmr_fmr.csv``
    ``threshold,fnmr,fmr`` for the post-registration scores
``cmc.csv``
    ``rank,rate``
``registration_cdf.csv``
    ``error,cdf`` on the 0.5-px grid (pairs with a ground-truth field only)
``summary.txt``
    ``key=value`` lines
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import DisplacementField, GrayImage
from ..datasynth import FieldSampler, SynthConfig, make_pair, ridge_params, sample_field, sub_seed, synth_ridge_image
from ..mosaic import mosaic_aligned
from ..pipeline import register
from .metrics import (
    ScoreSet,
    cmc,
    error_cdf,
    fnmr_fmr_curves,
    mosaicking_error,
    registration_error,
)
from .minutiae import detect_minutiae

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSet:
    """Impressions grouped by finger.

    ``truths`` maps an ``(a, b)`` impression pair to the ground-truth field
    that warps impression ``a`` onto impression ``b``.
    """

    images: tuple
    fingers: tuple
    truths: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.fingers):
            raise ValueError("one finger id per image is required")

    def genuine_pairs(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b in combinations(range(len(self.images)), 2) if self.fingers[a] == self.fingers[b]]

    def first_impressions(self) -> list[int]:
        seen, out = set(), []
        for i, f in enumerate(self.fingers):
            if f not in seen:
                seen.add(f)
                out.append(i)
        return out

    def second_impressions(self) -> list[int]:
        firsts = set(self.first_impressions())
        seen, out = set(), []
        for i, f in enumerate(self.fingers):
            if i not in firsts and f not in seen:
                seen.add(f)
                out.append(i)
        return out

    def impostor_pairs(self) -> list[tuple[int, int]]:
        """Every pair of first impressions from different fingers."""
        return list(combinations(self.first_impressions(), 2))


def from_samples(samples: Sequence) -> BenchmarkSet:
    """Each training-style sample becomes one finger with two impressions
    (``i1`` then ``i2``) and its field as ground truth."""
    images, fingers, truths = [], [], {}
    for n, s in enumerate(samples):
        images += [s.i1, s.i2]
        fingers += [n, n]
        truths[(2 * n, 2 * n + 1)] = s.d
    return BenchmarkSet(tuple(images), tuple(fingers), truths)


def synth_impressions(fingers: int, impressions: int, config: SynthConfig = SynthConfig()) -> BenchmarkSet:
    """``impressions`` independently distorted crops of each of ``fingers``
    synthetic ridge images."""
    size = config.crop + 2 * config.margin
    images, ids = [], []
    for f in range(fingers):
        seed = sub_seed(config.seed, f)
        base = synth_ridge_image(ridge_params(config, seed), size, size)
        for k in range(impressions):
            sampler = FieldSampler(config.spacing, config.max_perturbation, sub_seed(seed, 100 + k))
            images.append(make_pair(base, sample_field(sampler, size, size), config.crop).i2)
            ids.append(f)
    return BenchmarkSet(tuple(images), tuple(ids))


@dataclass
class PairResult:
    index: int
    a: int
    b: int
    genuine: bool
    pre: Optional[float]
    post: Optional[float]
    failed: bool
    epe: Optional[float] = None
    mosaic_e: Optional[int] = None
    errors: tuple = ()
    skipped: Optional[str] = None


@dataclass
class BenchmarkReport:
    method: str
    pairs: list
    thresholds: np.ndarray
    fnmr: np.ndarray
    fmr: Optional[np.ndarray]
    cmc: np.ndarray
    cdf_grid: np.ndarray
    cdf: np.ndarray
    skipped: list

    def genuine(self) -> list:
        return [p for p in self.pairs if p.genuine and p.skipped is None]

    def summary(self) -> dict:
        g = self.genuine()

        def mean(vals):
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else math.nan

        hist = {}
        for p in g:
            if p.mosaic_e is not None:
                hist[p.mosaic_e] = hist.get(p.mosaic_e, 0) + 1
        out = {
            "method": self.method,
            "genuine_pairs": len(g),
            "impostor_pairs": sum(1 for p in self.pairs if not p.genuine and p.skipped is None),
            "skipped": len(self.skipped),
            "coarse_failures": sum(p.failed for p in g),
            "mean_pre_genuine": mean(p.pre for p in g),
            "mean_post_genuine": mean(p.post for p in g),
            "mean_epe": mean(p.epe for p in g),
            "mean_registration_error": mean(e for p in g for e in p.errors),
            "rank1": float(self.cmc[0]) if len(self.cmc) else math.nan,
            "mosaic_e_histogram": " ".join(f"{k}:{v}" for k, v in sorted(hist.items())),
        }
        return out


def _truth_errors(reg_field: DisplacementField, truth: DisplacementField, reference: GrayImage):
    """Endpoint error over the reference foreground, and registration error
    at the reference minutiae (their true mates come from ``truth``)."""
    valid = reference.mask
    epe = float(np.hypot(reg_field.dx - truth.dx, reg_field.dy - truth.dy)[valid].mean())
    pts = [(m.x, m.y) for m in detect_minutiae(reference)]
    pairs = [((x + truth.dx[int(y), int(x)], y + truth.dy[int(y), int(x)]), (x, y)) for x, y in pts]
    errors = tuple(registration_error(reg_field, pairs).errors.tolist()) if pairs else ()
    return epe, errors


def _run_pair(bset, index, a, b, genuine, method, params, mosaic):
    try:
        reg = register(bset.images[a], bset.images[b], params, method)
    except Exception as exc:  # per-item skip, reported in the summary
        log.warning("pair %d (%d, %d) skipped: %s", index, a, b, exc)
        return PairResult(index, a, b, genuine, None, None, True, skipped=str(exc))
    res = PairResult(index, a, b, genuine, reg.pre, reg.post, reg.failed)
    truth = bset.truths.get((a, b))
    if truth is not None:
        res.epe, res.errors = _truth_errors(reg.field, truth, bset.images[b])
    if genuine and mosaic:
        mres = mosaic_aligned(reg.aligned, bset.images[b])
        if mres.partition is not None and mres.partition.seam:
            res.mosaic_e = mosaicking_error(reg.aligned, bset.images[b], mres.image, mres.partition).e
    return res


def run_benchmark(
    bset: BenchmarkSet,
    method: str,
    params=None,
    threads: int = 1,
    mosaic: bool = True,
    thresholds=None,
) -> BenchmarkReport:
    """Register every genuine and impostor pair with ``method`` and score it.

    The rank curve uses second impressions as probes against a gallery of
    first impressions.  Pairs are merged by index, so the report does not
    depend on ``threads``.
    """
    jobs = [(a, b, True) for a, b in bset.genuine_pairs()] + [(a, b, False) for a, b in bset.impostor_pairs()]

    def work(job):
        i, (a, b, g) = job
        return _run_pair(bset, i, a, b, g, method, params, mosaic)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            pairs = list(pool.map(work, enumerate(jobs)))
    else:
        pairs = [work(j) for j in enumerate(jobs)]
    skipped = [p for p in pairs if p.skipped is not None]

    gen = [p.post for p in pairs if p.genuine and p.post is not None]
    imp = [p.post for p in pairs if not p.genuine and p.post is not None]
    if gen:
        curves = fnmr_fmr_curves(ScoreSet(tuple(gen), tuple(imp)), thresholds)
        t, fnmr, fmr = curves.thresholds, curves.fnmr, curves.fmr
    else:
        t, fnmr, fmr = np.array([]), np.array([]), None

    probes, gallery = bset.second_impressions(), bset.first_impressions()
    probe_fingers = [bset.fingers[p] for p in probes]
    gallery_fingers = [bset.fingers[g] for g in gallery]
    if probes:
        mat = np.zeros((len(probes), len(gallery)))
        for i, p in enumerate(probes):
            for j, g in enumerate(gallery):
                try:
                    s = register(bset.images[p], bset.images[g], params, method).post
                except Exception:
                    s = None
                mat[i, j] = -1.0 if s is None else s
        mates = [gallery_fingers.index(f) for f in probe_fingers]
        rates = cmc(mat, mates)
    else:
        rates = np.array([])

    errs = [e for p in pairs if p.genuine for e in p.errors]
    grid, cdf = error_cdf(errs) if errs else (np.array([]), np.array([]))
    return BenchmarkReport(method, pairs, t, fnmr, fmr, rates, grid, cdf, skipped)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_reports(report: BenchmarkReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "a", "b", "genuine", "pre", "post", "failed", "epe", "mosaic_e"])
        for p in report.pairs:
            w.writerow([p.index, p.a, p.b, int(p.genuine), _fmt(p.pre), _fmt(p.post), int(p.failed), _fmt(p.epe), _fmt(p.mosaic_e)])
    with open(out / "fnmr_fmr.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fnmr", "fmr"])
        for i, t in enumerate(report.thresholds):
            fmr = None if report.fmr is None else float(report.fmr[i])
            w.writerow([_fmt(float(t)), _fmt(float(report.fnmr[i])), _fmt(fmr)])
    with open(out / "cmc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "rate"])
        for k, r in enumerate(report.cmc, start=1):
            w.writerow([k, _fmt(float(r))])
    with open(out / "registration_cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["error", "cdf"])
        for e, c in zip(report.cdf_grid, report.cdf):
            w.writerow([_fmt(float(e)), _fmt(float(c))])
    with open(out / "summary.txt", "w") as fh:
        for k, v in report.summary().items():
            fh.write(f"{k}={_fmt(v)}\n")
        for p in report.skipped:
            fh.write(f"skipped.{p.index}={p.skipped}\n")
