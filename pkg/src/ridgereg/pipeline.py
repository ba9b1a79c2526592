"""Two-stage registration: minutiae-based coarse alignment, then dense
refinement by the trained network."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from .core import DisplacementField, GrayImage, compose_fields, correlation_coefficient, warp_bilinear
from .densenet.model import Params
from .densenet.train import infer_field
from .eval.minutiae import detect_minutiae
from .initreg import CompatParams, CorrespondenceSet, initial_register

log = logging.getLogger(__name__)

METHODS = ("identity", "coarse", "fine")


@dataclass(frozen=True)
class Registration:
    aligned: GrayImage
    field: DisplacementField
    failed: bool  # the coarse stage found no usable alignment
    correspondences: CorrespondenceSet
    pre: Optional[float]
    post: Optional[float]
    method: str


def _pad16(n: int) -> int:
    return (-n) % 16


def refine(params: Params, aligned: GrayImage, reference: GrayImage) -> DisplacementField:
    """Network residual field on images of any size (edge-padded to a
    multiple of 16 and cropped back)."""
    h, w = reference.shape
    ph, pw = _pad16(h), _pad16(w)
    if ph or pw:
        a = aligned.pad(0, 0, pw, ph)
        r = reference.pad(0, 0, pw, ph)
        return infer_field(params, a, r).crop(0, 0, w, h)
    return infer_field(params, aligned, reference)


def register(
    input_image: GrayImage,
    reference: GrayImage,
    params: Optional[Params] = None,
    method: Optional[str] = None,
    compat: CompatParams = CompatParams(),
) -> Registration:
    """Register ``input_image`` onto ``reference``.

    ``method`` is ``identity``, ``coarse`` or ``fine`` (coarse followed by
    the network); it defaults to ``fine`` when ``params`` is given.  When
    the coarse stage fails the network still runs from the identity, and
    the result is flagged ``failed``.
    """
    if method is None:
        method = "fine" if params is not None else "coarse"
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "fine" and params is None:
        raise ValueError("the fine method needs network parameters")
    if input_image.shape != reference.shape:
        raise ValueError(f"image shapes differ: {input_image.shape} vs {reference.shape}")
    pre = correlation_coefficient(input_image, reference)
    h, w = reference.shape
    if method == "identity":
        return Registration(input_image, DisplacementField.zeros(w, h), False, CorrespondenceSet(()), pre, pre, method)

    coarse = initial_register(input_image, detect_minutiae(input_image), reference, detect_minutiae(reference), compat)
    fld = coarse.field
    if method == "fine":
        stage1 = warp_bilinear(input_image, fld)
        fine = refine(params, stage1, reference)
        fld = compose_fields(fld, fine)
    aligned = warp_bilinear(input_image, fld)
    post = correlation_coefficient(aligned, reference)
    return Registration(aligned, fld, coarse.failed, coarse.correspondences, pre, post, method)
