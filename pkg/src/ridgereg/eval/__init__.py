"""Evaluation: minutiae detection, metrics and the benchmark harness."""
from .minutiae import detect_minutiae
from .metrics import (
    MosaickingErrorReport,
    ScoreSet,
    cmc,
    fnmr_fmr_curves,
    mosaicking_error,
    registration_error,
)

__all__ = [
    "detect_minutiae",
    "MosaickingErrorReport",
    "ScoreSet",
    "cmc",
    "fnmr_fmr_curves",
    "mosaicking_error",
    "registration_error",
]
