"""Precision switch and small array helpers shared by every module.

Tensors are plain numpy arrays. Storage and compute default to float32;
verification runs flip the process-wide precision to float64.
"""
import contextlib
import logging

import numpy as np

from prunedistill.errors import ConfigError, NumericError

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}
DEFAULT_PRECISION = "f32"

_current = DEFAULT_PRECISION


def set_precision(name: str) -> None:
    global _current
    if name not in PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _current = name
    log.debug("precision set to %s", name)


def get_dtype() -> type:
    return PRECISIONS[_current]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch precision, e.g. ``with precision("f64"): ...``."""
    previous = _current
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        log.error("non-finite values at %s (%d entries)", where, bad)
        raise NumericError(f"non-finite values at {where} ({bad} entries)")
    return x


def round_half_away(x: float) -> int:
    # python's round() is banker's rounding; 2.5 must go to 3
    return int(np.sign(x) * np.floor(abs(x) + 0.5))
