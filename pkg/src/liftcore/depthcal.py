"""Median-based affine calibration of relative monocular depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from liftcore.core import DepthMap


class FlatRelativeDepth(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationResult:
    scale: float
    shift: float
    valid_pixel_count: int


def lower_median(x) -> float:
    """Median with even counts resolved to the lower middle element."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("median of an empty set")
    k = (x.size - 1) // 2
    return float(np.partition(x, k)[k])


def calibrate(d_a: DepthMap, d_r: DepthMap, mask=None, max_iters: int = 50) -> tuple[CalibrationResult, DepthMap]:
    a = np.asarray(d_a.data, dtype=np.float64)
    r = np.asarray(d_r.data, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"depth maps differ in shape: {a.shape} vs {r.shape}")
    valid = np.isfinite(a) & np.isfinite(r)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if valid.sum() < 2:
        raise ValueError("calibration needs at least 2 shared valid pixels")
    av, rv = a[valid], r[valid]
    r_hat = rv - lower_median(rv)
    eps = 1e-6 * float(rv.max() - rv.min())
    use = np.abs(r_hat) > eps
    if not use.any():
        raise FlatRelativeDepth("flat relative depth")
    # First pass centers d_a on its own median. Outliers shift that median but
    # not d_r's, biasing every ratio, so later passes center d_a on the fitted
    # value at med(d_r) until the fit stops moving.
    center = lower_median(av)
    scale = shift = None
    for _ in range(max_iters):
        new_scale = lower_median((av[use] - center) / r_hat[use])
        if new_scale == 0.0 or not np.isfinite(new_scale):
            raise FlatRelativeDepth(f"degenerate calibration scale {new_scale}")
        # uncentered shift places the result on the absolute scale
        new_shift = lower_median(av - new_scale * rv)
        done = scale is not None and new_scale == scale and new_shift == shift
        scale, shift = new_scale, new_shift
        if done:
            break
        center = scale * lower_median(rv) + shift
    out = DepthMap(scale * r + shift, "calibrated")
    return CalibrationResult(scale, shift, int(valid.sum())), out
