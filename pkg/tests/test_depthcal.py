import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftcore.core import DepthMap
from liftcore.depthcal import FlatRelativeDepth, calibrate, lower_median


def maps(a, r):
    return DepthMap(np.asarray(a, float), "absolute"), DepthMap(np.asarray(r, float), "relative")


def test_lower_median():
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([5.0]) == 5.0
    with pytest.raises(ValueError):
        lower_median([])


def test_identity(rng):
    d = rng.uniform(1, 5, (16, 16))
    res, out = calibrate(*maps(d, d))
    assert res.scale == pytest.approx(1.0, abs=1e-12)
    assert res.shift == pytest.approx(0.0, abs=1e-12)
    assert np.abs(out.data - d).max() < 1e-12
    assert res.valid_pixel_count == 256


def test_known_affine(rng):
    d = rng.uniform(1, 5, (20, 20))
    res, out = calibrate(*maps(2 * d + 3, d))
    assert res.scale == pytest.approx(2.0, abs=1e-12)
    assert res.shift == pytest.approx(3.0, abs=1e-12)
    assert np.abs(out.data - (2 * d + 3)).max() < 1e-10


def test_robust_to_outliers(rng):
    d = rng.uniform(1, 5, (40, 40))
    a = 2 * d + 3
    idx = rng.choice(d.size, d.size // 10, replace=False)
    a.ravel()[idx] = rng.uniform(0, 100, idx.size)
    res, _ = calibrate(*maps(a, d))
    assert abs(res.scale - 2) / 2 < 0.01
    assert abs(res.shift - 3) / 3 < 0.01


def test_first_pass_is_plain_median_formula(rng):
    r = rng.uniform(1, 5, (30, 30))
    a = 2 * r + 3
    a.ravel()[rng.choice(r.size, 90, replace=False)] = 80.0
    res, _ = calibrate(*maps(a, r), max_iters=1)
    r_hat = r - lower_median(r)
    use = np.abs(r_hat) > 1e-6 * (r.max() - r.min())
    scale = lower_median((a - lower_median(a))[use] / r_hat[use])
    assert res.scale == scale and res.shift == lower_median(a - scale * r)


def test_output_median_matches_absolute(rng):
    r = rng.uniform(1, 5, (11, 11))
    _, out = calibrate(*maps(0.7 * r + 2, r))
    assert abs(lower_median(out.data) - lower_median(0.7 * r + 2)) < 1e-9


def test_idempotent(rng):
    d = rng.uniform(1, 5, (12, 12))
    a = 0.8 * d + rng.normal(size=d.shape) * 0.05 + 1
    _, once = calibrate(*maps(a, d))
    res, twice = calibrate(*maps(a, once.data))
    assert res.scale == pytest.approx(1.0, abs=1e-9)
    assert np.abs(twice.data - once.data).max() < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 5), st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 2**31))
def test_equivariance(k, m, p, q, seed):
    g = np.random.default_rng(seed)
    r = g.uniform(1, 5, (9, 9))
    a = 1.3 * r + 0.4 + g.normal(size=r.shape) * 0.1
    _, base = calibrate(*maps(a, r))
    # affine change of the relative input leaves the calibrated output unchanged
    _, moved = calibrate(*maps(a, p * r + q))
    assert np.abs(moved.data - base.data).max() < 1e-6 * (1 + np.abs(base.data).max())
    # scaling and shifting the absolute target carries straight through
    _, tgt = calibrate(*maps(k * a + m, r))
    assert np.abs(tgt.data - (k * base.data + m)).max() < 1e-6 * (1 + np.abs(tgt.data).max())


def test_median_property(rng):
    r = rng.uniform(1, 5, (15, 15))
    a = 2 * r + 1 + rng.normal(size=r.shape) * 0.3
    res, out = calibrate(*maps(a, r))
    resid = a - out.data
    assert np.sum(resid > 0) <= resid.size // 2 + 1 and np.sum(resid < 0) <= resid.size // 2 + 1


def test_mask_restricts_pixels(rng):
    r = rng.uniform(1, 5, (10, 10))
    a = 3 * r - 1
    a[:5] = 1000.0
    mask = np.zeros(r.shape, bool)
    mask[5:] = True
    res, _ = calibrate(*maps(a, r), mask=mask)
    assert res.scale == pytest.approx(3.0) and res.shift == pytest.approx(-1.0)
    assert res.valid_pixel_count == 50


def test_errors():
    with pytest.raises(FlatRelativeDepth, match="flat relative depth"):
        calibrate(*maps(np.arange(16.0).reshape(4, 4), np.full((4, 4), 2.0)))
    with pytest.raises(ValueError, match="shape"):
        calibrate(*maps(np.ones((3, 3)), np.ones((4, 4))))
    with pytest.raises(ValueError, match="at least 2"):
        calibrate(*maps(np.ones((3, 3)), np.arange(9.0).reshape(3, 3)), mask=np.eye(3, dtype=bool) & False)
