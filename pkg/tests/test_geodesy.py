import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from trajcast.geodesy import GeodesyError, GeoPoint, PlanePoint, project, remove_offset

mpmath.mp.dps = 40


def mercator_mp(lat, lon):
    """Independent high-precision evaluation of the spherical Mercator equations."""
    r = mpmath.mpf(6378137)
    lat_r = mpmath.mpf(lat) * mpmath.pi / 180
    lon_r = mpmath.mpf(lon) * mpmath.pi / 180
    return r * lon_r + 500000, r * mpmath.log(mpmath.tan(mpmath.pi / 4 + lat_r / 2))


def test_origin():
    assert project(GeoPoint(0.0, 0.0)) == (500000.0, 0.0)


def test_lat45():
    x, y = project(GeoPoint(45.0, 0.0))
    assert x == 500000.0
    ref = float(6378137 * mpmath.log(1 + mpmath.sqrt(2)))
    assert y == pytest.approx(ref, abs=1e-6)
    assert y == pytest.approx(5621521.49, abs=0.01)


def test_lon10():
    x, y = project(GeoPoint(0.0, 10.0))
    assert x == pytest.approx(1613194.91, abs=0.01)
    assert x == pytest.approx(float(mercator_mp(0, 10)[0]), abs=1e-6)
    assert y == 0.0


def test_oracle_sample():
    rng = np.random.default_rng(5)
    for lat, lon in zip(rng.uniform(-85, 85, 2000), rng.uniform(-180, 180, 2000)):
        x, y = project(GeoPoint(lat, lon))
        rx, ry = mercator_mp(lat, lon)
        assert abs(x - float(rx)) <= 1e-6
        assert abs(y - float(ry)) <= 1e-6


@pytest.mark.parametrize("lat, lon", [(85.0001, 0), (-90, 0), (0, 180.5), (math.nan, 0), (0, math.inf)])
def test_domain(lat, lon):
    with pytest.raises(GeodesyError):
        project(GeoPoint(lat, lon))


def test_boundaries_accepted():
    for p in [(85, 180), (-85, -180)]:
        assert all(math.isfinite(v) for v in project(GeoPoint(*p)))


lat_s = st.floats(-85, 85, allow_nan=False)
lon_s = st.floats(-180, 180, allow_nan=False)


@given(lat_s, lon_s, lon_s)
def test_monotone_longitude(lat, a, b):
    lo, hi = sorted((a, b))
    x_lo, x_hi = project(GeoPoint(lat, lo)).x, project(GeoPoint(lat, hi)).x
    assert x_lo <= x_hi
    if hi - lo >= 1e-9:  # strict once the step exceeds float resolution at 1e6 m
        assert x_lo < x_hi


@given(lat_s, lat_s, lon_s)
def test_monotone_latitude(a, b, lon):
    lo, hi = sorted((a, b))
    if hi - lo < 1e-9:
        return
    assert project(GeoPoint(lo, lon)).y < project(GeoPoint(hi, lon)).y


@given(lat_s, lon_s)
def test_antisymmetric_northing(lat, lon):
    y1 = project(GeoPoint(lat, lon)).y
    y2 = project(GeoPoint(-lat, lon)).y
    assert abs(y1 + y2) <= 1e-9 * max(abs(y1), 1.0)


@given(lat_s)
def test_zero_meridian(lat):
    assert project(GeoPoint(lat, 0.0)).x == 500000.0


def test_remove_offset_examples():
    pts, off = remove_offset([PlanePoint(500000, 10), PlanePoint(500002, 13)])
    assert pts == [(0, 0), (2, 3)] and off == (500000, 10)
    assert remove_offset([PlanePoint(7, 7)]) == ([(0, 0)], (7, 7))
    assert remove_offset([(0, 0), (1, 1)]) == ([(0, 0), (1, 1)], (0, 0))


def test_remove_offset_empty():
    with pytest.raises(GeodesyError):
        remove_offset([])


@given(st.lists(st.tuples(st.floats(4e5, 6e5), st.floats(-1e6, 1e6)), min_size=1, max_size=20))
def test_remove_offset_roundtrip(points):
    shifted, off = remove_offset(points)
    assert shifted[0] == (0.0, 0.0)
    for (sx, sy), (px, py) in zip(shifted, points):
        assert sx + off.x == pytest.approx(px, abs=1e-9) and sy + off.y == pytest.approx(py, abs=1e-9)
