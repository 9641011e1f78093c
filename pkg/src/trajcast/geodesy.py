"""Geographic to planar conversion (spherical Mercator) and origin handling."""

import math
from typing import NamedTuple, Sequence

EARTH_RADIUS = 6378137.0
FALSE_EASTING = 500000.0
MAX_LATITUDE = 85.0


class GeodesyError(ValueError):
    pass


class GeoPoint(NamedTuple):
    latitude_deg: float
    longitude_deg: float


class PlanePoint(NamedTuple):
    x: float
    y: float


def project(p: GeoPoint) -> PlanePoint:
    lat, lon = float(p[0]), float(p[1])
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise GeodesyError(f"non-finite coordinate ({lat}, {lon})")
    if abs(lat) > MAX_LATITUDE:
        raise GeodesyError(f"latitude {lat} outside [-{MAX_LATITUDE}, {MAX_LATITUDE}]")
    if abs(lon) > 180.0:
        raise GeodesyError(f"longitude {lon} outside [-180, 180]")
    lat_rad = lat * math.pi / 180.0
    lon_rad = lon * math.pi / 180.0
    x = EARTH_RADIUS * lon_rad + FALSE_EASTING
    # ln(tan(pi/4 + lat/2)) == asinh(tan(lat)); the second form is exactly odd
    # and exactly zero on the equator in floating point
    y = EARTH_RADIUS * math.asinh(math.tan(lat_rad))
    return PlanePoint(x, y)


def remove_offset(points: Sequence[PlanePoint]):
    """Shift ``points`` so the first one sits at the origin.

    Returns the shifted points and the subtracted offset.
    """
    if len(points) == 0:
        raise GeodesyError("cannot remove offset from an empty sequence")
    ox, oy = float(points[0][0]), float(points[0][1])
    shifted = [PlanePoint(float(px) - ox, float(py) - oy) for px, py in points]
    return shifted, PlanePoint(ox, oy)
