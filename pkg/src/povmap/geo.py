"""Slippy-map tile geometry, geodesic distance and small-polygon math.

Tiles follow the usual web-mercator scheme: at zoom ``z`` the world is a
``2^z x 2^z`` grid, x grows eastward, y grows southward from lat ~85.05N.
Distances use the haversine formula on a mean-radius sphere; the sub-0.5%
error versus an ellipsoid is immaterial at city scale and keeps the module
dependency free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError

EARTH_RADIUS_M = 6371008.8
EQUATOR_CIRCUMFERENCE_M = 40075016.686
# Web-mercator validity band.
MAX_LAT = 85.0511
METERS_PER_DEG_LAT = math.pi * EARTH_RADIUS_M / 180.0

__all__ = [
    "TileRef",
    "GeoPoint",
    "Polygon",
    "tile_center",
    "tile_bounds",
    "point_to_tile",
    "tile_ground_size_m",
    "geo_distance_m",
    "point_in_polygon",
    "polygon_area_m2",
    "polygon_centroid",
    "EARTH_RADIUS_M",
    "EQUATOR_CIRCUMFERENCE_M",
    "METERS_PER_DEG_LAT",
]


@dataclass(frozen=True)
class TileRef:
    """One slippy-map tile address."""

    z: int
    x: int
    y: int

    def __post_init__(self):
        if self.z < 0 or self.z > 30:
            raise DomainError(f"zoom {self.z} out of range")
        n = 1 << self.z
        if not (0 <= self.x < n) or not (0 <= self.y < n):
            raise DomainError(f"tile x/y ({self.x},{self.y}) out of range for z={self.z}")

    @property
    def tile_id(self) -> str:
        return f"z{self.z:02d}_x{self.x:07d}_y{self.y:07d}"


@dataclass(frozen=True)
class GeoPoint:
    """Longitude/latitude pair, degrees, restricted to the mercator band."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise DomainError("GeoPoint coordinates must be finite")
        if not (-180.0 <= self.lon <= 180.0):
            raise DomainError(f"longitude {self.lon} out of [-180, 180]")
        if not (-MAX_LAT < self.lat < MAX_LAT):
            raise DomainError(f"latitude {self.lat} outside mercator band")


@dataclass(frozen=True)
class Polygon:
    """Closed exterior ring. Self-intersection is tolerated; holes are not."""

    ring: tuple[GeoPoint, ...] = field(default=())

    def __post_init__(self):
        ring = tuple(self.ring)
        if ring and ring[0] != ring[-1]:
            ring = ring + (ring[0],)
        object.__setattr__(self, "ring", ring)
        if len(self.distinct_vertices()) < 3:
            raise DomainError("polygon needs at least 3 distinct vertices")

    def distinct_vertices(self) -> list[GeoPoint]:
        seen, out = set(), []
        for p in self.ring[:-1]:
            key = (p.lon, p.lat)
            if key not in seen:
                seen.add(key)
                out.append(p)
        return out


def tile_center(t: TileRef) -> GeoPoint:
    """Lon/lat of the tile's center pixel (inverse web-mercator)."""
    n = float(1 << t.z)
    lon = (t.x + 0.5) / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (t.y + 0.5) / n))))
    return GeoPoint(lon, lat)


def tile_bounds(t: TileRef) -> tuple[float, float, float, float]:
    """(lon_min, lat_min, lon_max, lat_max) of the tile footprint."""
    n = float(1 << t.z)
    lon_min = t.x / n * 360.0 - 180.0
    lon_max = (t.x + 1) / n * 360.0 - 180.0
    lat_max = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * t.y / n))))
    lat_min = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (t.y + 1) / n))))
    return lon_min, lat_min, lon_max, lat_max


def point_to_tile(p: GeoPoint, z: int) -> TileRef:
    """Tile containing point ``p`` at zoom ``z``."""
    if z < 0 or z > 30:
        raise DomainError(f"zoom {z} out of range")
    n = 1 << z
    x = int((p.lon + 180.0) / 360.0 * n)
    lat_rad = math.radians(p.lat)
    y = int((1.0 - math.log(math.tan(lat_rad) + 1.0 / math.cos(lat_rad)) / math.pi) / 2.0 * n)
    return TileRef(z, min(max(x, 0), n - 1), min(max(y, 0), n - 1))


def tile_ground_size_m(t: TileRef) -> float:
    """East-west ground extent of the tile at its center latitude."""
    c = tile_center(t)
    return EQUATOR_CIRCUMFERENCE_M / float(1 << t.z) * math.cos(math.radians(c.lat))


def geo_distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance in meters on a sphere of radius EARTH_RADIUS_M."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    s = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def _on_segment(px, py, ax, ay, bx, by) -> bool:
    # Collinearity scaled by segment extent, then a bounding-box check.
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    scale = max(abs(bx - ax), abs(by - ay), 1e-30)
    if abs(cross) > 1e-12 * scale:
        return False
    return (
        min(ax, bx) - 1e-15 <= px <= max(ax, bx) + 1e-15
        and min(ay, by) - 1e-15 <= py <= max(ay, by) + 1e-15
    )


def point_in_polygon(p: GeoPoint, poly: Polygon) -> bool:
    """Even-odd ray casting; points on the boundary count as inside."""
    x, y = p.lon, p.lat
    ring = poly.ring
    for i in range(len(ring) - 1):
        if _on_segment(x, y, ring[i].lon, ring[i].lat, ring[i + 1].lon, ring[i + 1].lat):
            return True
    inside = False
    for i in range(len(ring) - 1):
        ax, ay = ring[i].lon, ring[i].lat
        bx, by = ring[i + 1].lon, ring[i + 1].lat
        if (ay > y) != (by > y):
            x_cross = ax + (y - ay) / (by - ay) * (bx - ax)
            if x < x_cross:
                inside = not inside
    return inside


def _aeq_project(p: GeoPoint, center: GeoPoint) -> tuple[float, float]:
    """Azimuthal-equidistant projection of ``p`` around ``center`` (meters)."""
    lat0, lon0 = math.radians(center.lat), math.radians(center.lon)
    lat, lon = math.radians(p.lat), math.radians(p.lon)
    dlon = lon - lon0
    cos_c = math.sin(lat0) * math.sin(lat) + math.cos(lat0) * math.cos(lat) * math.cos(dlon)
    cos_c = min(1.0, max(-1.0, cos_c))
    c = math.acos(cos_c)
    k = 1.0 if c < 1e-12 else c / math.sin(c)
    x = EARTH_RADIUS_M * k * math.cos(lat) * math.sin(dlon)
    y = EARTH_RADIUS_M * k * (
        math.cos(lat0) * math.sin(lat) - math.sin(lat0) * math.cos(lat) * math.cos(dlon)
    )
    return x, y


def polygon_centroid(poly: Polygon) -> GeoPoint:
    """Vertex mean of the ring; adequate as a local projection center."""
    verts = poly.ring[:-1]
    lon = sum(v.lon for v in verts) / len(verts)
    lat = sum(v.lat for v in verts) / len(verts)
    return GeoPoint(lon, lat)


def polygon_area_m2(poly: Polygon) -> float:
    """|shoelace| of the ring projected azimuthal-equidistant at its centroid."""
    center = polygon_centroid(poly)
    pts = [_aeq_project(v, center) for v in poly.ring]
    acc = 0.0
    for (x1, y1), (x2, y2) in zip(pts[:-1], pts[1:]):
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0
