"""Construction of the per-tile training datasets.

Four label families are derived from a city bundle:

* a gravity vector per tile: distance-weighted sum of per-category POI
  embedding vectors, with the distance to the nearest instance of each
  category (kilometers, clamped below at one meter);
* a 4-bit multilabel: is the nearest instance of each category strictly
  within the radius gamma;
* the log mean building floor area of the tile;
* the log area-weighted mean nightlight radiance over the tile footprint.

Construction is pure per tile and the output lists are sorted by tile_id,
so results do not depend on iteration order.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .bundle import POI_CATEGORIES, CityBundle, ImageTile, NightlightRaster, PoiRecord
from .errors import DatasetError, ValidationError
from .geo import GeoPoint, Polygon, geo_distance_m, tile_bounds, tile_center

DISTANCE_FLOOR_M = 1.0
DEFAULT_GAMMA_M = 2000.0

__all__ = [
    "AccessSample",
    "MorphSample",
    "EconSample",
    "PoiEmbeddingTable",
    "distance_vector",
    "gravity_embedding",
    "radius_multilabel",
    "floor_area",
    "nightlight_intensity",
    "build_all",
    "write_sample_csvs",
    "DISTANCE_FLOOR_M",
    "DEFAULT_GAMMA_M",
]


@dataclass
class PoiEmbeddingTable:
    """One embedding vector per POI category, row order = POI_CATEGORIES."""

    vectors: np.ndarray  # (4, dim)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(POI_CATEGORIES):
            raise ValidationError(f"poi table must be ({len(POI_CATEGORIES)}, dim), got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("poi table has non-finite entries")
        self.vectors = v

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def default_poi_table(seed: int, dim: int = 16) -> PoiEmbeddingTable:
    """Seeded scaled-uniform table; fixed through dataset construction."""
    from .rng import substream

    bound = 1.0 / np.sqrt(dim)
    return PoiEmbeddingTable(substream(seed, "poi_table").uniform(-bound, bound, (len(POI_CATEGORIES), dim)))


@dataclass
class AccessSample:
    tile_id: str
    distances_m: np.ndarray  # (4,)
    gravity: np.ndarray      # (dim,)
    multilabel: np.ndarray   # (4,) of {0.0, 1.0}


@dataclass
class MorphSample:
    tile_id: str
    log_fa: float


@dataclass
class EconSample:
    tile_id: str
    log_ni: float


def distance_vector(tile: ImageTile, pois: list[PoiRecord]) -> np.ndarray:
    """Meters from the tile center to the nearest POI of each category."""
    center = tile_center(tile.tile)
    out = np.full(len(POI_CATEGORIES), np.inf)
    for poi in pois:
        j = POI_CATEGORIES.index(poi.category)
        d = geo_distance_m(center, poi.location)
        if d < out[j]:
            out[j] = d
    for j, cat in enumerate(POI_CATEGORIES):
        if not np.isfinite(out[j]):
            raise DatasetError(f"no POI of category {cat!r} in bundle")
    return np.maximum(out, DISTANCE_FLOOR_M)


def gravity_embedding(distances_m: np.ndarray, table: PoiEmbeddingTable) -> np.ndarray:
    """Sum of category vectors weighted by inverse distance in kilometers."""
    d_km = np.asarray(distances_m, dtype=np.float64) / 1000.0
    return (table.vectors / d_km[:, None]).sum(axis=0)


def radius_multilabel(distances_m: np.ndarray, gamma_m: float) -> np.ndarray:
    """1.0 where the category's nearest instance is strictly within gamma."""
    if gamma_m <= 0:
        raise DatasetError(f"gamma must be positive, got {gamma_m}")
    return (np.asarray(distances_m, dtype=np.float64) < gamma_m).astype(np.float64)


def _ring_centroid_lonlat(poly: Polygon) -> tuple[float, float]:
    # Shoelace centroid on raw lon/lat; exact enough at building scale.
    ring = poly.ring
    a6 = 0.0
    cx = cy = 0.0
    for p, q in zip(ring[:-1], ring[1:]):
        cross = p.lon * q.lat - q.lon * p.lat
        a6 += cross
        cx += (p.lon + q.lon) * cross
        cy += (p.lat + q.lat) * cross
    if abs(a6) < 1e-30:
        verts = ring[:-1]
        return (sum(v.lon for v in verts) / len(verts), sum(v.lat for v in verts) / len(verts))
    return cx / (3.0 * a6), cy / (3.0 * a6)


def floor_area(tile: ImageTile, buildings: list[Polygon]) -> float:
    """Mean footprint area of buildings whose centroid falls in the tile.

    Containment is half-open (west and north edges in, east and south out,
    matching the tile-grid floor convention) so a centroid on a shared tile
    edge is counted exactly once citywide.  Returns 0 for building-free
    tiles.
    """
    from .geo import polygon_area_m2

    lon0, lat0, lon1, lat1 = tile_bounds(tile.tile)
    areas = []
    for b in buildings:
        clon, clat = _ring_centroid_lonlat(b)
        if lon0 <= clon < lon1 and lat0 < clat <= lat1:
            areas.append(polygon_area_m2(b))
    if not areas:
        return 0.0
    return float(sum(areas) / len(areas))


def _band_area(lat0: float, lat1: float, lon0: float, lon1: float) -> float:
    # Relative spherical area of a lon/lat rectangle.
    return max(0.0, math.radians(lon1 - lon0)) * max(
        0.0, math.sin(math.radians(lat1)) - math.sin(math.radians(lat0))
    )


def nightlight_intensity(tile: ImageTile, raster: NightlightRaster) -> float:
    """Area-weighted mean radiance of raster cells overlapping the tile."""
    lon0, lat0, lon1, lat1 = tile_bounds(tile.tile)
    if lon1 <= raster.lon_min or lon0 >= raster.lon_max or lat1 <= raster.lat_min or lat0 >= raster.lat_max:
        raise DatasetError(f"tile {tile.tile_id} does not intersect the nightlight raster")

    dx = (raster.lon_max - raster.lon_min) / raster.cols
    dy = (raster.lat_max - raster.lat_min) / raster.rows
    c_lo = max(0, int(math.floor((lon0 - raster.lon_min) / dx)))
    c_hi = min(raster.cols - 1, int(math.ceil((lon1 - raster.lon_min) / dx)) - 1)
    r_lo = max(0, int(math.floor((raster.lat_max - lat1) / dy)))
    r_hi = min(raster.rows - 1, int(math.ceil((raster.lat_max - lat0) / dy)) - 1)

    total_w = 0.0
    acc = 0.0
    for r in range(r_lo, r_hi + 1):
        for c in range(c_lo, c_hi + 1):
            glon0, glat0, glon1, glat1 = raster.cell_bounds(r, c)
            w = _band_area(
                max(lat0, glat0), min(lat1, glat1), max(lon0, glon0), min(lon1, glon1)
            )
            if w > 0.0:
                acc += w * raster.values[r, c]
                total_w += w
    if total_w <= 0.0:
        raise DatasetError(f"tile {tile.tile_id} has zero-area raster overlap")
    return acc / total_w


def _haversine_matrix(lon1, lat1, lon2, lat2) -> np.ndarray:
    """Pairwise haversine distances (meters) between two point sets."""
    from .geo import EARTH_RADIUS_M

    la1, la2 = np.radians(lat1)[:, None], np.radians(lat2)[None, :]
    dla = la2 - la1
    dlo = np.radians(lon2)[None, :] - np.radians(lon1)[:, None]
    s = np.sin(dla / 2.0) ** 2 + np.cos(la1) * np.cos(la2) * np.sin(dlo / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def _all_distance_vectors(tiles, pois) -> np.ndarray:
    centers = [tile_center(t.tile) for t in tiles]
    c_lon = np.array([c.lon for c in centers])
    c_lat = np.array([c.lat for c in centers])
    out = np.empty((len(tiles), len(POI_CATEGORIES)))
    for j, cat in enumerate(POI_CATEGORIES):
        pts = [p.location for p in pois if p.category == cat]
        if not pts:
            raise DatasetError(f"no POI of category {cat!r} in bundle")
        d = _haversine_matrix(c_lon, c_lat, np.array([p.lon for p in pts]), np.array([p.lat for p in pts]))
        out[:, j] = d.min(axis=1)
    return np.maximum(out, DISTANCE_FLOOR_M)


def _all_floor_areas(tiles, buildings) -> np.ndarray:
    """Mean building area per tile by centroid bucketing on the tile grid."""
    from .geo import polygon_area_m2

    if not buildings:
        return np.zeros(len(tiles))
    cen = np.array([_ring_centroid_lonlat(b) for b in buildings])
    areas = np.array([polygon_area_m2(b) for b in buildings])
    sums: dict[tuple[int, int, int], list[float]] = {}
    zooms = {t.tile.z for t in tiles}
    out = np.zeros(len(tiles))
    for z in zooms:
        n = 1 << z
        xs = np.floor((cen[:, 0] + 180.0) / 360.0 * n).astype(np.int64)
        lat_rad = np.radians(cen[:, 1])
        ys = np.floor(
            (1.0 - np.log(np.tan(lat_rad) + 1.0 / np.cos(lat_rad)) / math.pi) / 2.0 * n
        ).astype(np.int64)
        for x, y, a in zip(xs, ys, areas):
            sums.setdefault((z, int(x), int(y)), []).append(float(a))
    for i, t in enumerate(tiles):
        bucket = sums.get((t.tile.z, t.tile.x, t.tile.y))
        out[i] = float(np.mean(bucket)) if bucket else 0.0
    return out


def build_all(
    bundle: CityBundle,
    table: PoiEmbeddingTable,
    gamma_m: float = DEFAULT_GAMMA_M,
) -> tuple[list[AccessSample], list[MorphSample], list[EconSample]]:
    """One sample per tile in each family, sorted by tile_id.

    Uses vectorized equivalents of the per-tile operations; the per-tile
    functions remain the reference semantics and the two paths are held
    together by tests.
    """
    seen = set()
    for t in bundle.tiles:
        if t.tile_id in seen:
            raise ValidationError(f"duplicate tile_id {t.tile_id}")
        seen.add(t.tile_id)

    tiles = sorted(bundle.tiles, key=lambda t: t.tile_id)
    if not tiles:
        return [], [], []
    distances = _all_distance_vectors(tiles, bundle.pois)
    fas = _all_floor_areas(tiles, bundle.buildings)

    access, morph, econ = [], [], []
    for i, t in enumerate(tiles):
        d = distances[i]
        access.append(
            AccessSample(t.tile_id, d, gravity_embedding(d, table), radius_multilabel(d, gamma_m))
        )
        morph.append(MorphSample(t.tile_id, math.log1p(fas[i])))
        econ.append(EconSample(t.tile_id, math.log1p(nightlight_intensity(t, bundle.nightlight))))
    return access, morph, econ


def write_sample_csvs(
    access: list[AccessSample],
    morph: list[MorphSample],
    econ: list[EconSample],
    out_dir: str | os.PathLike,
) -> None:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "access_samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        dim = access[0].gravity.shape[0] if access else 0
        w.writerow(
            ["tile_id"]
            + [f"dist_{c}" for c in POI_CATEGORIES]
            + [f"within_{c}" for c in POI_CATEGORIES]
            + [f"gravity_{i}" for i in range(dim)]
        )
        for s in access:
            w.writerow(
                [s.tile_id]
                + [repr(float(v)) for v in s.distances_m]
                + [int(v) for v in s.multilabel]
                + [repr(float(v)) for v in s.gravity]
            )
    with open(os.path.join(out_dir, "morph_samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "log_fa"])
        for s in morph:
            w.writerow([s.tile_id, repr(s.log_fa)])
    with open(os.path.join(out_dir, "econ_samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "log_ni"])
        for s in econ:
            w.writerow([s.tile_id, repr(s.log_ni)])
