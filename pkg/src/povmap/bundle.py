"""City bundle: domain records plus the on-disk directory format.

A bundle directory holds::

    manifest.csv     tile_id,z,x,y,district_id,path   (district_id may be empty)
    tiles/*.png      8-bit RGB, 256x256
    pois.geojson     FeatureCollection of Points with a "category" property
    buildings.geojson FeatureCollection of Polygons (exterior rings only)
    nightlight.csv   header: lon_min,lat_min,lon_max,lat_max,rows,cols
                     then rows lines of cols radiance values (row 0 = north)
    districts.csv    district_id,name,population,poverty_rate,boundary_wkt

All floats are written with ``repr`` so a write/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DomainError, ValidationError
from .geo import GeoPoint, Polygon, TileRef

TILE_SIZE = 256
POI_CATEGORIES = ("hospital", "school", "townhall", "bank")

__all__ = [
    "TILE_SIZE",
    "POI_CATEGORIES",
    "ImageTile",
    "PoiRecord",
    "NightlightRaster",
    "DistrictRecord",
    "CityBundle",
    "poverty_headcount",
    "load_bundle",
    "write_bundle",
    "polygon_to_wkt",
    "polygon_from_wkt",
]


@dataclass
class ImageTile:
    """One 256x256 RGB tile. Pixels are stored quantized (8 bit) and exposed
    dequantized to [0,1]; disk round trips are therefore lossless."""

    tile_id: str
    tile: TileRef
    pixels_u8: np.ndarray
    district_id: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels_u8)
        if px.shape != (TILE_SIZE, TILE_SIZE, 3) or px.dtype != np.uint8:
            raise ValidationError(
                f"tile {self.tile_id}: pixels must be uint8 {TILE_SIZE}x{TILE_SIZE}x3, "
                f"got {px.dtype} {px.shape}"
            )
        self.pixels_u8 = px

    @property
    def pixels(self) -> np.ndarray:
        """Float64 pixels in [0,1]."""
        return self.pixels_u8.astype(np.float64) / 255.0

    @classmethod
    def from_unit_floats(cls, tile_id, tile, pixels, district_id=None) -> "ImageTile":
        px = np.asarray(pixels, dtype=np.float64)
        if px.shape != (TILE_SIZE, TILE_SIZE, 3):
            raise ValidationError(f"tile {tile_id}: pixels must be {TILE_SIZE}x{TILE_SIZE}x3")
        if not np.isfinite(px).all():
            raise ValidationError(f"tile {tile_id}: pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(f"tile {tile_id}: pixels outside [0,1]")
        u8 = np.rint(px * 255.0).astype(np.uint8)
        return cls(tile_id, tile, u8, district_id)


@dataclass(frozen=True)
class PoiRecord:
    category: str
    location: GeoPoint

    def __post_init__(self):
        if self.category not in POI_CATEGORIES:
            raise ValidationError(
                f"poi category {self.category!r} not in {POI_CATEGORIES}"
            )


@dataclass
class NightlightRaster:
    """Regular lon/lat grid of radiance values; row 0 is the northernmost."""

    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float
    values: np.ndarray  # (rows, cols) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValidationError("nightlight: values must be a non-empty 2-D grid")
        if not np.isfinite(v).all():
            raise ValidationError("nightlight: non-finite radiance value")
        if v.min() < 0:
            raise ValidationError("nightlight: negative radiance value")
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValidationError("nightlight: degenerate bounds")
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def cell_bounds(self, r: int, c: int) -> tuple[float, float, float, float]:
        dx = (self.lon_max - self.lon_min) / self.cols
        dy = (self.lat_max - self.lat_min) / self.rows
        lon0 = self.lon_min + c * dx
        lat1 = self.lat_max - r * dy
        return lon0, lat1 - dy, lon0 + dx, lat1


@dataclass
class DistrictRecord:
    district_id: int
    name: str
    boundary: Polygon
    population: int
    poverty_rate: float

    def __post_init__(self):
        if self.population < 0:
            raise ValidationError(f"district {self.district_id}: population < 0")
        if not (0.0 <= self.poverty_rate <= 1.0):
            raise ValidationError(
                f"district {self.district_id}: poverty_rate {self.poverty_rate} outside [0,1]"
            )


@dataclass
class CityBundle:
    tiles: list[ImageTile] = field(default_factory=list)
    pois: list[PoiRecord] = field(default_factory=list)
    buildings: list[Polygon] = field(default_factory=list)
    nightlight: NightlightRaster | None = None
    districts: list[DistrictRecord] = field(default_factory=list)

    def validate(self) -> None:
        seen = set()
        for t in self.tiles:
            if t.tile_id in seen:
                raise ValidationError(f"duplicate tile_id {t.tile_id} in bundle")
            seen.add(t.tile_id)
        known = {d.district_id for d in self.districts}
        for t in self.tiles:
            if t.district_id is not None and t.district_id not in known:
                raise ValidationError(
                    f"tile {t.tile_id}: district_id {t.district_id} not in districts table"
                )

    def district_by_id(self, district_id: int) -> DistrictRecord:
        for d in self.districts:
            if d.district_id == district_id:
                return d
        raise KeyError(district_id)


def poverty_headcount(d: DistrictRecord) -> int:
    """population x poverty_rate, rounded half away from zero."""
    return int(math.floor(d.population * d.poverty_rate + 0.5))


# ---------------------------------------------------------------------------
# serialization helpers


def _fmt(x: float) -> str:
    return repr(float(x))


def polygon_to_wkt(poly: Polygon) -> str:
    pts = ", ".join(f"{_fmt(p.lon)} {_fmt(p.lat)}" for p in poly.ring)
    return f"POLYGON (({pts}))"


def polygon_from_wkt(wkt: str) -> Polygon:
    s = wkt.strip()
    if not s.upper().startswith("POLYGON"):
        raise ValidationError(f"not a WKT polygon: {wkt[:40]!r}")
    inner = s[s.index("((") + 2 : s.rindex("))")]
    pts = []
    for chunk in inner.split(","):
        lon_s, lat_s = chunk.split()
        pts.append(GeoPoint(float(lon_s), float(lat_s)))
    return Polygon(tuple(pts))


def _point_feature(poi: PoiRecord) -> dict:
    return {
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [poi.location.lon, poi.location.lat]},
        "properties": {"category": poi.category},
    }


def _polygon_feature(poly: Polygon) -> dict:
    coords = [[[p.lon, p.lat] for p in poly.ring]]
    return {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": coords}, "properties": {}}


def write_bundle(bundle: CityBundle, root: str | os.PathLike) -> None:
    bundle.validate()
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "tiles"), exist_ok=True)

    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "z", "x", "y", "district_id", "path"])
        for t in sorted(bundle.tiles, key=lambda t: t.tile_id):
            did = "" if t.district_id is None else str(t.district_id)
            rel = f"tiles/{t.tile_id}.png"
            w.writerow([t.tile_id, t.tile.z, t.tile.x, t.tile.y, did, rel])
            Image.fromarray(t.pixels_u8, "RGB").save(os.path.join(root, rel), format="PNG")

    with open(os.path.join(root, "pois.geojson"), "w") as fh:
        fc = {"type": "FeatureCollection", "features": [_point_feature(p) for p in bundle.pois]}
        json.dump(fc, fh, sort_keys=True)

    with open(os.path.join(root, "buildings.geojson"), "w") as fh:
        fc = {"type": "FeatureCollection", "features": [_polygon_feature(b) for b in bundle.buildings]}
        json.dump(fc, fh, sort_keys=True)

    nl = bundle.nightlight
    with open(os.path.join(root, "nightlight.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([_fmt(nl.lon_min), _fmt(nl.lat_min), _fmt(nl.lon_max), _fmt(nl.lat_max), nl.rows, nl.cols])
        for r in range(nl.rows):
            w.writerow([_fmt(v) for v in nl.values[r]])

    with open(os.path.join(root, "districts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["district_id", "name", "population", "poverty_rate", "boundary_wkt"])
        for d in sorted(bundle.districts, key=lambda d: d.district_id):
            w.writerow([d.district_id, d.name, d.population, _fmt(d.poverty_rate), polygon_to_wkt(d.boundary)])


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"bundle file missing: {path}")
    return path


def load_bundle(root: str | os.PathLike) -> CityBundle:
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"bundle directory missing: {root}")

    districts = []
    with open(_require(os.path.join(root, "districts.csv")), newline="") as fh:
        for row in csv.DictReader(fh):
            districts.append(
                DistrictRecord(
                    district_id=int(row["district_id"]),
                    name=row["name"],
                    population=int(row["population"]),
                    poverty_rate=float(row["poverty_rate"]),
                    boundary=polygon_from_wkt(row["boundary_wkt"]),
                )
            )

    tiles = []
    with open(_require(os.path.join(root, "manifest.csv")), newline="") as fh:
        for row in csv.DictReader(fh):
            png = os.path.join(root, row["path"])
            if not os.path.exists(png):
                raise ValidationError(f"tile {row['tile_id']}: referenced image {row['path']} missing")
            arr = np.asarray(Image.open(png).convert("RGB"))
            ref = TileRef(int(row["z"]), int(row["x"]), int(row["y"]))
            did = int(row["district_id"]) if row["district_id"] != "" else None
            tiles.append(ImageTile(row["tile_id"], ref, arr, did))

    with open(_require(os.path.join(root, "pois.geojson"))) as fh:
        fc = json.load(fh)
    pois = []
    for feat in fc.get("features", []):
        lon, lat = feat["geometry"]["coordinates"]
        pois.append(PoiRecord(feat["properties"]["category"], GeoPoint(lon, lat)))

    with open(_require(os.path.join(root, "buildings.geojson"))) as fh:
        fc = json.load(fh)
    buildings = []
    for feat in fc.get("features", []):
        ring = [GeoPoint(lon, lat) for lon, lat in feat["geometry"]["coordinates"][0]]
        buildings.append(Polygon(tuple(ring)))

    with open(_require(os.path.join(root, "nightlight.csv")), newline="") as fh:
        rows_iter = csv.reader(fh)
        header = next(rows_iter)
        lon_min, lat_min, lon_max, lat_max = (float(v) for v in header[:4])
        n_rows, n_cols = int(header[4]), int(header[5])
        values = np.array([[float(v) for v in row] for row in rows_iter], dtype=np.float64)
    if values.shape != (n_rows, n_cols):
        raise ValidationError(
            f"nightlight: expected {n_rows}x{n_cols} values, got {values.shape}"
        )
    nightlight = NightlightRaster(lon_min, lat_min, lon_max, lat_max, values)

    out = CityBundle(tiles=tiles, pois=pois, buildings=buildings, nightlight=nightlight, districts=districts)
    out.validate()
    return out
