"""Deterministic synthetic city generator with planted ground truth.

The generator plants one latent poverty level ``u`` per district and derives
three noisy per-district signals from it (accessibility, morphology,
economic activity).  Each signal drives both a label source and a visual
channel of the rendered tiles, so small encoders can recover them:

* morphology: building rectangles, count and size grow with the signal,
  drawn into R and G with intensity proportional to footprint area;
* accessibility: POI placement density and road-line density;
* economic: background brightness of the B channel and the nightlight
  radiance of the corresponding raster cells.

A ``confound_fraction`` of tiles is "industrial": very high radiance, zero
buildings, and large bright-blue blocks that match the residential
background in R and G.  Industrial prevalence varies across districts
(independently of ``u``), which is exactly what makes raw nightlight a
misleading proxy on this city.

Everything is drawn from named substreams of the single seed, so equal
arguments produce byte-identical bundles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import (
    TILE_SIZE,
    CityBundle,
    DistrictRecord,
    ImageTile,
    NightlightRaster,
    PoiRecord,
    poverty_headcount,
)
from .errors import DomainError
from .geo import (
    METERS_PER_DEG_LAT,
    GeoPoint,
    Polygon,
    TileRef,
    point_to_tile,
    polygon_area_m2,
    tile_bounds,
)
from .rng import substream

ZOOM = 18
ANCHOR_LON, ANCHOR_LAT = 104.9, 11.55

# Latent-signal shape: signal = clip(1 - SLOPE*u + noise, ...).
SLOPE = 0.8
DISTRICT_NOISE_SD = 0.18
SIGNAL_FLOOR, SIGNAL_CEIL = 0.05, 2.0
POPULATION = 10_000

# Rendering constants.
PIXEL_NOISE_HALFWIDTH = 0.05 * math.sqrt(3.0)  # uniform noise with sd 0.05
BACKGROUND_RG = 0.13
BACKGROUND_MORPH_GAIN = 0.03  # district context visible in the background
BACKGROUND_B = 0.10
ECON_GLOW_GAIN = 0.25
ROAD_SHADE = 0.45
# "Lot" blocks: large paved patches, bright in B with random R/G fill.
# They appear on industrial tiles and, more often in richer districts, on
# ordinary tiles too, so their content carries no floor-area information;
# attending them only injects noise into a floor-area readout.
LOT_RG_LO, LOT_RG_HI = 0.25, 0.85
LOT_B_LO, LOT_B_HI = 0.65, 1.0
LOT_B_SPECKLE = 0.10
LOT_P_BASE, LOT_P_MORPH = 0.18, 0.25
PATCHES_PER_SIDE = 8  # lots are aligned to 32-px patches
BLOCK_SIDE_PATCHES = 2
EMPTY_RESIDENTIAL_COEF = 0.25  # P(no buildings) grows with district poverty

# Label sources.
POI_RATE = 2.2
RESIDENTIAL_RADIANCE_GAIN = 26.0
INDUSTRIAL_RADIANCE = 80.0
EMPTY_CELL_RADIANCE = 0.2

__all__ = ["synth_city", "synth_city_with_truth", "SynthTruth", "DistrictTruth", "TileTruth"]


@dataclass
class DistrictTruth:
    district_id: int
    u: float
    access_signal: float
    morph_signal: float
    econ_signal: float
    population: int
    headcount: int
    n_industrial: int


@dataclass
class TileTruth:
    tile_id: str
    district_id: int
    industrial: bool
    floor_area: float
    n_buildings: int
    block_patches: tuple[int, ...]


@dataclass
class SynthTruth:
    """Generator ledger: what was planted, keyed for later comparison."""

    seed: int
    districts: list[DistrictTruth] = field(default_factory=list)
    tiles: dict[str, TileTruth] = field(default_factory=dict)

    def district(self, district_id: int) -> DistrictTruth:
        return self.districts[district_id]


def _signal(u: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - SLOPE * u + noise, SIGNAL_FLOOR, SIGNAL_CEIL)


def _apportion(total: int, weights: np.ndarray, cap: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` units, per-entry cap."""
    share = total * weights / weights.sum()
    counts = np.minimum(np.floor(share).astype(int), cap)
    remainder = share - np.floor(share)
    order = np.lexsort((np.arange(len(weights)), -remainder))
    left = total - counts.sum()
    k = 0
    while left > 0 and (counts < cap).any():
        i = order[k % len(order)]
        if counts[i] < cap:
            counts[i] += 1
            left -= 1
        k += 1
    return counts


def _rect_polygon(lon0, lat0, lon1, lat1) -> Polygon:
    return Polygon(
        (
            GeoPoint(lon0, lat0),
            GeoPoint(lon1, lat0),
            GeoPoint(lon1, lat1),
            GeoPoint(lon0, lat1),
            GeoPoint(lon0, lat0),
        )
    )


def _building_intensity(area_m2: float) -> float:
    return float(np.clip(0.28 + 0.0009 * area_m2, 0.28, 0.80))


def _paint_lots(img, blocks, rng) -> None:
    ps = TILE_SIZE // PATCHES_PER_SIDE * BLOCK_SIDE_PATCHES
    for bi, bj in blocks:
        rg = rng.uniform(LOT_RG_LO, LOT_RG_HI)
        b = rng.uniform(LOT_B_LO, LOT_B_HI)
        speckle = rng.uniform(-LOT_B_SPECKLE, LOT_B_SPECKLE, (ps, ps))
        sl = np.s_[bi * ps : (bi + 1) * ps, bj * ps : (bj + 1) * ps]
        img[sl + (0,)] = rg
        img[sl + (1,)] = rg
        img[sl + (2,)] = b + speckle


def _render_tile(rng, buildings_px, signals, industrial, blocks):
    """Compose one tile image; returns float pixels in [0,1]."""
    access_signal, morph_signal, econ_signal = signals
    img = np.empty((TILE_SIZE, TILE_SIZE, 3), dtype=np.float64)
    rg = BACKGROUND_RG + BACKGROUND_MORPH_GAIN * morph_signal + 0.02 * rng.standard_normal()
    b_jitter = 0.03 * rng.standard_normal()
    img[:, :, 0] = rg
    img[:, :, 1] = rg
    img[:, :, 2] = BACKGROUND_B + ECON_GLOW_GAIN * econ_signal + b_jitter

    if not industrial:
        n_roads = int(np.clip(round(0.5 + 4.5 * access_signal + 0.6 * rng.standard_normal()), 0, 10))
        for r in range(n_roads):
            pos = int(rng.uniform(0.05, 0.95) * TILE_SIZE)
            if r % 2 == 0:
                img[pos : pos + 2, :, :] = ROAD_SHADE
            else:
                img[:, pos : pos + 2, :] = ROAD_SHADE
        for (r0, r1, c0, c1), intensity in buildings_px:
            img[r0:r1, c0:c1, 0] = intensity
            img[r0:r1, c0:c1, 1] = intensity
            img[r0:r1, c0:c1, 2] += 0.05
    _paint_lots(img, blocks, rng)

    img += rng.uniform(-PIXEL_NOISE_HALFWIDTH, PIXEL_NOISE_HALFWIDTH, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_city_with_truth(
    seed: int,
    n_districts: int = 20,
    tiles_per_district: int = 100,
    confound_fraction: float = 0.2,
) -> tuple[CityBundle, SynthTruth]:
    """Generate a city bundle and its ground-truth ledger."""
    if n_districts < 2:
        raise DomainError("n_districts must be >= 2")
    if tiles_per_district < 4:
        raise DomainError("tiles_per_district must be >= 4")
    if not (0.0 <= confound_fraction < 1.0):
        raise DomainError("confound_fraction must be in [0, 1)")

    grid_cols = math.ceil(math.sqrt(n_districts))
    grid_rows = math.ceil(n_districts / grid_cols)
    t_cols = math.ceil(math.sqrt(tiles_per_district))
    t_rows = math.ceil(tiles_per_district / t_cols)
    anchor = point_to_tile(GeoPoint(ANCHOR_LON, ANCHOR_LAT), ZOOM)
    x0, y0 = anchor.x, anchor.y
    n_tiles_total = n_districts * tiles_per_district

    u = substream(seed, "synth.u").uniform(0.0, 1.0, n_districts)
    noise_rng = substream(seed, "synth.signals")
    access_sig = _signal(u, DISTRICT_NOISE_SD * noise_rng.standard_normal(n_districts))
    morph_sig = _signal(u, DISTRICT_NOISE_SD * noise_rng.standard_normal(n_districts))
    econ_sig = _signal(u, DISTRICT_NOISE_SD * noise_rng.standard_normal(n_districts))

    # Industrial prevalence varies across districts, independent of u.
    total_industrial = int(round(confound_fraction * n_tiles_total))
    v = substream(seed, "synth.industrial").uniform(0.2, 1.8, n_districts)
    industrial_counts = _apportion(total_industrial, v, cap=tiles_per_district - 1)

    truth = SynthTruth(seed=seed)
    bundle = CityBundle()
    meters_per_deg_lon = METERS_PER_DEG_LAT * math.cos(math.radians(ANCHOR_LAT))

    for d in range(n_districts):
        gr, gc = divmod(d, grid_cols)
        bx, by = x0 + gc * t_cols, y0 + gr * t_rows
        lon_w, _, _, lat_n = tile_bounds(TileRef(ZOOM, bx, by))
        _, lat_s, lon_e, _ = tile_bounds(TileRef(ZOOM, bx + t_cols - 1, by + t_rows - 1))
        boundary = _rect_polygon(lon_w, lat_s, lon_e, lat_n)
        bundle.districts.append(
            DistrictRecord(d, f"district_{d:02d}", boundary, POPULATION, float(u[d]))
        )
        truth.districts.append(
            DistrictTruth(
                d, float(u[d]), float(access_sig[d]), float(morph_sig[d]),
                float(econ_sig[d]), POPULATION,
                poverty_headcount(bundle.districts[-1]), int(industrial_counts[d]),
            )
        )

        poi_rng = substream(seed, "synth.poi", d)
        for cat in ("hospital", "school", "townhall", "bank"):
            for _ in range(poi_rng.poisson(POI_RATE * access_sig[d])):
                lon = poi_rng.uniform(lon_w, lon_e)
                lat = poi_rng.uniform(lat_s, lat_n)
                bundle.pois.append(PoiRecord(cat, GeoPoint(lon, lat)))

        pick_rng = substream(seed, "synth.pick", d)
        industrial_set = set(
            pick_rng.choice(tiles_per_district, size=int(industrial_counts[d]), replace=False).tolist()
        )

        for i in range(tiles_per_district):
            tr, tc = divmod(i, t_cols)
            ref = TileRef(ZOOM, bx + tc, by + tr)
            tile_id = ref.tile_id
            tlon0, tlat0, tlon1, tlat1 = tile_bounds(ref)
            rng = substream(seed, "synth.tile", d, i)
            industrial = i in industrial_set

            buildings_px: list[tuple[tuple[int, int, int, int], float]] = []
            areas: list[float] = []
            coarse = PATCHES_PER_SIDE // BLOCK_SIDE_PATCHES
            if industrial:
                chosen = sorted(int(c) for c in rng.choice(coarse * coarse, size=BLOCKS_PER_TILE, replace=False))
                n_buildings = 0
            else:
                n_buildings = 2 + rng.poisson(1.5 + 2.5 * morph_sig[d])
                chosen = []
                if rng.uniform() < RESIDENTIAL_BLOCK_PROB:
                    chosen = [int(rng.integers(coarse * coarse))]
            blocks = [divmod(c, coarse) for c in chosen]
            patch_ids = []
            for bi, bj in blocks:
                for pi in range(BLOCK_SIDE_PATCHES):
                    for pj in range(BLOCK_SIDE_PATCHES):
                        patch_ids.append(
                            (bi * BLOCK_SIDE_PATCHES + pi) * PATCHES_PER_SIDE
                            + bj * BLOCK_SIDE_PATCHES + pj
                        )
            if not industrial:
                mean_side = 6.0 + 9.0 * morph_sig[d]
                for _ in range(n_buildings):
                    w_m = mean_side * rng.uniform(0.7, 1.3)
                    h_m = mean_side * rng.uniform(0.7, 1.3)
                    dlon = w_m / meters_per_deg_lon
                    dlat = h_m / METERS_PER_DEG_LAT
                    clon = rng.uniform(tlon0 + dlon, tlon1 - dlon)
                    clat = rng.uniform(tlat0 + dlat, tlat1 - dlat)
                    poly = _rect_polygon(clon - dlon / 2, clat - dlat / 2, clon + dlon / 2, clat + dlat / 2)
                    bundle.buildings.append(poly)
                    area = polygon_area_m2(poly)
                    areas.append(area)
                    c0 = int((clon - dlon / 2 - tlon0) / (tlon1 - tlon0) * TILE_SIZE)
                    c1 = int((clon + dlon / 2 - tlon0) / (tlon1 - tlon0) * TILE_SIZE)
                    r0 = int((tlat1 - (clat + dlat / 2)) / (tlat1 - tlat0) * TILE_SIZE)
                    r1 = int((tlat1 - (clat - dlat / 2)) / (tlat1 - tlat0) * TILE_SIZE)
                    buildings_px.append(((r0, max(r1, r0 + 1), c0, max(c1, c0 + 1)), _building_intensity(area)))

            img = _render_tile(
                rng, buildings_px, (access_sig[d], morph_sig[d], econ_sig[d]), industrial, blocks
            )
            bundle.tiles.append(ImageTile.from_unit_floats(tile_id, ref, img, d))
            fa = float(np.mean(areas)) if areas else 0.0
            truth.tiles[tile_id] = TileTruth(
                tile_id, d, industrial, fa, n_buildings, tuple(patch_ids)
            )

    # Safety POIs so every category exists at least once citywide.
    lon_w0, _, _, lat_n0 = tile_bounds(TileRef(ZOOM, x0, y0))
    _, lat_s1, lon_e1, _ = tile_bounds(
        TileRef(ZOOM, x0 + grid_cols * t_cols - 1, y0 + grid_rows * t_rows - 1)
    )
    c_lon, c_lat = (lon_w0 + lon_e1) / 2, (lat_s1 + lat_n0) / 2
    for cat_idx, cat in enumerate(("hospital", "school", "townhall", "bank")):
        bundle.pois.append(
            PoiRecord(cat, GeoPoint(c_lon + cat_idx * 10.0 / meters_per_deg_lon, c_lat))
        )

    # Nightlight raster: one cell per tile position, regular in lon/lat.
    rows, cols = grid_rows * t_rows, grid_cols * t_cols
    values = np.empty((rows, cols), dtype=np.float64)
    cell_rng = substream(seed, "synth.nightlight")
    tile_lookup = {(t.tile.x, t.tile.y): t for t in bundle.tiles}
    dlon = (lon_e1 - lon_w0) / cols
    dlat = (lat_n0 - lat_s1) / rows
    for r in range(rows):
        for c in range(cols):
            center = GeoPoint(lon_w0 + (c + 0.5) * dlon, lat_n0 - (r + 0.5) * dlat)
            owner = tile_lookup.get((point_to_tile(center, ZOOM).x, point_to_tile(center, ZOOM).y))
            eta = cell_rng.standard_normal()
            if owner is None:
                values[r, c] = EMPTY_CELL_RADIANCE
            elif truth.tiles[owner.tile_id].industrial:
                values[r, c] = max(0.0, INDUSTRIAL_RADIANCE * (1.0 + 0.08 * eta))
            else:
                s = econ_sig[owner.district_id]
                values[r, c] = max(0.0, 1.0 + RESIDENTIAL_RADIANCE_GAIN * s * (1.0 + 0.08 * eta))
    bundle.nightlight = NightlightRaster(lon_w0, lat_s1, lon_e1, lat_n0, values)

    bundle.tiles.sort(key=lambda t: t.tile_id)
    bundle.validate()
    return bundle, truth


def synth_city(
    seed: int,
    n_districts: int = 20,
    tiles_per_district: int = 100,
    confound_fraction: float = 0.2,
) -> CityBundle:
    """Deterministic synthetic city; see :func:`synth_city_with_truth`."""
    bundle, _ = synth_city_with_truth(seed, n_districts, tiles_per_district, confound_fraction)
    return bundle


def write_truth(truth: SynthTruth, out_dir: str) -> None:
    """Ledger CSVs next to a generated bundle (not part of the bundle)."""
    import csv
    import os

    with open(os.path.join(out_dir, "truth_districts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["district_id", "u", "access_signal", "morph_signal", "econ_signal",
                    "population", "headcount", "n_industrial"])
        for d in truth.districts:
            w.writerow([d.district_id, repr(d.u), repr(d.access_signal), repr(d.morph_signal),
                        repr(d.econ_signal), d.population, d.headcount, d.n_industrial])
    with open(os.path.join(out_dir, "truth_tiles.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "district_id", "industrial", "floor_area", "n_buildings", "block_patches"])
        for tid in sorted(truth.tiles):
            t = truth.tiles[tid]
            w.writerow([t.tile_id, t.district_id, int(t.industrial), repr(t.floor_area),
                        t.n_buildings, ";".join(str(p) for p in t.block_patches)])
