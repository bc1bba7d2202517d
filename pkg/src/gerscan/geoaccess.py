"""Geographic marginalization indicators: facility distances, DEM elevation and slope."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tiles import GeoPoint

MEAN_EARTH_RADIUS_M = 6371000.0
METERS_PER_DEGREE_LAT = math.pi * MEAN_EARTH_RADIUS_M / 180.0

FACILITY_CATEGORIES = (
    "city_center",
    "main_road",
    "bus_station",
    "education",
    "medical",
    "public_amenity",
    "marketplace",
    "industrial",
)

# default mapping from source tags to the eight indicator categories
DEFAULT_CATEGORY_MAP: dict[str, str] = {
    "sukhbaatar square": "city_center",
    "city center": "city_center",
    "primary": "main_road",
    "secondary": "main_road",
    "tertiary": "main_road",
    "trunk": "main_road",
    "bus station": "bus_station",
    "bus stop": "bus_station",
    "college": "education",
    "school": "education",
    "university": "education",
    "dentist": "medical",
    "doctors": "medical",
    "hospital": "medical",
    "pharmacy": "medical",
    "community center": "public_amenity",
    "fire station": "public_amenity",
    "police": "public_amenity",
    "public building": "public_amenity",
    "post office": "public_amenity",
    "town hall": "public_amenity",
    "department store": "marketplace",
    "convenience": "marketplace",
    "mall": "marketplace",
    "market place": "marketplace",
    "supermarket": "marketplace",
    "industrial": "industrial",
}


class GeoAccessError(ValueError):
    pass


@dataclass(frozen=True)
class FacilityPoint:
    location: GeoPoint
    category: str
    source_class: str = ""

    def __post_init__(self) -> None:
        if self.category not in FACILITY_CATEGORIES:
            raise GeoAccessError(
                f"unknown facility category {self.category!r}; expected one of {FACILITY_CATEGORIES}"
            )


def categorize(source_class: str, mapping: dict[str, str] | None = None) -> str | None:
    """Map a free-form source tag to an indicator category (None when unmapped)."""
    table = DEFAULT_CATEGORY_MAP if mapping is None else mapping
    return table.get(source_class.strip().lower())


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on the mean-radius sphere."""
    la1, lo1, la2, lo2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = math.sin((la2 - la1) / 2.0) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2.0) ** 2
    return 2.0 * MEAN_EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def nearest_distance(p: GeoPoint, facilities: list[FacilityPoint]) -> float:
    if not facilities:
        raise GeoAccessError("no facilities to search")
    return min(haversine(p, f.location) for f in facilities)


class FacilityIndex:
    """Degree-bucket grid over facility points; exact nearest distances.

    Produces results identical to the linear scan: buckets are searched in
    expanding rings and the scan stops only once the ring's lower distance
    bound exceeds the best hit.
    """

    def __init__(self, facilities: list[FacilityPoint], bucket_deg: float = 0.02):
        if bucket_deg <= 0:
            raise GeoAccessError("bucket_deg must be positive")
        self.bucket_deg = bucket_deg
        self._buckets: dict[tuple[int, int], list[FacilityPoint]] = defaultdict(list)
        for f in facilities:
            self._buckets[self._key(f.location)].append(f)
        self._n = len(facilities)

    def _key(self, p: GeoPoint) -> tuple[int, int]:
        return (int(math.floor(p.lat / self.bucket_deg)), int(math.floor(p.lon / self.bucket_deg)))

    def nearest_distance(self, p: GeoPoint) -> float:
        if self._n == 0:
            raise GeoAccessError("no facilities to search")
        ki, kj = self._key(p)
        best = math.inf
        ring = 0
        # conservative meters-per-bucket lower bound (lat scale >= lon scale everywhere)
        bucket_m = self.bucket_deg * METERS_PER_DEGREE_LAT
        while True:
            cells = self._ring_cells(ki, kj, ring)
            for cell in cells:
                for f in self._buckets.get(cell, ()):
                    d = haversine(p, f.location)
                    if d < best:
                        best = d
            if best < math.inf and (ring * bucket_m) > best:
                return best
            ring += 1
            if ring > 2_000_000:  # degenerate fallback; all buckets visited long before
                return best

    @staticmethod
    def _ring_cells(ki: int, kj: int, ring: int) -> list[tuple[int, int]]:
        if ring == 0:
            return [(ki, kj)]
        cells = []
        for dj in range(-ring, ring + 1):
            cells.append((ki - ring, kj + dj))
            cells.append((ki + ring, kj + dj))
        for di in range(-ring + 1, ring):
            cells.append((ki + di, kj - ring))
            cells.append((ki + di, kj + ring))
        return cells


def mean_nearest_distance(
    gers: list[GeoPoint],
    facilities: list[FacilityPoint],
    category: str,
    use_index: bool = False,
) -> float:
    """Mean over gers of the distance to the closest facility of one category."""
    if not gers:
        raise GeoAccessError("no ger locations given")
    of_cat = [f for f in facilities if f.category == category]
    if not of_cat:
        raise GeoAccessError(f"no facilities in category {category!r}")
    if use_index:
        index = FacilityIndex(of_cat)
        return sum(index.nearest_distance(g) for g in gers) / len(gers)
    return sum(nearest_distance(g, of_cat) for g in gers) / len(gers)


@dataclass
class DemGrid:
    """Elevation raster; origin is the lower-left cell center, row 0 is the north row."""

    origin: GeoPoint
    cell_size: float
    values: np.ndarray  # (nrows, ncols) float, row 0 = northmost
    nodata: float = -9999.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2 or self.values.shape[1] < 2:
            raise GeoAccessError("DEM must be a 2-D grid with nrows, ncols >= 2")
        if self.cell_size <= 0:
            raise GeoAccessError("cell_size must be positive")

    @property
    def nrows(self) -> int:
        return int(self.values.shape[0])

    @property
    def ncols(self) -> int:
        return int(self.values.shape[1])

    def _fractional_index(self, p: GeoPoint) -> tuple[float, float]:
        """(row, col) with integer values at cell centers; row grows south."""
        col = (p.lon - self.origin.lon) / self.cell_size
        row = (self.nrows - 1) - (p.lat - self.origin.lat) / self.cell_size
        return row, col

    def _cell(self, row: int, col: int) -> float:
        v = float(self.values[row, col])
        if v == self.nodata or not math.isfinite(v):
            raise GeoAccessError(f"nodata cell at row={row} col={col}")
        return v


def read_esri_ascii(path: str | Path) -> DemGrid:
    """Parse an ESRI ASCII grid (ncols/nrows/xll*/yll*/cellsize/NODATA header)."""
    header: dict[str, float] = {}
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize", "nodata_value"):
                header[key] = float(parts[1])
            else:
                rows.append([float(v) for v in parts])
    for required in ("ncols", "nrows", "cellsize"):
        if required not in header:
            raise GeoAccessError(f"ESRI grid header missing {required}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    cell = header["cellsize"]
    if "xllcenter" in header:
        ox, oy = header["xllcenter"], header["yllcenter"]
    elif "xllcorner" in header:
        ox, oy = header["xllcorner"] + cell / 2.0, header["yllcorner"] + cell / 2.0
    else:
        raise GeoAccessError("ESRI grid header missing xllcorner/xllcenter")
    values = np.array([v for r in rows for v in r], dtype=np.float64)
    if values.size != nrows * ncols:
        raise GeoAccessError(f"expected {nrows * ncols} cells, found {values.size}")
    return DemGrid(
        origin=GeoPoint(lat=oy, lon=ox),
        cell_size=cell,
        values=values.reshape(nrows, ncols),
        nodata=header.get("nodata_value", -9999.0),
    )


def sample_elevation(dem: DemGrid, p: GeoPoint) -> float:
    """Bilinear interpolation of the four surrounding cell centers."""
    row, col = dem._fractional_index(p)
    if row < 0 or col < 0 or row > dem.nrows - 1 or col > dem.ncols - 1:
        raise GeoAccessError(f"point ({p.lat}, {p.lon}) outside DEM bounds")
    r0 = min(int(math.floor(row)), dem.nrows - 2)
    c0 = min(int(math.floor(col)), dem.ncols - 2)
    fr, fc = row - r0, col - c0
    z00 = dem._cell(r0, c0)
    z01 = dem._cell(r0, c0 + 1)
    z10 = dem._cell(r0 + 1, c0)
    z11 = dem._cell(r0 + 1, c0 + 1)
    top = z00 * (1 - fc) + z01 * fc
    bottom = z10 * (1 - fc) + z11 * fc
    return top * (1 - fr) + bottom * fr


def slope_degrees(dem: DemGrid, p: GeoPoint) -> float:
    """Slope at the cell containing p from central differences of its 3x3 neighborhood."""
    row, col = dem._fractional_index(p)
    r = int(round(row))
    c = int(round(col))
    if r < 1 or c < 1 or r > dem.nrows - 2 or c > dem.ncols - 2:
        raise GeoAccessError("slope needs a full 3x3 neighborhood inside the DEM")
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            dem._cell(r + dr, c + dc)
    dx_m = dem.cell_size * METERS_PER_DEGREE_LAT * math.cos(math.radians(p.lat))
    dy_m = dem.cell_size * METERS_PER_DEGREE_LAT
    dzdx = (dem._cell(r, c + 1) - dem._cell(r, c - 1)) / (2.0 * dx_m)
    # row index grows south, so the southern neighbor is r + 1
    dzdy = (dem._cell(r - 1, c) - dem._cell(r + 1, c)) / (2.0 * dy_m)
    return math.degrees(math.atan(math.hypot(dzdx, dzdy)))


@dataclass
class IndicatorRow:
    indicator: str
    period: str
    value: float
    source_class: str = ""


def indicator_report(
    gers_by_period: dict[str, list[GeoPoint]],
    facilities: list[FacilityPoint],
    dem: DemGrid | None = None,
    class_labels: dict[str, str] | None = None,
) -> list[IndicatorRow]:
    """Table of per-period accessibility indicators (one row per category and period)."""
    labels = class_labels or {}
    rows: list[IndicatorRow] = []
    present = {f.category for f in facilities}
    for period in sorted(gers_by_period):
        gers = gers_by_period[period]
        if dem is not None:
            elev, slope, n_ok = 0.0, 0.0, 0
            for g in gers:
                try:
                    e = sample_elevation(dem, g)
                    s = slope_degrees(dem, g)
                except GeoAccessError:
                    continue
                elev += e
                slope += s
                n_ok += 1
            if n_ok:
                rows.append(IndicatorRow("elevation_m", period, elev / n_ok))
                rows.append(IndicatorRow("inclination_deg", period, slope / n_ok))
        for cat in FACILITY_CATEGORIES:
            if cat not in present:
                continue
            rows.append(
                IndicatorRow(
                    f"distance_to_{cat}_m",
                    period,
                    mean_nearest_distance(gers, facilities, cat),
                    labels.get(cat, ""),
                )
            )
    return rows


def write_indicator_csv(rows: list[IndicatorRow], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["indicator", "period", "value", "class"])
        for r in rows:
            w.writerow([r.indicator, r.period, f"{r.value:.4f}", r.source_class])
