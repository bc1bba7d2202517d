"""Web-mercator slippy-map tile math (XYZ convention, spherical earth).

Conventions: y axis origin at the top (north), points on a tile's east or
south edge belong to the neighbouring tile (floor semantics), earth radius
6,378,137 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

EARTH_RADIUS_M = 6378137.0
TILE_SIZE_PX = 256
MAX_ZOOM = 22
# atan(sinh(pi)) in degrees: the latitude where the square mercator map ends.
MERCATOR_MAX_LAT = 85.05112878

GRID_ZOOM = 15  # analysis grid cells
DETAIL_ZOOM = 18  # imagery / detection tiles; one grid cell = 8x8 = 64 of these


class TileMathError(ValueError):
    """Raised for out-of-domain coordinates or zoom levels."""


def _normalize_lon(lon: float) -> float:
    lon = math.fmod(lon + 180.0, 360.0)
    if lon < 0:
        lon += 360.0
    return lon - 180.0


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 coordinate; lat limited to the mercator clamp, lon in [-180, 180)."""

    lat: float
    lon: float = field(default=0.0)

    def __post_init__(self) -> None:
        if not math.isfinite(self.lat) or not math.isfinite(self.lon):
            raise TileMathError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if abs(self.lat) > MERCATOR_MAX_LAT:
            raise TileMathError(
                f"latitude {self.lat} outside web-mercator range +-{MERCATOR_MAX_LAT}"
            )
        object.__setattr__(self, "lon", _normalize_lon(self.lon))


@dataclass(frozen=True)
class TileCoord:
    z: int
    x: int
    y: int

    def __post_init__(self) -> None:
        if not 0 <= self.z <= MAX_ZOOM:
            raise TileMathError(f"zoom {self.z} outside [0, {MAX_ZOOM}]")
        n = 1 << self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise TileMathError(f"tile ({self.z}/{self.x}/{self.y}) indices outside [0, {n})")


@dataclass(frozen=True)
class TileBBox:
    west: float
    south: float
    east: float
    north: float

    def __post_init__(self) -> None:
        if not (self.west < self.east and self.south < self.north):
            raise TileMathError("bbox requires west < east and south < north")

    def center(self) -> GeoPoint:
        return GeoPoint(lat=(self.south + self.north) / 2.0, lon=(self.west + self.east) / 2.0)


@dataclass(frozen=True)
class GridCell:
    """A zoom-15 analysis cell and the 64 zoom-18 tiles it contains."""

    coord: TileCoord
    children: tuple[TileCoord, ...]

    def __post_init__(self) -> None:
        if self.coord.z != GRID_ZOOM:
            raise TileMathError(f"grid cell must be zoom {GRID_ZOOM}")
        if len(self.children) != 64:
            raise TileMathError("grid cell must contain exactly 64 children")


def tile_count(z: int) -> int:
    """Total number of tiles at zoom z (2^z by 2^z)."""
    if z < 0:
        raise TileMathError(f"zoom {z} is negative")
    return 4**z


def latlon_to_tile(p: GeoPoint, z: int) -> TileCoord:
    """Tile containing p at zoom z (east/south edges exclusive via floor)."""
    if not 0 <= z <= MAX_ZOOM:
        raise TileMathError(f"zoom {z} outside [0, {MAX_ZOOM}]")
    n = 1 << z
    x = math.floor((p.lon + 180.0) / 360.0 * n)
    lat_rad = math.radians(p.lat)
    y = math.floor((1.0 - math.asinh(math.tan(lat_rad)) / math.pi) / 2.0 * n)
    # the clamp only matters exactly at the top/bottom map edge
    x = min(max(x, 0), n - 1)
    y = min(max(y, 0), n - 1)
    return TileCoord(z=z, x=x, y=y)


def _tile_x_to_lon(x: float, z: int) -> float:
    return x / (1 << z) * 360.0 - 180.0


def _tile_y_to_lat(y: float, z: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / (1 << z)))))


def tile_to_bbox(t: TileCoord) -> TileBBox:
    return TileBBox(
        west=_tile_x_to_lon(t.x, t.z),
        south=_tile_y_to_lat(t.y + 1, t.z),
        east=_tile_x_to_lon(t.x + 1, t.z),
        north=_tile_y_to_lat(t.y, t.z),
    )


def ground_resolution(lat: float, z: int) -> float:
    """Meters per pixel of a 256-px tile at the given latitude and zoom."""
    if abs(lat) > MERCATOR_MAX_LAT:
        raise TileMathError(f"latitude {lat} outside web-mercator range")
    if not 0 <= z <= MAX_ZOOM:
        raise TileMathError(f"zoom {z} outside [0, {MAX_ZOOM}]")
    return 2.0 * math.pi * EARTH_RADIUS_M * math.cos(math.radians(lat)) / (TILE_SIZE_PX * (1 << z))


def bbox_area_km2(b: TileBBox) -> float:
    """Spherical surface area of a lat/lon box in square kilometers."""
    band = math.sin(math.radians(b.north)) - math.sin(math.radians(b.south))
    return EARTH_RADIUS_M**2 * band * math.radians(b.east - b.west) / 1e6


def tile_area_km2(t: TileCoord) -> float:
    return bbox_area_km2(tile_to_bbox(t))


def grid_cell_of(t: TileCoord) -> GridCell:
    """Zoom-15 cell containing the given zoom-18 tile, with all 64 children."""
    if t.z != DETAIL_ZOOM:
        raise TileMathError(f"expected a zoom-{DETAIL_ZOOM} tile, got zoom {t.z}")
    shift = DETAIL_ZOOM - GRID_ZOOM
    parent = TileCoord(z=GRID_ZOOM, x=t.x >> shift, y=t.y >> shift)
    children = tuple(
        TileCoord(z=DETAIL_ZOOM, x=(parent.x << shift) + dx, y=(parent.y << shift) + dy)
        for dy in range(1 << shift)
        for dx in range(1 << shift)
    )
    return GridCell(coord=parent, children=children)


def mercator_xy(p: GeoPoint) -> tuple[float, float]:
    """Normalized web-mercator coordinates in [0, 1] x [0, 1] (y grows south)."""
    mx = (p.lon + 180.0) / 360.0
    my = (1.0 - math.asinh(math.tan(math.radians(p.lat))) / math.pi) / 2.0
    return mx, my


def pixel_of(p: GeoPoint, t: TileCoord) -> tuple[float, float]:
    """Fractional (col, row) pixel position of p within tile t.

    Linear in mercator space; may fall outside [0, 256) when p is outside t.
    """
    mx, my = mercator_xy(p)
    n = 1 << t.z
    return (mx * n - t.x) * TILE_SIZE_PX, (my * n - t.y) * TILE_SIZE_PX


def pixel_to_geo(t: TileCoord, col: float, row: float) -> GeoPoint:
    """Inverse of pixel_of for a fractional pixel position within tile t."""
    lon = _tile_x_to_lon(t.x + col / TILE_SIZE_PX, t.z)
    lat = _tile_y_to_lat(t.y + row / TILE_SIZE_PX, t.z)
    return GeoPoint(lat=lat, lon=lon)
