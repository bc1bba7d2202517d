"""Tile pyramid math: conversions, resolution, grid cells."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gerscan import tiles
from gerscan.tiles import GeoPoint, TileCoord, TileMathError


def slippy_tile_oracle(lat: float, lon: float, z: int) -> tuple[int, int]:
    """Independent evaluation of the standard slippy-map formula."""
    n = 2**z
    x = int(math.floor((lon + 180.0) / 360.0 * n))
    lat_rad = math.radians(lat)
    y = int(math.floor((1.0 - math.log(math.tan(lat_rad) + 1.0 / math.cos(lat_rad)) / math.pi) / 2.0 * n))
    return min(max(x, 0), n - 1), min(max(y, 0), n - 1)


def test_tile_count():
    assert tiles.tile_count(0) == 1
    assert tiles.tile_count(1) == 4
    assert tiles.tile_count(18) == 68_719_476_736
    with pytest.raises(TileMathError):
        tiles.tile_count(-1)


def test_latlon_to_tile_equator_prime_meridian():
    assert tiles.latlon_to_tile(GeoPoint(0.0, 0.0), 1) == TileCoord(1, 1, 1)


def test_latlon_to_tile_matches_oracle_over_ulaanbaatar():
    lat, lon = 47.918, 106.917
    t = tiles.latlon_to_tile(GeoPoint(lat, lon), 18)
    assert (t.x, t.y) == slippy_tile_oracle(lat, lon, 18)


@given(
    lat=st.floats(-85.0, 85.0),
    lon=st.floats(-180.0, 179.999),
    z=st.integers(0, 19),
)
def test_latlon_to_tile_matches_oracle_everywhere(lat: float, lon: float, z: int):
    t = tiles.latlon_to_tile(GeoPoint(lat, lon), z)
    assert (t.x, t.y) == slippy_tile_oracle(lat, lon, z)


def test_latitude_outside_mercator_range_rejected():
    with pytest.raises(TileMathError):
        GeoPoint(86.0, 0.0)
    with pytest.raises(TileMathError):
        GeoPoint(-89.0, 10.0)


def test_lon_normalized_to_half_open_range():
    assert GeoPoint(0.0, 180.0).lon == -180.0
    assert GeoPoint(0.0, 190.0).lon == pytest.approx(-170.0)
    assert GeoPoint(0.0, -200.0).lon == pytest.approx(160.0)


def test_whole_world_tile_bbox():
    b = tiles.tile_to_bbox(TileCoord(0, 0, 0))
    assert b.west == -180.0
    assert b.east == 180.0
    assert b.north == pytest.approx(85.0511, abs=1e-4)
    assert b.south == pytest.approx(-85.0511, abs=1e-4)


def test_adjacent_tiles_share_exactly_one_edge():
    a = tiles.tile_to_bbox(TileCoord(5, 10, 12))
    right = tiles.tile_to_bbox(TileCoord(5, 11, 12))
    below = tiles.tile_to_bbox(TileCoord(5, 10, 13))
    assert a.east == right.west
    assert a.south == below.north


def test_z18_tile_area_over_ulaanbaatar():
    t = tiles.latlon_to_tile(GeoPoint(47.918, 106.917), 18)
    assert tiles.tile_area_km2(t) == pytest.approx(0.0105, abs=0.0005)


def test_ground_resolution_fixtures():
    # oracle: 2*pi*R/256 at the equator, zoom 0
    assert tiles.ground_resolution(0.0, 0) == pytest.approx(156_543.034, abs=1e-3)
    assert tiles.ground_resolution(47.92, 18) == pytest.approx(0.400, abs=0.005)


@given(lat=st.floats(-85.0, 85.0), z=st.integers(0, 21))
def test_resolution_halves_each_zoom_step(lat: float, z: int):
    assert tiles.ground_resolution(lat, z + 1) == tiles.ground_resolution(lat, z) / 2.0


def test_grid_cell_parent_via_bitshift():
    cell = tiles.grid_cell_of(TileCoord(18, 208926, 91189))
    assert cell.coord == TileCoord(15, 26115, 11398)
    assert len(cell.children) == 64


def test_grid_cell_children_partition_parent():
    cell = tiles.grid_cell_of(TileCoord(18, 208926, 91214))
    parent_box = tiles.tile_to_bbox(cell.coord)
    child_boxes = [tiles.tile_to_bbox(c) for c in cell.children]
    assert len(set(cell.children)) == 64
    for c in cell.children:
        assert tiles.grid_cell_of(c).coord == cell.coord
    assert min(b.west for b in child_boxes) == parent_box.west
    assert max(b.east for b in child_boxes) == parent_box.east
    assert min(b.south for b in child_boxes) == pytest.approx(parent_box.south, abs=1e-12)
    assert max(b.north for b in child_boxes) == pytest.approx(parent_box.north, abs=1e-12)
    # no gaps/overlaps: child areas sum to the parent area
    assert sum(tiles.bbox_area_km2(b) for b in child_boxes) == pytest.approx(
        tiles.bbox_area_km2(parent_box), rel=1e-12
    )


def test_grid_cell_area_over_ulaanbaatar():
    cell = tiles.grid_cell_of(tiles.latlon_to_tile(GeoPoint(47.918, 106.917), 18))
    assert tiles.tile_area_km2(cell.coord) == pytest.approx(0.67, abs=0.01)


def test_grid_cell_rejects_wrong_zoom():
    with pytest.raises(TileMathError):
        tiles.grid_cell_of(TileCoord(15, 100, 100))


@settings(max_examples=200)
@given(lat=st.floats(-84.9, 84.9), lon=st.floats(-180.0, 179.999), z=st.integers(0, 19))
def test_round_trip_via_bbox_center(lat: float, lon: float, z: int):
    t = tiles.latlon_to_tile(GeoPoint(lat, lon), z)
    center = tiles.tile_to_bbox(t).center()
    assert tiles.latlon_to_tile(center, z) == t


def test_monotonicity():
    z = 10
    t1 = tiles.latlon_to_tile(GeoPoint(40.0, 10.0), z)
    t2 = tiles.latlon_to_tile(GeoPoint(40.0, 30.0), z)
    assert t2.x > t1.x
    t3 = tiles.latlon_to_tile(GeoPoint(60.0, 10.0), z)
    assert t3.y < t1.y


def test_pixel_round_trip():
    t = TileCoord(18, 208926, 91214)
    p = tiles.pixel_to_geo(t, 37.25, 201.5)
    col, row = tiles.pixel_of(p, t)
    assert col == pytest.approx(37.25, abs=1e-6)
    assert row == pytest.approx(201.5, abs=1e-6)
