"""Downstream statistics: grid change maps, period series, household ratios,
deprivation shares, and correlation checks.

Household statistics are compiled each December, so an image taken in year Y
is aligned with the statistics of year Y-1. The households-per-ger constant
is always computed from inputs; the published reference value (1.026) is kept
only for comparison because it is not reproducible from the published inputs
(91,249 households / 86,925 gers = 1.0497).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .counting import Detection
from .tiles import GRID_ZOOM, TileCoord, grid_cell_of, tile_to_bbox

# published reference constant; disagrees with division of the published
# inputs (1.0497) -- both are reported, nothing downstream hard-codes this
REFERENCE_HOUSEHOLDS_PER_GER = 1.026

# share of ger households reported for the sub-districts outside the imaged
# area; surfaced as a sensitivity bound on extrapolations, never applied
OTHER_SUBDISTRICTS_SLUM_RATIO = 0.330

TABLE_SUM_TOLERANCE = 0.005  # census rounding slack per indicator


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class PeriodStats:
    period: str
    ger_count: int
    households_total: int | None = None
    households_in_gers: int | None = None

    def __post_init__(self) -> None:
        if self.ger_count < 0:
            raise AnalysisError(f"period {self.period}: negative ger count")
        for field_name in ("households_total", "households_in_gers"):
            v = getattr(self, field_name)
            if v is not None and v < 0:
                raise AnalysisError(f"period {self.period}: negative {field_name}")


@dataclass(frozen=True)
class GridCellStats:
    cell: TileCoord
    counts_by_period: tuple[tuple[str, int], ...]  # sorted by period
    delta: int

    def count(self, period: str) -> int:
        return dict(self.counts_by_period).get(period, 0)


@dataclass(frozen=True)
class DeprivationRow:
    indicator: str
    category: str
    share: float
    slum_flag: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.share <= 1.0:
            raise AnalysisError(f"{self.indicator}/{self.category}: share outside [0, 1]")


@dataclass(frozen=True)
class DistrictPair:
    district: str
    ger_ratio: float
    poverty_headcount: float

    def __post_init__(self) -> None:
        for name in ("ger_ratio", "poverty_headcount"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AnalysisError(f"district {self.district}: {name} outside [0, 1]")


@dataclass(frozen=True)
class RatioRow:
    year: int
    ger_count: int
    ger_households_est: int
    total_households: int
    slum_ratio: float


# ----------------------------------------------------------------------
# grid aggregation


def aggregate_to_grid(detections: Iterable[Detection]) -> list[GridCellStats]:
    """Per-grid-cell detection counts by period; delta = last - first period."""
    counts: dict[TileCoord, dict[str, int]] = {}
    periods: set[str] = set()
    zooms: set[int] = set()
    for d in detections:
        zooms.add(d.tile.z)
        if len(zooms) > 1:
            raise AnalysisError(f"mixed tile zooms in detections: {sorted(zooms)}")
        cell = grid_cell_of(d.tile).coord
        counts.setdefault(cell, {}).setdefault(d.period, 0)
        counts[cell][d.period] += 1
        periods.add(d.period)
    ordered = sorted(periods)
    stats = []
    for cell in sorted(counts, key=lambda c: (c.x, c.y)):
        by_period = tuple((p, counts[cell].get(p, 0)) for p in ordered)
        delta = 0
        if len(ordered) >= 2:
            delta = counts[cell].get(ordered[-1], 0) - counts[cell].get(ordered[0], 0)
        stats.append(GridCellStats(cell=cell, counts_by_period=by_period, delta=delta))
    return stats


def grid_deltas_geojson(stats: Sequence[GridCellStats]) -> dict:
    features = []
    for s in stats:
        b = tile_to_bbox(s.cell)
        ring = [
            [b.west, b.south],
            [b.east, b.south],
            [b.east, b.north],
            [b.west, b.north],
            [b.west, b.south],
        ]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {
                    "z": s.cell.z,
                    "x": s.cell.x,
                    "y": s.cell.y,
                    "delta": s.delta,
                    "counts": {p: c for p, c in s.counts_by_period},
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_grid_deltas_geojson(path: str | Path, stats: Sequence[GridCellStats]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(grid_deltas_geojson(stats), sort_keys=True), encoding="utf-8")


def write_grid_deltas_csv(path: str | Path, stats: Sequence[GridCellStats]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    periods = sorted({p for s in stats for p, _ in s.counts_by_period})
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "x", "y", *(f"count_{p}" for p in periods), "delta"])
        for s in stats:
            w.writerow([s.cell.z, s.cell.x, s.cell.y, *(s.count(p) for p in periods), s.delta])


# ----------------------------------------------------------------------
# period series


def period_deltas(series: Sequence[PeriodStats]) -> list[tuple[tuple[str, str], int]]:
    """Consecutive ger-count differences; the series must be in period order."""
    if len(series) < 2:
        raise AnalysisError("need at least two periods for deltas")
    tags = [s.period for s in series]
    if tags != sorted(tags):
        raise AnalysisError(f"series not in chronological order: {tags}")
    return [
        ((a.period, b.period), b.ger_count - a.ger_count)
        for a, b in zip(series, series[1:])
    ]


def align_households(
    stats_by_year: Mapping[int, object], image_years: Sequence[int]
) -> dict[int, object | None]:
    """Image year Y maps to the statistics compiled in December of Y-1.

    Missing years map to None; nothing is interpolated.
    """
    return {year: stats_by_year.get(year - 1) for year in image_years}


def unalign_households(aligned: Mapping[int, object | None]) -> dict[int, object]:
    """Inverse of align_households for the years that were present."""
    return {year - 1: v for year, v in aligned.items() if v is not None}


def households_per_ger(households_in_gers: int, detected_gers: int) -> float:
    if detected_gers <= 0:
        raise AnalysisError("detected_gers must be positive")
    if households_in_gers < 0:
        raise AnalysisError("households_in_gers must be non-negative")
    return households_in_gers / detected_gers


def slum_ratio(ger_households: float, total_households: float) -> float:
    if total_households <= 0:
        raise AnalysisError("total_households must be positive")
    if ger_households < 0:
        raise AnalysisError("ger_households must be non-negative")
    return ger_households / total_households


def deprivation_share(rows: Sequence[DeprivationRow], indicator: str) -> float:
    matching = [r for r in rows if r.indicator == indicator]
    if not matching:
        raise AnalysisError(f"indicator {indicator!r} not in table")
    return sum(r.share for r in matching if r.slum_flag)


def validate_deprivation_table(
    rows: Sequence[DeprivationRow], tolerance: float = TABLE_SUM_TOLERANCE
) -> None:
    """Shares within each indicator must sum to 1 up to census rounding."""
    sums: dict[str, float] = {}
    for r in rows:
        sums[r.indicator] = sums.get(r.indicator, 0.0) + r.share
    for indicator, total in sums.items():
        if abs(total - 1.0) > tolerance:
            raise AnalysisError(f"indicator {indicator!r} shares sum to {total:.4f}, not 1")


def pearson_xy(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation, definitional two-pass form."""
    if len(xs) != len(ys):
        raise AnalysisError("length mismatch")
    n = len(xs)
    if n < 3:
        raise AnalysisError("need at least three pairs")
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise AnalysisError("zero variance: correlation undefined")
    return sxy / math.sqrt(sxx * syy)


def pearson(pairs: Sequence[DistrictPair]) -> float:
    return pearson_xy([p.ger_ratio for p in pairs], [p.poverty_headcount for p in pairs])


# ----------------------------------------------------------------------
# extrapolation / reports


def extrapolate_ger_households(hpg: float, ger_count: int) -> int:
    """Estimated ger households = hpg x count, rounded half-up."""
    if hpg <= 0:
        raise AnalysisError("households-per-ger must be positive")
    if ger_count < 0:
        raise AnalysisError("ger_count must be non-negative")
    return int(math.floor(hpg * ger_count + 0.5))


def ratio_rows(
    series: Sequence[PeriodStats],
    hpg: float,
) -> list[RatioRow]:
    """One slum-ratio row per period that has a household total.

    Measured ger-household figures are used when present; otherwise the
    estimate hpg x ger_count fills in.
    """
    rows = []
    for s in series:
        if s.households_total is None:
            continue
        if s.households_in_gers is not None:
            est = s.households_in_gers
        else:
            est = extrapolate_ger_households(hpg, s.ger_count)
        rows.append(
            RatioRow(
                year=int(s.period),
                ger_count=s.ger_count,
                ger_households_est=est,
                total_households=s.households_total,
                slum_ratio=slum_ratio(est, s.households_total),
            )
        )
    return rows


def write_ratio_csv(path: str | Path, rows: Sequence[RatioRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "ger_count", "ger_households_est", "total_households", "slum_ratio"])
        for r in rows:
            w.writerow(
                [r.year, r.ger_count, r.ger_households_est, r.total_households, f"{r.slum_ratio:.6f}"]
            )


def write_period_series_csv(path: str | Path, series: Sequence[PeriodStats]) -> None:
    """Count series with consecutive deltas and aligned household figures."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    deltas = dict(period_deltas(series)) if len(series) >= 2 else {}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "ger_count", "delta_prev", "households_total", "households_in_gers"])
        prev = None
        for s in series:
            delta = "" if prev is None else deltas[(prev, s.period)]
            w.writerow(
                [
                    s.period,
                    s.ger_count,
                    delta,
                    "" if s.households_total is None else s.households_total,
                    "" if s.households_in_gers is None else s.households_in_gers,
                ]
            )
            prev = s.period
