"""From predicted masks to ger counts.

Blobs are 8-connected components of the binary mask (diagonal contact merges,
matching how adjacent gers blur together at 0.4 m/px). Each blob's area is
pixel_count x resolution^2 at the tile's center latitude. Counts follow the
divide-by-61-square-meters rule with half-up rounding; human verdicts from an
append-only JSON-lines log override individual blobs (latest entry per id
wins). avg_ger_area_m2 is computed over explicitly accepted detections only.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .tiles import GeoPoint, TileCoord, ground_resolution, pixel_to_geo, tile_to_bbox

UNIT_GER_AREA_M2 = 61.0
DEFAULT_MIN_BLOB_PX = 20
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

VERDICT_STATUSES = ("pending", "accepted", "rejected", "recounted")
VERDICT_ACTIONS = ("accept", "reject", "set_count")
_ACTION_TO_STATUS = {"accept": "accepted", "reject": "rejected", "set_count": "recounted"}


class CountingError(ValueError):
    pass


def tile_resolution_m(tile: TileCoord) -> float:
    """Meters per pixel at the tile's center latitude."""
    return ground_resolution(tile_to_bbox(tile).center().lat, tile.z)


@dataclass(frozen=True)
class Detection:
    """One connected blob of predicted ger pixels on a single tile."""

    id: str
    tile: TileCoord
    period: str
    pixel_count: int
    area_m2: float
    centroid: GeoPoint
    bbox_px: tuple[int, int, int, int]  # (col0, row0, col1, row1), end-exclusive
    verdict: str = "pending"
    verdict_count: int | None = None

    def __post_init__(self) -> None:
        if self.pixel_count < 1:
            raise CountingError(f"detection {self.id}: pixel_count must be >= 1")
        if not math.isfinite(self.area_m2) or self.area_m2 <= 0:
            raise CountingError(f"detection {self.id}: bad area {self.area_m2!r}")
        if self.verdict not in VERDICT_STATUSES:
            raise CountingError(f"detection {self.id}: unknown verdict {self.verdict!r}")
        if self.verdict == "recounted":
            if self.verdict_count is None or self.verdict_count < 1:
                raise CountingError(f"detection {self.id}: recounted requires count >= 1")
        elif self.verdict_count is not None:
            raise CountingError(f"detection {self.id}: count only valid when recounted")
        c0, r0, c1, r1 = self.bbox_px
        if not (0 <= c0 < c1 and 0 <= r0 < r1):
            raise CountingError(f"detection {self.id}: malformed bbox {self.bbox_px}")

    def suggested_count(self) -> int:
        """Blob-level prior for the review queue: area/61 rounded, min 1."""
        return max(1, area_to_count(self.area_m2))


@dataclass(frozen=True)
class CountResult:
    period: str
    raw_count: int
    verified_count: int
    avg_ger_area_m2: float

    def __post_init__(self) -> None:
        if self.raw_count < 0 or self.verified_count < 0:
            raise CountingError("counts must be non-negative")


def connected_components(
    mask: np.ndarray,
    tile: TileCoord,
    period: str,
    min_blob_px: int = DEFAULT_MIN_BLOB_PX,
) -> list[Detection]:
    """Detections for every 8-connected blob with at least min_blob_px pixels."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CountingError(f"mask must be 2-D; got shape {mask.shape}")
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise CountingError("mask must be binary (values 0 and 1)")
    resolution = tile_resolution_m(tile)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    detections = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == k)
        count = rows.size
        if count < min_blob_px:
            continue
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        centroid = pixel_to_geo(tile, float(cols.mean()) + 0.5, float(rows.mean()) + 0.5)
        detections.append(
            Detection(
                id=f"{period}-{tile.z}-{tile.x}-{tile.y}-{len(detections) + 1:03d}",
                tile=tile,
                period=period,
                pixel_count=count,
                area_m2=count * resolution * resolution,
                centroid=centroid,
                bbox_px=(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1),
            )
        )
    return detections


def area_to_count(total_area_m2: float, unit_area_m2: float = UNIT_GER_AREA_M2) -> int:
    """Half-up rounding of total_area / unit_area; 6,130.5 m^2 -> 101."""
    if unit_area_m2 <= 0:
        raise CountingError(f"unit area must be positive; got {unit_area_m2}")
    if total_area_m2 < 0:
        raise CountingError(f"total area must be non-negative; got {total_area_m2}")
    return int(math.floor(total_area_m2 / unit_area_m2 + 0.5))


def estimate_avg_area(detections: Iterable[Detection]) -> float:
    """Mean area of accepted detections; the paper's calibration found 61 m^2."""
    areas = [d.area_m2 for d in detections if d.verdict == "accepted"]
    if not areas:
        raise CountingError("no accepted detections to average")
    return sum(areas) / len(areas)


# ----------------------------------------------------------------------
# verdict log


@dataclass(frozen=True)
class VerdictRecord:
    ts: str
    detection_id: str
    action: str
    count: int | None = None

    def __post_init__(self) -> None:
        if self.action not in VERDICT_ACTIONS:
            raise CountingError(f"unknown verdict action {self.action!r}")
        if self.action == "set_count":
            if self.count is None or self.count < 1:
                raise CountingError("set_count requires count >= 1")
        elif self.count is not None:
            raise CountingError(f"action {self.action!r} does not take a count")

    def to_json(self) -> str:
        record: dict = {"ts": self.ts, "detection_id": self.detection_id, "action": self.action}
        if self.count is not None:
            record["count"] = self.count
        return json.dumps(record, sort_keys=True)


def append_verdict(path: str | Path, record: VerdictRecord, fsync: bool = True) -> None:
    """Append one record; the write is flushed to disk before returning."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()
        if fsync:
            os.fsync(fh.fileno())


def read_verdict_log(path: str | Path) -> list[VerdictRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    VerdictRecord(
                        ts=str(obj["ts"]),
                        detection_id=str(obj["detection_id"]),
                        action=str(obj["action"]),
                        count=int(obj["count"]) if "count" in obj else None,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CountingError(f"{path}:{lineno}: bad verdict record: {exc}") from exc
    return records


def resolve_verdicts(
    detections: Sequence[Detection], verdicts: Sequence[VerdictRecord]
) -> list[Detection]:
    """Detections with their final status after a latest-wins replay of the log."""
    by_id = {d.id: d for d in detections}
    if len(by_id) != len(detections):
        raise CountingError("duplicate detection ids")
    final: dict[str, VerdictRecord] = {}
    for rec in verdicts:
        if rec.detection_id not in by_id:
            raise CountingError(f"verdict references unknown detection {rec.detection_id!r}")
        final[rec.detection_id] = rec
    resolved = []
    for d in detections:
        rec = final.get(d.id)
        if rec is None:
            resolved.append(d)
        else:
            resolved.append(
                replace(d, verdict=_ACTION_TO_STATUS[rec.action], verdict_count=rec.count)
            )
    return resolved


def apply_verdicts(
    detections: Sequence[Detection],
    verdicts: Sequence[VerdictRecord] = (),
    unit_area_m2: float = UNIT_GER_AREA_M2,
    per_blob: bool = False,
) -> CountResult:
    """Fold the verdict log into a single period's count.

    Pending and accepted detections pool their area through the unit-area
    rule (the paper's global rule); recounted blobs contribute exactly their
    count; rejected blobs contribute nothing. per_blob=True instead rounds
    each blob separately (min 1), for the per-object reading of the rule.
    """
    periods = {d.period for d in detections}
    if len(periods) > 1:
        raise CountingError(f"detections span multiple periods: {sorted(periods)}")
    period = periods.pop() if periods else ""
    resolved = resolve_verdicts(detections, verdicts)

    raw_count = area_to_count(sum(d.area_m2 for d in detections), unit_area_m2)
    if per_blob:
        verified = 0
        for d in resolved:
            if d.verdict == "rejected":
                continue
            if d.verdict == "recounted":
                verified += d.verdict_count
            else:
                verified += max(1, area_to_count(d.area_m2, unit_area_m2))
    else:
        pooled = sum(d.area_m2 for d in resolved if d.verdict in ("pending", "accepted"))
        recounted = sum(d.verdict_count for d in resolved if d.verdict == "recounted")
        verified = area_to_count(pooled, unit_area_m2) + recounted

    accepted = [d for d in resolved if d.verdict == "accepted"]
    avg = sum(d.area_m2 for d in accepted) / len(accepted) if accepted else 0.0
    return CountResult(
        period=period, raw_count=raw_count, verified_count=verified, avg_ger_area_m2=avg
    )


def count_by_period(
    detections: Sequence[Detection],
    verdicts: Sequence[VerdictRecord] = (),
    unit_area_m2: float = UNIT_GER_AREA_M2,
    per_blob: bool = False,
) -> list[CountResult]:
    """apply_verdicts per period, sorted by period tag."""
    groups: dict[str, list[Detection]] = {}
    for d in detections:
        groups.setdefault(d.period, []).append(d)
    ids = {d.id: d.period for d in detections}
    for v in verdicts:
        if v.detection_id not in ids:
            raise CountingError(f"verdict references unknown detection {v.detection_id!r}")
    results = []
    for period in sorted(groups):
        relevant = [v for v in verdicts if ids[v.detection_id] == period]
        results.append(apply_verdicts(groups[period], relevant, unit_area_m2, per_blob))
    return results


def progress_summary(
    detections: Sequence[Detection], verdicts: Sequence[VerdictRecord]
) -> dict[str, int]:
    """Status tallies plus the verified count summed over periods."""
    resolved = resolve_verdicts(detections, verdicts)
    tally = {status: 0 for status in VERDICT_STATUSES}
    for d in resolved:
        tally[d.verdict] += 1
    verified = sum(r.verified_count for r in count_by_period(detections, verdicts))
    return {
        "pending": tally["pending"],
        "accepted": tally["accepted"],
        "rejected": tally["rejected"],
        "recounted": tally["recounted"],
        "current_verified_count": verified,
    }


# ----------------------------------------------------------------------
# serialization


def detections_to_geojson(detections: Sequence[Detection]) -> dict:
    features = []
    for d in detections:
        props = {
            "id": d.id,
            "period": d.period,
            "area_m2": d.area_m2,
            "pixel_count": d.pixel_count,
            "verdict": d.verdict,
            "tile": {"z": d.tile.z, "x": d.tile.x, "y": d.tile.y},
            "bbox_px": list(d.bbox_px),
        }
        if d.verdict_count is not None:
            props["verdict_count"] = d.verdict_count
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [d.centroid.lon, d.centroid.lat]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def geojson_to_detections(obj: Mapping) -> list[Detection]:
    if obj.get("type") != "FeatureCollection":
        raise CountingError("expected a GeoJSON FeatureCollection")
    detections = []
    for i, feature in enumerate(obj.get("features", [])):
        try:
            lon, lat = feature["geometry"]["coordinates"]
            p = feature["properties"]
            detections.append(
                Detection(
                    id=str(p["id"]),
                    tile=TileCoord(z=int(p["tile"]["z"]), x=int(p["tile"]["x"]), y=int(p["tile"]["y"])),
                    period=str(p["period"]),
                    pixel_count=int(p["pixel_count"]),
                    area_m2=float(p["area_m2"]),
                    centroid=GeoPoint(lat=float(lat), lon=float(lon)),
                    bbox_px=tuple(int(v) for v in p["bbox_px"]),
                    verdict=str(p.get("verdict", "pending")),
                    verdict_count=int(p["verdict_count"]) if "verdict_count" in p else None,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CountingError(f"feature {i}: {exc}") from exc
    return detections


def write_detections_geojson(path: str | Path, detections: Sequence[Detection]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(detections_to_geojson(detections), sort_keys=True), encoding="utf-8")


def read_detections_geojson(path: str | Path) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return geojson_to_detections(json.load(fh))


def write_counts_csv(path: str | Path, results: Sequence[CountResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "raw_count", "verified_count", "avg_ger_area_m2"])
        for r in results:
            w.writerow([r.period, r.raw_count, r.verified_count, f"{r.avg_ger_area_m2:.4f}"])
