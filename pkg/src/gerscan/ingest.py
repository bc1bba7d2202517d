"""External data movement: tile fetching with a disk cache, dataset files,
GeoJSON footprint/facility parsing, and the CSV table readers.

Tiles live at <cache>/<period>/<z>/<x>/<y>.png and label masks at
<root>/labels/<period>/<z>/<x>/<y>.png (0 background, 255 ger). Everything is
written atomically (temp file then rename) and transcoded to PNG regardless
of what a server sent, so downstream code handles exactly one format.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import requests
from PIL import Image

from .analysis import AnalysisError, DeprivationRow, DistrictPair
from .geoaccess import FacilityPoint, GeoAccessError, categorize
from .labels import Footprint, LabelError, LabeledTile
from .tiles import GeoPoint, TileCoord, TileMathError

CACHE_ENV_VAR = "GERSCAN_CACHE"
TILE_SIZE = 256

HOUSEHOLD_HEADER = ("year", "sub_district", "households_total", "households_in_gers")
DISTRICT_HEADER = ("district", "ger_ratio", "poverty_headcount")
DEPRIVATION_HEADER = ("indicator", "category", "share", "slum_flag")
MANIFEST_HEADER = ("period", "z", "x", "y", "positive_pixels")


class IngestError(ValueError):
    pass


# ----------------------------------------------------------------------
# tile fetching


@dataclass(frozen=True)
class TileSource:
    url_template: str
    period: str
    cache_root: Path
    rate_limit: float = 8.0  # requests per second
    max_inflight: int = 8
    retries: int = 3
    backoff_s: float = 0.25
    timeout_s: float = 10.0
    headers: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        for placeholder in ("{z}", "{x}", "{y}"):
            if placeholder not in self.url_template:
                raise IngestError(f"url template is missing {placeholder}: {self.url_template!r}")
        if self.rate_limit <= 0:
            raise IngestError("rate_limit must be positive")
        if self.max_inflight < 1 or self.retries < 1:
            raise IngestError("max_inflight and retries must be >= 1")
        object.__setattr__(self, "cache_root", Path(self.cache_root))

    def url_for(self, t: TileCoord) -> str:
        return self.url_template.format(z=t.z, x=t.x, y=t.y)


@dataclass
class FetchReport:
    requested: int = 0
    fetched: int = 0
    cached_hits: int = 0
    failed: int = 0
    failures: list[tuple[TileCoord, str]] = field(default_factory=list)

    def consistent(self) -> bool:
        return self.requested == self.fetched + self.cached_hits + self.failed


class _TokenBucket:
    """Blocking rate limiter: take() waits until a token is available."""

    def __init__(self, rate_per_s: float):
        self.rate = rate_per_s
        self.capacity = max(1.0, rate_per_s)
        self.tokens = self.capacity
        self.stamp = time.monotonic()
        self.lock = threading.Lock()

    def take(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


def tile_cache_path(root: str | Path, period: str, t: TileCoord) -> Path:
    return Path(root) / period / str(t.z) / str(t.x) / f"{t.y}.png"


def _write_image_atomic(path: Path, image: Image.Image) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            image.save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decode_tile(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise IngestError(f"undecodable image payload: {exc}") from exc
    if img.size != (TILE_SIZE, TILE_SIZE):
        raise IngestError(f"unexpected tile size {img.size[0]}x{img.size[1]}")
    return img.convert("RGB")


def fetch_tiles(source: TileSource, tiles: Iterable[TileCoord]) -> FetchReport:
    """Download every uncached tile; transient failures retry with backoff.

    Permanent failures are recorded per tile and never abort the batch.
    """
    tiles = list(tiles)
    report = FetchReport(requested=len(tiles))
    bucket = _TokenBucket(source.rate_limit)
    local = threading.local()

    def session() -> requests.Session:
        if not hasattr(local, "session"):
            local.session = requests.Session()
        return local.session

    def fetch_one(t: TileCoord) -> tuple[str, TileCoord, str]:
        path = tile_cache_path(source.cache_root, source.period, t)
        if path.exists():
            return "cached", t, ""
        reason = "no attempts made"
        for attempt in range(source.retries):
            if attempt:
                time.sleep(source.backoff_s * 2 ** (attempt - 1))
            bucket.take()
            try:
                resp = session().get(
                    source.url_for(t), timeout=source.timeout_s, headers=source.headers
                )
            except requests.RequestException as exc:
                reason = f"request error: {exc}"
                continue
            if resp.status_code == 200:
                try:
                    img = _decode_tile(resp.content)
                except IngestError as exc:
                    return "failed", t, str(exc)
                _write_image_atomic(path, img)
                return "fetched", t, ""
            if resp.status_code == 429 or 500 <= resp.status_code < 600:
                reason = f"HTTP {resp.status_code}"
                continue
            return "failed", t, f"HTTP {resp.status_code}"
        return "failed", t, reason

    with ThreadPoolExecutor(max_workers=source.max_inflight) as pool:
        for outcome, t, why in pool.map(fetch_one, tiles):
            if outcome == "cached":
                report.cached_hits += 1
            elif outcome == "fetched":
                report.fetched += 1
            else:
                report.failed += 1
                report.failures.append((t, why))
    return report


@dataclass
class CacheReport:
    ok: int = 0
    quarantined: list[tuple[Path, str]] = field(default_factory=list)


def verify_cache(cache_root: str | Path, period: str | None = None) -> CacheReport:
    """Decode every cached tile; broken files are renamed *.bad and reported."""
    root = Path(cache_root)
    if period is not None:
        root = root / period
    report = CacheReport()
    for path in sorted(root.rglob("*.png")):
        try:
            with path.open("rb") as fh:
                img = Image.open(fh)
                img.load()
            if img.size != (TILE_SIZE, TILE_SIZE):
                raise IngestError(f"unexpected tile size {img.size[0]}x{img.size[1]}")
            if img.mode != "RGB":
                raise IngestError(f"unexpected mode {img.mode}")
            report.ok += 1
        except (OSError, IngestError) as exc:
            quarantine = path.with_suffix(".png.bad")
            path.rename(quarantine)
            report.quarantined.append((quarantine, str(exc)))
    return report


# ----------------------------------------------------------------------
# dataset files (tiles + label masks)


def mask_path(root: str | Path, period: str, t: TileCoord) -> Path:
    return Path(root) / "labels" / period / str(t.z) / str(t.x) / f"{t.y}.png"


def write_labeled_tile(root: str | Path, tile: LabeledTile) -> None:
    _write_image_atomic(
        tile_cache_path(root, tile.period, tile.coord), Image.fromarray(tile.image, mode="RGB")
    )
    _write_image_atomic(
        mask_path(root, tile.period, tile.coord),
        Image.fromarray(tile.mask * np.uint8(255), mode="L"),
    )


def read_tile_image(root: str | Path, period: str, t: TileCoord) -> np.ndarray:
    path = tile_cache_path(root, period, t)
    if not path.exists():
        raise IngestError(f"missing tile {period}/{t.z}/{t.x}/{t.y}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_mask(root: str | Path, period: str, t: TileCoord) -> np.ndarray:
    path = mask_path(root, period, t)
    if not path.exists():
        raise IngestError(f"missing mask {period}/{t.z}/{t.x}/{t.y}")
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def list_tiles(root: str | Path, period: str) -> list[TileCoord]:
    """Tile coordinates present in the cache for one period, sorted."""
    base = Path(root) / period
    coords = []
    for path in base.rglob("*.png"):
        try:
            z = int(path.parent.parent.name)
            x = int(path.parent.name)
            y = int(path.stem)
            coords.append(TileCoord(z=z, x=x, y=y))
        except (ValueError, TileMathError):
            continue
    return sorted(coords, key=lambda t: (t.z, t.x, t.y))


def write_dataset_manifest(path: str | Path, tiles: Sequence[LabeledTile]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for t in tiles:
            w.writerow([t.period, t.coord.z, t.coord.x, t.coord.y, t.positive_pixels])


# ----------------------------------------------------------------------
# GeoJSON readers


def _load_feature_collection(path: str | Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"{path}: {exc}") from exc
    if obj.get("type") != "FeatureCollection":
        raise IngestError(f"{path}: expected a GeoJSON FeatureCollection")
    return obj.get("features", [])


def read_footprints(path: str | Path) -> tuple[list[Footprint], list[str]]:
    """Polygon features to footprints; bad features are reported, not fatal."""
    footprints: list[Footprint] = []
    errors: list[str] = []
    for i, feature in enumerate(_load_feature_collection(path)):
        try:
            geom = feature.get("geometry") or {}
            if geom.get("type") != "Polygon":
                raise IngestError(f"geometry type {geom.get('type')!r}, expected Polygon")
            rings = geom.get("coordinates") or []
            if len(rings) != 1:
                raise IngestError(f"expected exactly one ring, got {len(rings)}")
            props = feature.get("properties") or {}
            ring = tuple(GeoPoint(lat=float(lat), lon=float(lon)) for lon, lat in rings[0])
            footprints.append(
                Footprint(
                    id=str(props.get("id", f"fp-{i}")),
                    ring=ring,
                    period=str(props.get("period", "")),
                )
            )
        except (IngestError, LabelError, TileMathError, TypeError, ValueError) as exc:
            errors.append(f"feature {i}: {exc}")
    return footprints, errors


def read_facilities(path: str | Path) -> tuple[list[FacilityPoint], list[str]]:
    """Point features to categorized facilities; unmapped classes are reported."""
    facilities: list[FacilityPoint] = []
    errors: list[str] = []
    for i, feature in enumerate(_load_feature_collection(path)):
        try:
            geom = feature.get("geometry") or {}
            if geom.get("type") != "Point":
                raise IngestError(f"geometry type {geom.get('type')!r}, expected Point")
            lon, lat = geom["coordinates"]
            props = feature.get("properties") or {}
            source_class = str(
                props.get("class") or props.get("amenity") or props.get("highway") or ""
            )
            category = props.get("category") or categorize(source_class)
            if category is None:
                raise IngestError(f"no category for source class {source_class!r}")
            facilities.append(
                FacilityPoint(
                    location=GeoPoint(lat=float(lat), lon=float(lon)),
                    category=str(category),
                    source_class=source_class,
                )
            )
        except (IngestError, GeoAccessError, TileMathError, TypeError, ValueError, KeyError) as exc:
            errors.append(f"feature {i}: {exc}")
    return facilities, errors


# ----------------------------------------------------------------------
# CSV tables


@dataclass(frozen=True)
class HouseholdRow:
    year: int
    sub_district: str
    households_total: int
    households_in_gers: int | None

    def __post_init__(self) -> None:
        if self.households_total < 0:
            raise IngestError(f"{self.sub_district} {self.year}: negative household total")
        if self.households_in_gers is not None and not (
            0 <= self.households_in_gers <= self.households_total
        ):
            raise IngestError(
                f"{self.sub_district} {self.year}: households_in_gers outside [0, total]"
            )


def _read_rows(path: str | Path, header: tuple[str, ...]) -> list[dict[str, str]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, expected header {','.join(header)}") from None
        if tuple(got) != header:
            for i, want in enumerate(header):
                if i >= len(got) or got[i] != want:
                    raise IngestError(
                        f"{path}: expected column {want!r} at position {i + 1}, "
                        f"got {got[i] if i < len(got) else '<missing>'!r}"
                    )
            raise IngestError(f"{path}: unexpected extra columns {got[len(header):]}")
        return [dict(zip(header, row)) for row in reader if any(cell.strip() for cell in row)]


def _parse_bool(value: str, path: str | Path, lineno: int) -> bool:
    v = value.strip().lower()
    if v in ("true", "false"):
        return v == "true"
    raise IngestError(f"{path} row {lineno}: slum_flag must be true or false, got {value!r}")


def read_household_csv(path: str | Path) -> list[HouseholdRow]:
    rows = []
    for i, r in enumerate(_read_rows(path, HOUSEHOLD_HEADER), start=2):
        try:
            in_gers = r["households_in_gers"].strip()
            rows.append(
                HouseholdRow(
                    year=int(r["year"]),
                    sub_district=r["sub_district"],
                    households_total=int(r["households_total"]),
                    households_in_gers=int(in_gers) if in_gers else None,
                )
            )
        except ValueError as exc:
            raise IngestError(f"{path} row {i}: {exc}") from exc
    return rows


def read_district_csv(path: str | Path) -> list[DistrictPair]:
    rows = []
    for i, r in enumerate(_read_rows(path, DISTRICT_HEADER), start=2):
        try:
            rows.append(
                DistrictPair(
                    district=r["district"],
                    ger_ratio=float(r["ger_ratio"]),
                    poverty_headcount=float(r["poverty_headcount"]),
                )
            )
        except (AnalysisError, ValueError) as exc:
            raise IngestError(f"{path} row {i}: {exc}") from exc
    return rows


def read_deprivation_csv(path: str | Path) -> list[DeprivationRow]:
    rows = []
    for i, r in enumerate(_read_rows(path, DEPRIVATION_HEADER), start=2):
        try:
            rows.append(
                DeprivationRow(
                    indicator=r["indicator"],
                    category=r["category"],
                    share=float(r["share"]),
                    slum_flag=_parse_bool(r["slum_flag"], path, i),
                )
            )
        except (AnalysisError, ValueError) as exc:
            raise IngestError(f"{path} row {i}: {exc}") from exc
    return rows


def fixture_path(name: str) -> Path:
    """Path of a packaged data fixture (the shipped census/count tables)."""
    return Path(__file__).parent / "fixtures" / name
