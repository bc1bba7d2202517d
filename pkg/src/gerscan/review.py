"""HTTP service for the human-verification pass.

Serves the review queue, tile images, and detection details; accepts
accept/reject/set_count verdicts and appends them (fsync before the 200) to
the same JSON-lines log the counting module reads, so batch counts and the
service always agree. Restarting the service replays the log; any prefix of
the log is a valid state. Counts are never computed here: every number comes
from the counting module.
"""

from __future__ import annotations

import json
import mimetypes
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence
from urllib.parse import parse_qs, urlparse

from .counting import (
    CountingError,
    Detection,
    VerdictRecord,
    append_verdict,
    detections_to_geojson,
    progress_summary,
    read_verdict_log,
    resolve_verdicts,
)
from .ingest import tile_cache_path
from .tiles import TileCoord, TileMathError

DEFAULT_PAGE_LIMIT = 50


class ReviewError(ValueError):
    pass


@dataclass(frozen=True)
class QueueItem:
    id: str
    tile: TileCoord
    period: str
    area_m2: float
    pixel_count: int
    suggested_count: int
    status: str
    bbox_px: tuple[int, int, int, int]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tile": {"z": self.tile.z, "x": self.tile.x, "y": self.tile.y},
            "period": self.period,
            "area_m2": self.area_m2,
            "pixel_count": self.pixel_count,
            "suggested_count": self.suggested_count,
            "status": self.status,
            "bbox_px": list(self.bbox_px),
        }


def _queue_item(d: Detection) -> QueueItem:
    return QueueItem(
        id=d.id,
        tile=d.tile,
        period=d.period,
        area_m2=d.area_m2,
        pixel_count=d.pixel_count,
        suggested_count=d.suggested_count(),
        status=d.verdict,
        bbox_px=d.bbox_px,
    )


class ReviewService:
    """State and operations behind the HTTP endpoints (directly testable)."""

    def __init__(
        self,
        detections: Sequence[Detection],
        tiles_root: str | Path,
        log_path: str | Path,
        static_dir: str | Path | None = None,
    ):
        self.detections = list(detections)
        self.by_id = {d.id: d for d in self.detections}
        if len(self.by_id) != len(self.detections):
            raise ReviewError("duplicate detection ids")
        self.tiles_root = Path(tiles_root)
        self.log_path = Path(log_path)
        self.static_dir = Path(static_dir) if static_dir is not None else None
        self.lock = threading.Lock()
        self.verdicts = read_verdict_log(self.log_path)
        for v in self.verdicts:
            if v.detection_id not in self.by_id:
                raise ReviewError(f"verdict log references unknown id {v.detection_id!r}")
        self.periods = {d.period for d in self.detections}

    # -- reads ---------------------------------------------------------

    def _resolved(self) -> list[Detection]:
        with self.lock:
            verdicts = list(self.verdicts)
        return resolve_verdicts(self.detections, verdicts)

    def queue(
        self,
        period: str | None = None,
        status: str | None = None,
        limit: int = DEFAULT_PAGE_LIMIT,
        offset: int = 0,
    ) -> dict:
        if period is not None and period not in self.periods:
            raise KeyError(period)
        if limit < 1 or offset < 0:
            raise ReviewError("limit must be >= 1 and offset >= 0")
        items = self._resolved()
        if period is not None:
            items = [d for d in items if d.period == period]
        if status is not None:
            if status not in ("pending", "accepted", "rejected", "recounted"):
                raise ReviewError(f"unknown status {status!r}")
            items = [d for d in items if d.verdict == status]
        # biggest blobs first: that is where merged-ger recounts live
        items.sort(key=lambda d: (-d.area_m2, d.id))
        page = items[offset : offset + limit]
        return {
            "items": [_queue_item(d).to_json() for d in page],
            "total": len(items),
            "offset": offset,
            "limit": limit,
        }

    def detection_json(self, detection_id: str) -> dict | None:
        resolved = {d.id: d for d in self._resolved()}
        d = resolved.get(detection_id)
        if d is None:
            return None
        feature = detections_to_geojson([d])["features"][0]
        c0, r0, c1, r1 = d.bbox_px
        outline = [[c0, r0], [c1, r0], [c1, r1], [c0, r1], [c0, r0]]
        return {
            "feature": feature,
            "outline_px": outline,
            "suggested_count": d.suggested_count(),
            "status": d.verdict,
        }

    def progress(self) -> dict:
        with self.lock:
            verdicts = list(self.verdicts)
        return progress_summary(self.detections, verdicts)

    def tile_path(self, period: str, coord: TileCoord) -> Path:
        return tile_cache_path(self.tiles_root, period, coord)

    # -- writes --------------------------------------------------------

    def post_verdict(self, detection_id: str, action: str, count: int | None) -> dict:
        """Validate, persist, then apply; raises KeyError / ReviewError."""
        if detection_id not in self.by_id:
            raise KeyError(detection_id)
        try:
            record = VerdictRecord(
                ts=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                detection_id=detection_id,
                action=action,
                count=count,
            )
        except CountingError as exc:
            raise ReviewError(str(exc)) from exc
        with self.lock:
            append_verdict(self.log_path, record, fsync=True)
            self.verdicts.append(record)
            verdicts = list(self.verdicts)
        (updated,) = (
            d for d in resolve_verdicts(self.detections, verdicts) if d.id == detection_id
        )
        return _queue_item(updated).to_json()


class ReviewServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, service: ReviewService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


class _Handler(BaseHTTPRequestHandler):
    server: ReviewServer

    def log_message(self, *args) -> None:
        pass

    # -- helpers -------------------------------------------------------

    def _json(self, obj, code: int = 200) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str) -> None:
        self._json({"error": message}, code)

    def _bytes(self, data: bytes, content_type: str) -> None:
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    # -- routes --------------------------------------------------------

    def do_GET(self) -> None:
        service = self.server.service
        url = urlparse(self.path)
        path = url.path

        if path == "/api/progress":
            self._json(service.progress())
            return

        if path == "/api/queue":
            params = parse_qs(url.query)

            def single(name):
                values = params.get(name)
                return values[-1] if values else None

            try:
                limit = int(single("limit") or DEFAULT_PAGE_LIMIT)
                offset = int(single("offset") or 0)
            except ValueError:
                self._error(422, "limit and offset must be integers")
                return
            try:
                result = service.queue(single("period"), single("status"), limit, offset)
            except KeyError as exc:
                self._error(404, f"unknown period {exc.args[0]!r}")
                return
            except ReviewError as exc:
                self._error(422, str(exc))
                return
            self._json(result)
            return

        m = re.fullmatch(r"/api/tile/([^/]+)/(\d+)/(\d+)/(\d+)", path)
        if m:
            period, z, x, y = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
            try:
                coord = TileCoord(z=z, x=x, y=y)
            except TileMathError as exc:
                self._error(404, str(exc))
                return
            tile_file = service.tile_path(period, coord)
            if not tile_file.exists():
                self._error(404, f"missing tile {period}/{z}/{x}/{y}")
                return
            self._bytes(tile_file.read_bytes(), "image/png")
            return

        m = re.fullmatch(r"/api/detections/([^/]+)", path)
        if m:
            payload = service.detection_json(m.group(1))
            if payload is None:
                self._error(404, f"unknown detection {m.group(1)!r}")
                return
            self._json(payload)
            return

        if path.startswith("/api/"):
            self._error(404, f"no such endpoint {path}")
            return

        self._static(path)

    def do_POST(self) -> None:
        service = self.server.service
        if urlparse(self.path).path != "/api/verdict":
            self._error(404, f"no such endpoint {self.path}")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            detection_id = str(body["detection_id"])
            action = str(body["action"])
            count = body.get("count")
            if count is not None:
                count = int(count)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            self._error(400, "body must be JSON with detection_id and action")
            return
        try:
            updated = service.post_verdict(detection_id, action, count)
        except KeyError:
            self._error(404, f"unknown detection {detection_id!r}")
            return
        except ReviewError as exc:
            self._error(422, str(exc))
            return
        self._json(updated)

    def _static(self, path: str) -> None:
        root = self.server.service.static_dir
        if root is None:
            self._error(404, "no static directory configured")
            return
        name = path.lstrip("/") or "index.html"
        target = (root / name).resolve()
        if not target.is_relative_to(root.resolve()) or not target.is_file():
            self._error(404, f"no such file {path}")
            return
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self._bytes(target.read_bytes(), ctype)


def serve(service: ReviewService, host: str = "127.0.0.1", port: int = 8000) -> None:
    """Run until interrupted (used by the command-line entry point)."""
    server = ReviewServer(service, host=host, port=port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
