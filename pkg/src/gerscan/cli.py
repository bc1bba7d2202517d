"""Pipeline entry point: one subcommand per stage, wired through the modules.

Every stage that produces files writes a run manifest next to its outputs
(parameters, input digests, library versions, no timestamps) and skips the
work when the manifest and outputs already match. A JSON config file can
supply any flag's value; explicit flags win.

Exit codes: 0 success, 1 unexpected error, 2 usage or config error,
3 missing input, 4 invalid data, 5 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    OTHER_SUBDISTRICTS_SLUM_RATIO,
    PeriodStats,
    REFERENCE_HOUSEHOLDS_PER_GER,
    aggregate_to_grid,
    deprivation_share,
    households_per_ger,
    pearson,
    period_deltas,
    ratio_rows,
    validate_deprivation_table,
    write_grid_deltas_csv,
    write_grid_deltas_geojson,
    write_period_series_csv,
    write_ratio_csv,
)
from .counting import (
    CountingError,
    DEFAULT_MIN_BLOB_PX,
    UNIT_GER_AREA_M2,
    connected_components,
    count_by_period,
    read_detections_geojson,
    read_verdict_log,
    write_counts_csv,
    write_detections_geojson,
)
from .geoaccess import GeoAccessError, indicator_report, read_esri_ascii, write_indicator_csv
from .ingest import (
    CACHE_ENV_VAR,
    IngestError,
    TileSource,
    fetch_tiles,
    list_tiles,
    mask_path,
    read_deprivation_csv,
    read_district_csv,
    read_facilities,
    read_footprints,
    read_household_csv,
    read_mask,
    read_tile_image,
    verify_cache,
    write_dataset_manifest,
    write_labeled_tile,
)
from .labels import (
    LabelError,
    PlacementError,
    SyntheticSceneSpec,
    generate_dataset,
    rasterize,
    split_dataset,
)
from .metrics import MetricsError, evaluate_masks, f1, write_report_csv
from .net import (
    CheckpointError,
    LossConfig,
    SegConfig,
    SegModel,
    TrainConfig,
    TrainingDiverged,
    gradient_check,
    load_model,
    save_model,
    train,
    write_training_log,
)
from .review import ReviewError, ReviewServer, ReviewService
from .tiles import GeoPoint, TileCoord, TileMathError, latlon_to_tile

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4
EXIT_STAGE_FAILED = 5

MANIFEST_SUFFIX = ".manifest.json"


def _manifest_path(directory: Path, command: str) -> Path:
    return directory / f"{command}{MANIFEST_SUFFIX}"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(message: str) -> None:
    print(f"gerscan: {message}", file=sys.stderr)


def _require(value, flag: str):
    if value is None:
        raise CliError(EXIT_USAGE, f"{flag} is required (flag or config)")
    return value


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_INPUT, f"{what} not found: {p}")
    return p


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).split(",") if v.strip())


# ----------------------------------------------------------------------
# run manifests


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _sha256_path(path: Path) -> str:
    """Digest of a file, or of a directory's sorted relative listing + contents."""
    if path.is_file():
        return _sha256_file(path)
    digest = hashlib.sha256()
    for member in sorted(p for p in path.rglob("*") if p.is_file()):
        if member.name.endswith(MANIFEST_SUFFIX):
            continue
        digest.update(str(member.relative_to(path)).encode())
        digest.update(bytes.fromhex(_sha256_file(member)))
    return digest.hexdigest()


def _versions() -> dict[str, str]:
    import PIL
    import scipy

    return {
        "gerscan": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


class Stage:
    """Identity tracking for one restartable run."""

    def __init__(self, command: str, manifest_path: Path, params: dict, inputs: dict[str, Path]):
        self.command = command
        self.manifest_path = manifest_path
        self.params = params
        self.input_hashes = {
            label: _sha256_path(_existing(p, label)) for label, p in sorted(inputs.items())
        }
        self.input_paths = {label: str(p) for label, p in inputs.items()}
        identity_src = json.dumps(
            {
                "command": command,
                "params": params,
                "inputs": self.input_hashes,
                "gerscan": __version__,
            },
            sort_keys=True,
        )
        self.identity = hashlib.sha256(identity_src.encode()).hexdigest()

    def up_to_date(self, outputs: list[Path]) -> bool:
        if not self.manifest_path.exists() or not all(o.exists() for o in outputs):
            return False
        try:
            recorded = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        return recorded.get("identity") == self.identity

    def write(self, outputs: list[Path]) -> None:
        base = self.manifest_path.parent
        base.mkdir(parents=True, exist_ok=True)

        def rel(p: str | Path) -> str:
            return os.path.relpath(Path(p), base)

        manifest = {
            "command": self.command,
            "identity": self.identity,
            "params": self.params,
            "inputs": {
                label: {"path": rel(self.input_paths[label]), "sha256": digest}
                for label, digest in self.input_hashes.items()
            },
            "outputs": {rel(o): _sha256_path(o) for o in outputs if o.exists()},
            "versions": _versions(),
        }
        self.manifest_path.write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


def _skip_if_current(stage: Stage, outputs: list[Path], force: bool) -> bool:
    if not force and stage.up_to_date(outputs):
        print(f"up to date, skipping (manifest {stage.manifest_path})")
        return True
    return False


# ----------------------------------------------------------------------
# shared loaders


def _mask_tiles(root: Path, period: str) -> list[TileCoord]:
    """Tiles that have a mask under root/labels/<period>/z/x/y.png."""
    base = root / "labels" / period
    coords = []
    for png in base.glob("*/*/*.png"):
        try:
            coords.append(TileCoord(int(png.parent.parent.name), int(png.parent.name), int(png.stem)))
        except (ValueError, TileMathError):
            continue
    return sorted(coords, key=lambda t: (t.z, t.x, t.y))


def _load_samples(root: Path, period: str) -> list[tuple[np.ndarray, np.ndarray]]:
    tiles = list_tiles(root, period)
    if not tiles:
        raise CliError(EXIT_MISSING_INPUT, f"no tiles for period {period!r} under {root}")
    return [(read_tile_image(root, period, t), read_mask(root, period, t)) for t in tiles]


def _read_counts_csv(path: Path) -> list[tuple[str, int]]:
    """Period/count series; accepts the counting stage's CSV (verified column)."""
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header == ["period", "ger_count"]:
            column = 1
        elif header == ["period", "raw_count", "verified_count", "avg_ger_area_m2"]:
            column = 2
        else:
            raise CliError(EXIT_BAD_DATA, f"{path}: unrecognized counts header {header}")
        out = []
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((row[0], int(row[column])))
            except (IndexError, ValueError) as exc:
                raise CliError(EXIT_BAD_DATA, f"{path} row {i}: {exc}") from exc
    if not out:
        raise CliError(EXIT_BAD_DATA, f"{path}: no count rows")
    return out


def _household_totals(rows) -> dict[int, tuple[int, int | None]]:
    """Per-year sums; the in-ger sum only exists when every row reports it."""
    by_year: dict[int, list] = {}
    for r in rows:
        by_year.setdefault(r.year, []).append(r)
    totals = {}
    for year, group in by_year.items():
        total = sum(r.households_total for r in group)
        in_gers = (
            sum(r.households_in_gers for r in group)
            if all(r.households_in_gers is not None for r in group)
            else None
        )
        totals[year] = (total, in_gers)
    return totals


def _attach_households(
    counts: list[tuple[str, int]],
    totals: dict[int, tuple[int, int | None]],
    census_years: set[int],
) -> list[PeriodStats]:
    """Join count periods to household statistics.

    A census year is matched to the same-year statistics; every other period
    uses the prior year's published figures. A stats year claimed by a census
    match is not reused by the following period.
    """
    series = []
    for period, count in counts:
        year = int(period) if period.isdigit() else None
        attach = None
        if year is not None:
            if year in census_years and year in totals:
                attach = totals[year]
            elif (year - 1) in totals and (year - 1) not in census_years:
                attach = totals[year - 1]
        total, in_gers = attach if attach else (None, None)
        series.append(
            PeriodStats(
                period=period,
                ger_count=count,
                households_total=total,
                households_in_gers=in_gers,
            )
        )
    return series


# ----------------------------------------------------------------------
# subcommands


def _cmd_fetch(args) -> int:
    url = _require(args.url_template, "--url-template")
    period = _require(args.period, "--period")
    cache = Path(args.cache or os.environ.get(CACHE_ENV_VAR) or _require(None, "--cache"))

    tiles: list[TileCoord] = []
    if args.bbox:
        parts = _floats(args.bbox)
        if len(parts) != 4:
            raise CliError(EXIT_USAGE, "--bbox wants min_lat,min_lon,max_lat,max_lon")
        min_lat, min_lon, max_lat, max_lon = parts
        z = int(args.zoom)
        top_left = latlon_to_tile(GeoPoint(lat=max_lat, lon=min_lon), z)
        bottom_right = latlon_to_tile(GeoPoint(lat=min_lat, lon=max_lon), z)
        for x in range(top_left.x, bottom_right.x + 1):
            for y in range(top_left.y, bottom_right.y + 1):
                tiles.append(TileCoord(z, x, y))
    for spec in args.tile or []:
        z, x, y = _ints(spec.replace("/", ","))
        tiles.append(TileCoord(z, x, y))
    if not tiles:
        raise CliError(EXIT_USAGE, "nothing to fetch: give --bbox or --tile")

    headers = {}
    for item in args.header or []:
        name, _, value = item.partition(":")
        if not value:
            raise CliError(EXIT_USAGE, f"--header wants 'Name: value', got {item!r}")
        headers[name.strip()] = value.strip()

    source = TileSource(
        url_template=url,
        period=period,
        cache_root=cache,
        rate_limit=float(args.rate_limit),
        max_inflight=int(args.max_inflight),
        retries=int(args.retries),
        backoff_s=float(args.backoff),
        timeout_s=float(args.timeout),
        headers=headers or None,
    )
    report = fetch_tiles(source, tiles)
    stage = Stage(
        "fetch",
        _manifest_path(cache / period, "fetch"),
        params={
            "url_template": url,
            "period": period,
            "tiles_requested": report.requested,
            "zoom": int(args.zoom),
        },
        inputs={},
    )
    stage.write([])
    print(
        f"requested {report.requested}: fetched {report.fetched}, "
        f"cached {report.cached_hits}, failed {report.failed}"
    )
    for coord, reason in report.failures:
        _err(f"failed {coord.z}/{coord.x}/{coord.y}: {reason}")
    if args.verify:
        cache_report = verify_cache(cache, period)
        print(f"cache check: {cache_report.ok} ok, {len(cache_report.quarantined)} quarantined")
        for path, reason in cache_report.quarantined:
            _err(f"quarantined {path}: {reason}")
    return EXIT_STAGE_FAILED if report.failed else EXIT_OK


def _cmd_rasterize(args) -> int:
    src = _existing(_require(args.footprints, "--footprints"), "footprints file")
    out = Path(_require(args.out, "--out"))
    period = _require(args.period, "--period")
    zoom = int(args.zoom)

    stage = Stage(
        "rasterize",
        _manifest_path(out, "rasterize"),
        params={"period": period, "zoom": zoom, "skip_bad": bool(args.skip_bad)},
        inputs={"footprints": src},
    )
    marker = out / "labels" / period
    if _skip_if_current(stage, [marker], args.force):
        return EXIT_OK

    footprints, errors = read_footprints(src)
    for e in errors:
        _err(f"{src}: {e}")
    if errors and not args.skip_bad:
        raise CliError(EXIT_BAD_DATA, f"{len(errors)} bad features (use --skip-bad to continue)")
    if not footprints:
        raise CliError(EXIT_BAD_DATA, f"{src}: no usable footprints")

    # vertices plus ring-bbox corners, so footprints straddling a tile edge
    # still mark every tile they touch
    coords = set()
    for fp in footprints:
        lats = [v.lat for v in fp.ring]
        lons = [v.lon for v in fp.ring]
        for lat in (min(lats), max(lats)):
            for lon in (min(lons), max(lons)):
                coords.add(latlon_to_tile(GeoPoint(lat=lat, lon=lon), zoom))
        coords.update(latlon_to_tile(v, zoom) for v in fp.ring)
    coords = sorted(coords, key=lambda t: (t.x, t.y))
    from PIL import Image

    total_px = 0
    for coord in coords:
        mask = rasterize(footprints, coord)
        total_px += int(mask.sum())
        target = mask_path(out, period, coord)
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(target, format="PNG")
    stage.write([marker])
    print(f"rasterized {len(footprints)} footprints onto {len(coords)} tiles ({total_px} px)")
    return EXIT_OK


def _cmd_synth(args) -> int:
    out = Path(_require(args.out, "--out"))
    count = int(_require(args.count, "--count"))
    period = str(args.period)
    params = {
        "count": count,
        "seed": int(args.seed),
        "period": period,
        "gers_per_tile": int(args.gers_per_tile),
        "confusers_per_tile": int(args.confusers_per_tile),
        "overlap_pairs": int(args.overlap_pairs),
        "noise": float(args.noise),
        "edge_clipping": bool(args.edge_clipping),
        "base_tile": str(args.base_tile),
    }
    stage = Stage("synth", _manifest_path(out, "synth"), params=params, inputs={})
    outputs = [out / "manifest.csv", out / "truth.json"]
    if _skip_if_current(stage, outputs, args.force):
        return EXIT_OK

    z, x, y = _ints(str(args.base_tile).replace("/", ","))
    base_spec = SyntheticSceneSpec(
        ger_count=params["gers_per_tile"],
        confuser_count=params["confusers_per_tile"],
        overlap_pairs=params["overlap_pairs"],
        noise_level=params["noise"],
        allow_edge_clipping=params["edge_clipping"],
        coord=TileCoord(z, x, y),
        period=period,
    )
    scenes = generate_dataset(base_spec, count, base_seed=params["seed"])

    truth_tiles = []
    total_gers = 0
    for tile, circles in scenes:
        write_labeled_tile(out, tile)
        gers = sum(1 for c in circles if c.is_ger)
        total_gers += gers
        truth_tiles.append(
            {"z": tile.coord.z, "x": tile.coord.x, "y": tile.coord.y, "gers": gers}
        )
    write_dataset_manifest(out / "manifest.csv", [tile for tile, _ in scenes])
    truth = {"period": period, "total_gers": total_gers, "tiles": truth_tiles}
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")
    stage.write(outputs)
    print(f"generated {count} tiles with {total_gers} gers under {out}")
    return EXIT_OK


def _model_config(args) -> SegConfig:
    return SegConfig(
        stage_widths=_ints(args.widths),
        stage_strides=_ints(args.strides),
        aspp_rates=_ints(args.rates),
        aspp_width=int(args.aspp_width),
        dtype=str(args.dtype),
        seed=int(args.model_seed),
    )


def _loss_config(args) -> LossConfig:
    theta = _floats(args.theta)
    if len(theta) != 2:
        raise CliError(EXIT_USAGE, "--theta wants two comma-separated weights")
    return LossConfig(kind=str(args.loss), theta=theta)


def _cmd_train(args) -> int:
    data = _existing(_require(args.data, "--data"), "dataset directory")
    period = _require(args.period, "--period")
    checkpoint = Path(_require(args.checkpoint, "--checkpoint"))
    log_path = Path(args.log) if args.log else checkpoint.with_suffix(".log.csv")

    model_config = _model_config(args)
    loss_config = _loss_config(args)
    train_config = TrainConfig(
        epochs=int(args.epochs),
        learning_rate=float(args.learning_rate),
        momentum=float(args.momentum),
        shuffle_seed=int(args.seed),
        loss=loss_config,
    )
    params = {
        "period": period,
        "model": model_config.to_dict(),
        "loss": {"kind": loss_config.kind, "theta": list(loss_config.theta)},
        "epochs": train_config.epochs,
        "learning_rate": train_config.learning_rate,
        "momentum": train_config.momentum,
        "shuffle_seed": train_config.shuffle_seed,
        "train_fraction": float(args.train_fraction),
        "split_seed": int(args.split_seed),
    }
    stage = Stage(
        "train", _manifest_path(checkpoint.parent, "train"), params=params, inputs={"dataset": data}
    )
    if _skip_if_current(stage, [checkpoint, log_path], args.force):
        return EXIT_OK

    samples = _load_samples(data, period)
    train_set, eval_set = split_dataset(samples, float(args.train_fraction), int(args.split_seed))
    model = SegModel(model_config)
    print(f"training on {len(train_set)} tiles, evaluating on {len(eval_set)}")
    history = train(
        model,
        train_set,
        eval_set,
        train_config,
        progress=lambda s: print(
            f"epoch {s.epoch:3d}: loss {s.train_loss:.4f} f1 {s.eval_f1_ger:.3f}"
        ),
    )
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, checkpoint)
    write_training_log(log_path, history)
    stage.write([checkpoint, log_path])
    last = history[-1]
    print(f"saved {checkpoint} (final f1 {last.eval_f1_ger:.3f}, miou {last.eval_miou_ger:.3f})")
    return EXIT_OK


def _cmd_predict(args) -> int:
    data = _existing(_require(args.data, "--data"), "dataset directory")
    checkpoint = _existing(_require(args.checkpoint, "--checkpoint"), "checkpoint")
    period = _require(args.period, "--period")
    out = Path(_require(args.out, "--out"))

    stage = Stage(
        "predict",
        _manifest_path(out, "predict"),
        params={"period": period},
        inputs={"dataset": data, "checkpoint": checkpoint},
    )
    marker = out / "labels" / period
    if _skip_if_current(stage, [marker], args.force):
        return EXIT_OK

    model = load_model(checkpoint)
    tiles = list_tiles(data, period)
    if not tiles:
        raise CliError(EXIT_MISSING_INPUT, f"no tiles for period {period!r} under {data}")
    from PIL import Image

    for t in tiles:
        pred = model.predict(read_tile_image(data, period, t))
        target = mask_path(out, period, t)
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((pred > 0).astype(np.uint8) * 255, mode="L").save(target, format="PNG")
    stage.write([marker])
    print(f"wrote {len(tiles)} predicted masks under {out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    pred_root = _existing(_require(args.pred, "--pred"), "prediction directory")
    truth_root = _existing(_require(args.truth, "--truth"), "truth directory")
    period = _require(args.period, "--period")
    out = Path(_require(args.out, "--out"))

    stage = Stage(
        "evaluate",
        _manifest_path(out.parent, "evaluate"),
        params={"period": period, "per_tile_mean": bool(args.per_tile_mean)},
        inputs={"pred": pred_root, "truth": truth_root},
    )
    if _skip_if_current(stage, [out], args.force):
        return EXIT_OK

    coords = _mask_tiles(truth_root, period)
    if not coords:
        raise CliError(EXIT_MISSING_INPUT, f"no truth masks for period {period!r}")
    preds = [read_mask(pred_root, period, t) for t in coords]
    truths = [read_mask(truth_root, period, t) for t in coords]
    per_class = evaluate_masks(preds, truths, per_tile_mean=bool(args.per_tile_mean))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(per_class, out)
    stage.write([out])
    for cls in sorted(per_class):
        print(f"class {cls}: f1 {f1(per_class[cls]):.4f}")
    return EXIT_OK


def _cmd_count(args) -> int:
    masks_root = _existing(_require(args.masks, "--masks"), "masks directory")
    period = _require(args.period, "--period")
    out_geojson = Path(_require(args.out_geojson, "--out-geojson"))
    out_csv = Path(_require(args.out_csv, "--out-csv"))

    inputs = {"masks": masks_root}
    log_path = Path(args.log) if args.log else None
    if log_path and log_path.exists():
        inputs["verdicts"] = log_path
    stage = Stage(
        "count",
        _manifest_path(out_csv.parent, "count"),
        params={
            "period": period,
            "min_blob_px": int(args.min_blob_px),
            "unit_area_m2": float(args.unit_area),
            "per_blob": bool(args.per_blob),
        },
        inputs=inputs,
    )
    if _skip_if_current(stage, [out_geojson, out_csv], args.force):
        return EXIT_OK

    coords = _mask_tiles(masks_root, period)
    if not coords:
        raise CliError(EXIT_MISSING_INPUT, f"no masks for period {period!r} under {masks_root}")
    detections = []
    for t in coords:
        mask = read_mask(masks_root, period, t)
        detections.extend(connected_components(mask, t, period, min_blob_px=int(args.min_blob_px)))
    verdicts = read_verdict_log(log_path) if log_path else []
    results = count_by_period(
        detections, verdicts, unit_area_m2=float(args.unit_area), per_blob=bool(args.per_blob)
    )
    out_geojson.parent.mkdir(parents=True, exist_ok=True)
    write_detections_geojson(out_geojson, detections)
    write_counts_csv(out_csv, results)
    stage.write([out_geojson, out_csv])
    for r in results:
        print(
            f"period {r.period}: {len(detections)} blobs, raw {r.raw_count}, "
            f"verified {r.verified_count}"
        )
    return EXIT_OK


def _cmd_serve_review(args) -> int:
    detections_path = _existing(_require(args.detections, "--detections"), "detections file")
    tiles_root = _existing(_require(args.tiles, "--tiles"), "tile cache")
    log_path = Path(_require(args.log, "--log"))

    detections = read_detections_geojson(detections_path)
    service = ReviewService(
        detections,
        tiles_root=tiles_root,
        log_path=log_path,
        static_dir=args.static,
    )
    server = ReviewServer(service, host=str(args.host), port=int(args.port))
    print(
        f"review service on http://{args.host}:{server.port} "
        f"({len(detections)} detections, log {log_path})",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def _cmd_aggregate(args) -> int:
    paths = [_existing(p, "detections file") for p in _require(args.detections, "--detections")]
    out_geojson = Path(_require(args.out_geojson, "--out-geojson"))
    out_csv = Path(_require(args.out_csv, "--out-csv"))

    stage = Stage(
        "aggregate",
        _manifest_path(out_csv.parent, "aggregate"),
        params={"n_inputs": len(paths)},
        inputs={f"detections_{i}": p for i, p in enumerate(paths)},
    )
    if _skip_if_current(stage, [out_geojson, out_csv], args.force):
        return EXIT_OK

    detections = [d for p in paths for d in read_detections_geojson(p)]
    stats = aggregate_to_grid(detections)
    out_geojson.parent.mkdir(parents=True, exist_ok=True)
    write_grid_deltas_geojson(out_geojson, stats)
    write_grid_deltas_csv(out_csv, stats)
    stage.write([out_geojson, out_csv])
    print(f"aggregated {len(detections)} detections into {len(stats)} grid cells")
    return EXIT_OK


def _analysis_series(args) -> tuple[list[PeriodStats], set[int]]:
    counts = _read_counts_csv(_existing(_require(args.ger_counts, "--ger-counts"), "counts file"))
    census_years = set(_ints(args.census_years)) if args.census_years else set()
    totals = {}
    if args.households:
        totals = _household_totals(read_household_csv(_existing(args.households, "households file")))
    return _attach_households(counts, totals, census_years), census_years


def _cmd_analyze(args) -> int:
    out = Path(_require(args.out, "--out"))
    inputs = {"ger_counts": _existing(_require(args.ger_counts, "--ger-counts"), "counts file")}
    for label, value in (
        ("households", args.households),
        ("districts", args.districts),
        ("deprivation", args.deprivation),
    ):
        if value:
            inputs[label] = _existing(value, f"{label} file")
    stage = Stage(
        "analyze",
        _manifest_path(out.parent, "analyze"),
        params={"census_years": sorted(_ints(args.census_years)) if args.census_years else []},
        inputs=inputs,
    )
    if _skip_if_current(stage, [out], args.force):
        return EXIT_OK

    series, _ = _analysis_series(args)
    result: dict = {
        "periods": [
            {
                "period": s.period,
                "ger_count": s.ger_count,
                "households_total": s.households_total,
                "households_in_gers": s.households_in_gers,
            }
            for s in series
        ],
        "reference_households_per_ger": REFERENCE_HOUSEHOLDS_PER_GER,
        "other_subdistricts_slum_ratio_bound": OTHER_SUBDISTRICTS_SLUM_RATIO,
        "notes": [
            "the sub-district bound is reported for sensitivity only and is never applied",
        ],
    }
    if len(series) >= 2:
        result["period_deltas"] = [
            {"from": a, "to": b, "delta": d} for (a, b), d in period_deltas(series)
        ]

    measured = {}
    for s in series:
        if s.households_in_gers is not None:
            measured[s.period] = households_per_ger(s.households_in_gers, s.ger_count)
    result["households_per_ger"] = measured
    for period, value in measured.items():
        if abs(value - REFERENCE_HOUSEHOLDS_PER_GER) > 0.02:
            result["notes"].append(
                f"measured households-per-ger {value:.4f} in {period} differs from the "
                f"reference ratio {REFERENCE_HOUSEHOLDS_PER_GER}; both are reported"
            )

    hpg = float(args.hpg) if args.hpg is not None else REFERENCE_HOUSEHOLDS_PER_GER
    rows = ratio_rows(series, hpg)
    result["slum_ratios"] = [
        {
            "year": r.year,
            "ger_households_est": r.ger_households_est,
            "total_households": r.total_households,
            "ratio": r.slum_ratio,
        }
        for r in rows
    ]

    if args.deprivation:
        dep_rows = read_deprivation_csv(inputs["deprivation"])
        validate_deprivation_table(dep_rows)
        result["deprivation_shares"] = {
            indicator: deprivation_share(dep_rows, indicator)
            for indicator in sorted({r.indicator for r in dep_rows})
        }
    if args.districts:
        pairs = read_district_csv(inputs["districts"])
        result["pearson_r"] = pearson(pairs)

    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    stage.write([out])
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out_dir = Path(_require(args.out_dir, "--out-dir"))
    inputs = {"ger_counts": _existing(_require(args.ger_counts, "--ger-counts"), "counts file")}
    for label, value in (
        ("households", args.households),
        ("facilities", args.facilities),
        ("dem", args.dem),
    ):
        if value:
            inputs[label] = _existing(value, f"{label} file")
    detection_paths = [
        _existing(p, "detections file") for p in (args.detections or [])
    ]
    for i, p in enumerate(detection_paths):
        inputs[f"detections_{i}"] = p

    stage = Stage(
        "report",
        _manifest_path(out_dir, "report"),
        params={
            "hpg": float(args.hpg) if args.hpg is not None else REFERENCE_HOUSEHOLDS_PER_GER,
            "census_years": sorted(_ints(args.census_years)) if args.census_years else [],
        },
        inputs=inputs,
    )
    outputs = [out_dir / "period_series.csv"]
    if args.households:
        outputs.append(out_dir / "slum_ratios.csv")
    if detection_paths:
        outputs += [out_dir / "grid_deltas.geojson", out_dir / "grid_deltas.csv"]
        if args.facilities:
            outputs.append(out_dir / "access_indicators.csv")
    if _skip_if_current(stage, outputs, args.force):
        return EXIT_OK

    out_dir.mkdir(parents=True, exist_ok=True)
    series, _ = _analysis_series(args)
    write_period_series_csv(out_dir / "period_series.csv", series)
    written = ["period_series.csv"]

    if args.households:
        hpg = float(args.hpg) if args.hpg is not None else REFERENCE_HOUSEHOLDS_PER_GER
        write_ratio_csv(out_dir / "slum_ratios.csv", ratio_rows(series, hpg))
        written.append("slum_ratios.csv")

    if detection_paths:
        detections = [d for p in detection_paths for d in read_detections_geojson(p)]
        stats = aggregate_to_grid(detections)
        write_grid_deltas_geojson(out_dir / "grid_deltas.geojson", stats)
        write_grid_deltas_csv(out_dir / "grid_deltas.csv", stats)
        written += ["grid_deltas.geojson", "grid_deltas.csv"]
        if args.facilities:
            facilities, errors = read_facilities(inputs["facilities"])
            for e in errors:
                _err(f"{inputs['facilities']}: {e}")
            if errors and not args.skip_bad:
                raise CliError(EXIT_BAD_DATA, f"{len(errors)} bad facility features")
            gers_by_period: dict[str, list[GeoPoint]] = {}
            for d in detections:
                gers_by_period.setdefault(d.period, []).append(d.centroid)
            dem = read_esri_ascii(inputs["dem"]) if args.dem else None
            rows = indicator_report(gers_by_period, facilities, dem=dem)
            write_indicator_csv(rows, out_dir / "access_indicators.csv")
            written.append("access_indicators.csv")

    stage.write(outputs)
    print(f"wrote {', '.join(written)} under {out_dir}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    """Hidden maintenance command: numeric check of the training gradients."""
    config = SegConfig(
        stage_widths=_ints(args.widths),
        stage_strides=_ints(args.strides),
        aspp_rates=_ints(args.rates),
        aspp_width=int(args.aspp_width),
        dtype="float64",
        seed=int(args.model_seed),
    )
    model = SegModel(config)
    rng = np.random.default_rng(0)
    flat = model.get_flat_params()
    model.set_flat_params(flat + rng.normal(0.0, 0.05, size=flat.shape))
    size = int(args.size)
    image = rng.random((size, size, 3))
    mask = (rng.random((size, size)) < 0.3).astype(np.uint8)
    err = gradient_check(
        model, image, mask, _loss_config(args), sample=int(args.sample) if args.sample else None
    )
    print(f"max relative gradient error: {err:.3e} over {model.get_flat_params().size} params")
    return EXIT_OK if err < 1e-4 else EXIT_STAGE_FAILED


# ----------------------------------------------------------------------
# parser


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--widths", default="8,16,32,32", help="backbone channel widths")
    sub.add_argument("--strides", default="1,2,2,1", help="per-stage strides")
    sub.add_argument("--rates", default="1,2,4", help="parallel dilation rates")
    sub.add_argument("--aspp-width", default=32, type=int, help="channels per dilated branch")
    sub.add_argument("--model-seed", default=0, type=int, help="weight init seed")


def _add_loss_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--loss", default="damped", choices=("damped", "ce"), help="loss function")
    sub.add_argument("--theta", default="0.1,0.9", help="per-class damping weights")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="gerscan",
        description="Detect, count, and analyze ger dwellings on map tiles.",
    )
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    parser.add_argument("--version", action="version", version=f"gerscan {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, help_text: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--force", action="store_true", help="rerun even if outputs are current")
        registry[name] = p
        return p

    p = sub("fetch", "download XYZ tiles into the local cache")
    p.add_argument("--url-template", help="tile URL with {z}/{x}/{y} placeholders")
    p.add_argument("--period", help="imagery period tag, e.g. 2021")
    p.add_argument("--cache", help=f"cache root (or ${CACHE_ENV_VAR})")
    p.add_argument("--bbox", help="min_lat,min_lon,max_lat,max_lon")
    p.add_argument("--zoom", default=18, type=int)
    p.add_argument("--tile", action="append", help="single z/x/y (repeatable)")
    p.add_argument("--rate-limit", default=8.0, type=float, help="requests per second")
    p.add_argument("--max-inflight", default=8, type=int)
    p.add_argument("--retries", default=3, type=int)
    p.add_argument("--backoff", default=0.25, type=float, help="base retry delay, seconds")
    p.add_argument("--timeout", default=10.0, type=float)
    p.add_argument("--header", action="append", help="extra HTTP header 'Name: value'")
    p.add_argument("--verify", action="store_true", help="re-decode the cache afterwards")

    p = sub("rasterize", "burn labeled footprints into mask tiles")
    p.add_argument("--footprints", help="GeoJSON polygon collection")
    p.add_argument("--out", help="dataset root to write masks into")
    p.add_argument("--period")
    p.add_argument("--zoom", default=18, type=int)
    p.add_argument("--skip-bad", action="store_true", help="drop malformed features and continue")

    p = sub("synth", "generate a synthetic labeled dataset with exact ground truth")
    p.add_argument("--out", help="dataset root")
    p.add_argument("--count", type=int, help="number of tiles")
    p.add_argument("--seed", default=0, type=int)
    p.add_argument("--period", default="synthetic")
    p.add_argument("--gers-per-tile", default=10, type=int)
    p.add_argument("--confusers-per-tile", default=0, type=int)
    p.add_argument("--overlap-pairs", default=0, type=int)
    p.add_argument("--noise", default=0.3, type=float)
    p.add_argument("--edge-clipping", action="store_true")
    p.add_argument("--base-tile", default="18/208896/91184", help="z/x/y of the first tile")

    p = sub("train", "train the segmentation model on a labeled dataset")
    p.add_argument("--data", help="dataset root from synth/fetch+rasterize")
    p.add_argument("--period")
    p.add_argument("--checkpoint", help="output model file")
    p.add_argument("--log", help="training log CSV (default: next to checkpoint)")
    p.add_argument("--epochs", default=30, type=int)
    p.add_argument("--learning-rate", default=0.01, type=float)
    p.add_argument("--momentum", default=0.9, type=float)
    p.add_argument("--seed", default=0, type=int, help="shuffle seed")
    p.add_argument("--train-fraction", default=0.8, type=float)
    p.add_argument("--split-seed", default=0, type=int)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    _add_model_flags(p)
    _add_loss_flags(p)

    p = sub("predict", "run a checkpoint over a dataset, writing predicted masks")
    p.add_argument("--data", help="dataset root with images")
    p.add_argument("--period")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="prediction root (masks under labels/<period>)")

    p = sub("evaluate", "compare predicted masks against truth masks")
    p.add_argument("--pred", help="prediction root")
    p.add_argument("--truth", help="truth dataset root")
    p.add_argument("--period")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--per-tile-mean", action="store_true", help="average per tile, not pooled")

    p = sub("count", "extract blob detections from masks and count gers")
    p.add_argument("--masks", help="mask root (predictions or truth)")
    p.add_argument("--period")
    p.add_argument("--out-geojson", help="detections output")
    p.add_argument("--out-csv", help="per-period counts output")
    p.add_argument("--min-blob-px", default=DEFAULT_MIN_BLOB_PX, type=int)
    p.add_argument("--unit-area", default=UNIT_GER_AREA_M2, type=float)
    p.add_argument("--log", help="verdict log to apply (optional)")
    p.add_argument("--per-blob", action="store_true", help="round each blob separately")

    p = sub("serve-review", "serve the verification queue over HTTP")
    p.add_argument("--port", default=8000, type=int)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--detections", help="detections GeoJSON from count")
    p.add_argument("--tiles", help="tile cache root")
    p.add_argument("--log", help="verdict log (appended to)")
    p.add_argument("--static", help="directory of frontend assets")

    p = sub("aggregate", "aggregate detections onto the coarse grid with deltas")
    p.add_argument("--detections", action="append", help="detections GeoJSON (repeatable)")
    p.add_argument("--out-geojson")
    p.add_argument("--out-csv")

    p = sub("analyze", "compute the census cross-statistics as one JSON document")
    p.add_argument("--ger-counts", help="period,count CSV (or count stage output)")
    p.add_argument("--households", help="year,sub_district,totals CSV")
    p.add_argument("--districts", help="district ger-ratio/poverty CSV")
    p.add_argument("--deprivation", help="indicator share CSV")
    p.add_argument("--census-years", default="2020", help="years matched to same-year stats")
    p.add_argument("--hpg", type=float, help="households-per-ger override")
    p.add_argument("--out", help="output JSON")

    p = sub("report", "emit the publication-style data products")
    p.add_argument("--ger-counts")
    p.add_argument("--households")
    p.add_argument("--census-years", default="2020")
    p.add_argument("--hpg", type=float)
    p.add_argument("--detections", action="append")
    p.add_argument("--facilities", help="facilities GeoJSON for access indicators")
    p.add_argument("--dem", help="ESRI ASCII elevation grid")
    p.add_argument("--skip-bad", action="store_true")
    p.add_argument("--out-dir")

    p = sub("gradcheck", "verify training gradients against finite differences")
    p.add_argument("--size", default=16, type=int, help="probe image side length")
    p.add_argument("--sample", type=int, help="check only this many sampled parameters")
    _add_model_flags(p)
    _add_loss_flags(p)
    p.set_defaults(widths="2,3", strides="1,2", rates="1,2", aspp_width=3)

    return parser, registry


HANDLERS = {
    "fetch": _cmd_fetch,
    "rasterize": _cmd_rasterize,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "count": _cmd_count,
    "serve-review": _cmd_serve_review,
    "aggregate": _cmd_aggregate,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
    "gradcheck": _cmd_gradcheck,
}

DATA_ERRORS = (
    IngestError,
    CountingError,
    AnalysisError,
    LabelError,
    MetricsError,
    TileMathError,
    GeoAccessError,
    CheckpointError,
    ReviewError,
)


def _apply_config(parser_registry, command: str, config_path: str) -> None:
    path = Path(config_path)
    if not path.exists():
        raise CliError(EXIT_USAGE, f"config file not found: {path}")
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise CliError(EXIT_USAGE, f"config {path} must be a JSON object")
    section = config.get(command, {})
    if not isinstance(section, dict):
        raise CliError(EXIT_USAGE, f"config section {command!r} must be an object")
    sub = parser_registry[command]
    known = {action.dest for action in sub._actions}
    for key in section:
        if key not in known:
            raise CliError(EXIT_USAGE, f"config key {command}.{key} matches no flag")
    sub.set_defaults(**section)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        probe, _ = parser.parse_known_args(argv)
        if probe.config:
            _apply_config(registry, probe.command, probe.config)
        args = parser.parse_args(argv)
        return HANDLERS[args.command](args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except FileNotFoundError as exc:
        _err(f"missing input: {exc}")
        return EXIT_MISSING_INPUT
    except DATA_ERRORS as exc:
        _err(str(exc))
        return EXIT_BAD_DATA
    except (TrainingDiverged, PlacementError) as exc:
        _err(str(exc))
        return EXIT_STAGE_FAILED
    except KeyboardInterrupt:
        return 130
    except SystemExit as exc:  # argparse --help/--version/usage errors
        return int(exc.code or 0)
    except Exception as exc:
        _err(f"unexpected error: {exc!r}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
