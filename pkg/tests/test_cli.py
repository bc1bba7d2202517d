"""End-to-end command tests: wiring, determinism, restart, exit codes."""

from __future__ import annotations

import json
import signal
import subprocess
import sys
import urllib.request
from pathlib import Path

import pytest

from gerscan.cli import (
    EXIT_BAD_DATA,
    EXIT_MISSING_INPUT,
    EXIT_OK,
    EXIT_STAGE_FAILED,
    EXIT_USAGE,
    main,
)
from gerscan.ingest import fixture_path


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


TINY_MODEL = ["--widths", "2,4", "--strides", "2,2", "--rates", "1,2", "--aspp-width", "2"]


def _synth(out: Path, count: int = 6, seed: int = 3, period: str = "2021") -> None:
    assert main(
        ["synth", "--out", str(out), "--count", str(count), "--seed", str(seed), "--period", period]
    ) == EXIT_OK


# -- synth --------------------------------------------------------------


def test_synth_is_deterministic_and_restartable(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _synth(a, count=5, seed=7)
    _synth(b, count=5, seed=7)
    assert _tree_bytes(a) == _tree_bytes(b)

    capsys.readouterr()
    _synth(a, count=5, seed=7)  # second run over the same directory
    assert "up to date, skipping" in capsys.readouterr().out
    assert _tree_bytes(a) == _tree_bytes(b)


def test_synth_truth_matches_request(tmp_path):
    out = tmp_path / "ds"
    assert main(
        ["synth", "--out", str(out), "--count", "4", "--seed", "1",
         "--gers-per-tile", "3", "--overlap-pairs", "1", "--period", "2020"]
    ) == EXIT_OK
    truth = json.loads((out / "truth.json").read_text())
    assert truth["period"] == "2020"
    assert truth["total_gers"] == 12
    assert all(t["gers"] == 3 for t in truth["tiles"])
    manifest = json.loads((out / "synth.manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert "identity" in manifest and "versions" in manifest
    assert not any("time" in k.lower() or "date" in k.lower() for k in manifest)


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _synth(a, seed=1)
    _synth(b, seed=2)
    assert _tree_bytes(a) != _tree_bytes(b)


# -- train / predict / evaluate / count ----------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small synth -> train -> predict run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    _synth(data, count=8, seed=11)
    code = main(
        ["train", "--data", str(data), "--period", "2021",
         "--checkpoint", str(root / "run" / "model.gseg"), "--epochs", "2", *TINY_MODEL]
    )
    assert code == EXIT_OK
    code = main(
        ["predict", "--data", str(data), "--period", "2021",
         "--checkpoint", str(root / "run" / "model.gseg"), "--out", str(root / "preds")]
    )
    assert code == EXIT_OK
    return root


def test_train_writes_checkpoint_log_and_manifest(pipeline):
    run = pipeline / "run"
    assert (run / "model.gseg").exists()
    log = (run / "model.log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,eval_f1_ger,eval_miou_ger,eval_pixel_acc"
    assert len(log) == 3
    assert (run / "train.manifest.json").exists()


def test_train_skips_when_current(pipeline, capsys):
    code = main(
        ["train", "--data", str(pipeline / "data"), "--period", "2021",
         "--checkpoint", str(pipeline / "run" / "model.gseg"), "--epochs", "2", *TINY_MODEL]
    )
    assert code == EXIT_OK
    assert "up to date, skipping" in capsys.readouterr().out


def test_train_determinism(tmp_path, pipeline):
    args = ["--data", str(pipeline / "data"), "--period", "2021", "--epochs", "2", *TINY_MODEL]
    assert main(["train", *args, "--checkpoint", str(tmp_path / "x.gseg")]) == EXIT_OK
    assert (tmp_path / "x.gseg").read_bytes() == (pipeline / "run" / "model.gseg").read_bytes()


def test_predict_output_layout(pipeline):
    masks = list((pipeline / "preds" / "labels" / "2021").glob("*/*/*.png"))
    assert len(masks) == 8


def test_evaluate_perfect_prediction_is_f1_one(pipeline, tmp_path):
    data = pipeline / "data"
    out = tmp_path / "report.csv"
    code = main(
        ["evaluate", "--pred", str(data), "--truth", str(data), "--period", "2021",
         "--out", str(out)]
    )
    assert code == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].startswith("class,f1,")
    for row in rows[1:]:
        assert row.split(",")[1] == "1.000000"


def test_count_on_truth_masks_close_to_ground_truth(pipeline, tmp_path):
    data = pipeline / "data"
    out_csv = tmp_path / "counts.csv"
    code = main(
        ["count", "--masks", str(data), "--period", "2021",
         "--out-geojson", str(tmp_path / "dets.geojson"), "--out-csv", str(out_csv)]
    )
    assert code == EXIT_OK
    truth = json.loads((data / "truth.json").read_text())
    header, row = out_csv.read_text().splitlines()
    assert header == "period,raw_count,verified_count,avg_ger_area_m2"
    period, raw, verified, _ = row.split(",")
    assert period == "2021"
    assert abs(int(verified) - truth["total_gers"]) <= 0.1 * truth["total_gers"]
    dets = json.loads((tmp_path / "dets.geojson").read_text())
    assert dets["type"] == "FeatureCollection" and dets["features"]


def test_aggregate_grid_outputs(pipeline, tmp_path):
    dets = tmp_path / "dets.geojson"
    main(
        ["count", "--masks", str(pipeline / "data"), "--period", "2021",
         "--out-geojson", str(dets), "--out-csv", str(tmp_path / "c.csv")]
    )
    code = main(
        ["aggregate", "--detections", str(dets),
         "--out-geojson", str(tmp_path / "grid.geojson"), "--out-csv", str(tmp_path / "grid.csv")]
    )
    assert code == EXIT_OK
    header = (tmp_path / "grid.csv").read_text().splitlines()[0]
    assert header == "z,x,y,count_2021,delta"
    grid = json.loads((tmp_path / "grid.geojson").read_text())
    assert all(f["properties"]["z"] == 15 for f in grid["features"])


# -- analyze / report ------------------------------------------------------


def _fixture_args() -> list[str]:
    return [
        "--ger-counts", str(fixture_path("ger_counts.csv")),
        "--households", str(fixture_path("households.csv")),
        "--districts", str(fixture_path("districts_poverty.csv")),
        "--deprivation", str(fixture_path("deprivation_2020.csv")),
    ]


def test_analyze_reproduces_published_statistics(tmp_path):
    out = tmp_path / "analysis.json"
    assert main(["analyze", *_fixture_args(), "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())

    assert doc["households_per_ger"]["2020"] == pytest.approx(1.0497, abs=1e-4)
    assert doc["reference_households_per_ger"] == 1.026
    assert any("households-per-ger" in note for note in doc["notes"])

    ratios = {r["year"]: r["ratio"] for r in doc["slum_ratios"]}
    assert round(ratios[2020], 3) == 0.216
    assert round(ratios[2023], 3) == 0.211
    est = {r["year"]: r["ger_households_est"] for r in doc["slum_ratios"]}
    assert est[2023] == 90676

    assert doc["deprivation_shares"]["toilet"] == pytest.approx(0.976)
    assert doc["deprivation_shares"]["water"] == pytest.approx(0.010)
    assert doc["pearson_r"] == pytest.approx(0.9847193159208064, abs=1e-9)
    deltas = [d["delta"] for d in doc["period_deltas"]]
    assert deltas[0] == 1087 and deltas[1] == -10492 and deltas[2] == 1727
    assert doc["other_subdistricts_slum_ratio_bound"] == 0.33


def test_report_products(tmp_path):
    out = tmp_path / "report"
    code = main(
        ["report",
         "--ger-counts", str(fixture_path("ger_counts.csv")),
         "--households", str(fixture_path("households.csv")),
         "--out-dir", str(out)]
    )
    assert code == EXIT_OK
    series = (out / "period_series.csv").read_text().splitlines()
    assert series[0] == "period,ger_count,delta_prev,households_total,households_in_gers"
    assert len(series) == 8
    ratios = (out / "slum_ratios.csv").read_text().splitlines()
    assert ratios[1] == "2020,86925,91249,422450,0.216000"
    assert ratios[2] == "2023,88378,90676,429744,0.211000"


def test_report_rerun_is_byte_identical(tmp_path):
    args = ["report", "--ger-counts", str(fixture_path("ger_counts.csv")),
            "--households", str(fixture_path("households.csv"))]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*args, "--out-dir", str(a)]) == EXIT_OK
    assert main([*args, "--out-dir", str(b)]) == EXIT_OK
    assert _tree_bytes(a) == _tree_bytes(b)


# -- config file -----------------------------------------------------------


def test_config_supplies_values_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"count": 3, "period": "2019", "seed": 5}}))
    assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "a")]) == EXIT_OK
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert truth["period"] == "2019" and len(truth["tiles"]) == 3

    assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "b"), "--count", "2"]) == EXIT_OK
    assert len(json.loads((tmp_path / "b" / "truth.json").read_text())["tiles"]) == 2


def test_config_errors(tmp_path):
    missing = tmp_path / "nope.json"
    assert main(["--config", str(missing), "synth", "--out", "x", "--count", "1"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad), "synth", "--out", "x", "--count", "1"]) == EXIT_USAGE
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"synth": {"no_such_flag": 1}}))
    assert main(["--config", str(unknown), "synth", "--out", "x", "--count", "1"]) == EXIT_USAGE


# -- exit codes --------------------------------------------------------------


def test_exit_codes(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x")]) == EXIT_USAGE  # --count missing
    assert main(
        ["train", "--data", str(tmp_path / "void"), "--period", "x",
         "--checkpoint", str(tmp_path / "m.gseg")]
    ) == EXIT_MISSING_INPUT
    bad = tmp_path / "bad.csv"
    bad.write_text("wrong,header\n")
    assert main(["analyze", "--ger-counts", str(bad), "--out", str(tmp_path / "a.json")]) == EXIT_BAD_DATA
    assert main(["--help"]) == 0
    assert main(["no-such-command"]) == EXIT_USAGE


def test_divergence_exit_code(tmp_path, capsys):
    data = tmp_path / "ds"
    _synth(data, count=4)
    code = main(
        ["train", "--data", str(data), "--period", "2021",
         "--checkpoint", str(tmp_path / "m.gseg"), "--epochs", "1",
         "--learning-rate", "1e6", *TINY_MODEL]
    )
    assert code == EXIT_STAGE_FAILED


# -- serve-review (subprocess) -----------------------------------------------


def test_serve_review_round_trip(tmp_path):
    data = tmp_path / "ds"
    _synth(data, count=4)
    dets = tmp_path / "dets.geojson"
    main(
        ["count", "--masks", str(data), "--period", "2021",
         "--out-geojson", str(dets), "--out-csv", str(tmp_path / "c.csv")]
    )
    proc = subprocess.Popen(
        [sys.executable, "-m", "gerscan.cli", "serve-review", "--port", "0",
         "--detections", str(dets), "--tiles", str(data),
         "--log", str(tmp_path / "verdicts.jsonl")],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        banner = proc.stdout.readline()
        assert "review service on http://" in banner
        base = banner.split(" on ")[1].split(" ")[0].rstrip("/")

        with urllib.request.urlopen(f"{base}/api/progress", timeout=5) as resp:
            before = json.load(resp)
        assert before["accepted"] == 0 and before["pending"] > 0

        first = json.load(
            urllib.request.urlopen(f"{base}/api/queue?limit=1", timeout=5)
        )["items"][0]
        req = urllib.request.Request(
            f"{base}/api/verdict",
            data=json.dumps({"detection_id": first["id"], "action": "accept"}).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=5) as resp:
            assert json.load(resp)["status"] == "accepted"

        with urllib.request.urlopen(f"{base}/api/progress", timeout=5) as resp:
            after = json.load(resp)
        assert after["accepted"] == 1
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    assert (tmp_path / "verdicts.jsonl").exists()
