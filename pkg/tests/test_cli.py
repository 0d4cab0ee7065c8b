"""Command-line pipeline tests.

Everything runs in-process through main(argv) against tmp directories, so
exit codes, stdout summaries and stderr error objects are all observable.
"""

import json
import os

import pytest

from linkscope.cli import main
from linkscope.evaluation import ExperimentConfig, count_planned_fits, read_records
from linkscope.features import read_features
from linkscope.traces import read_csv


def run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    summary = json.loads(out.out) if rc == 0 else None
    error = json.loads(out.err)["error"] if out.err.strip() else None
    return rc, summary, error


def eval_config_doc(**overrides):
    doc = {
        "profile": "fast",
        "seed": 11,
        "n_links": 40,
        "folds": 2,
        "anomalies": ["suddend"],
        "representations": ["aggregated"],
        "include_encoded": False,
        "lof_k": [5, 10],
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


def test_ingest_and_cache_hit(pipeline_dir, capsys):
    d = str(pipeline_dir)
    rc, summary, _ = run(capsys, "ingest", "--out-dir", d, "--synthetic", "--links", "40", "--seed", "11")
    assert rc == 0
    assert summary["cache_hit"] is False
    assert summary["stats"] == {
        "raw_links": 40,
        "kept_links": 40,
        "checksum": summary["stats"]["checksum"],
    }
    dataset = pipeline_dir / "dataset.csv"
    assert dataset.exists() and (pipeline_dir / "ingest.manifest.json").exists()
    before = dataset.read_bytes()
    rc, summary, _ = run(capsys, "ingest", "--out-dir", d, "--synthetic", "--links", "40", "--seed", "11")
    assert rc == 0 and summary["cache_hit"] is True
    assert dataset.read_bytes() == before
    assert not (pipeline_dir / ".lock").exists()  # released


def test_inject_stage(pipeline_dir, capsys):
    d = str(pipeline_dir)
    rc, summary, _ = run(capsys, "inject", "--out-dir", d, "--kind", "suddend", "--seed", "11")
    assert rc == 0 and summary["cache_hit"] is False
    assert summary["stats"]["suddend"] == {"total": 40, "anomalous": 13}  # floor(0.33 * 40)
    assert (pipeline_dir / "scenario_suddend.csv").exists()
    assert (pipeline_dir / "labels_suddend.csv").exists()
    ds = read_csv(str(pipeline_dir / "scenario_suddend.csv"))
    assert len(ds.traces) == 40
    rc, summary, _ = run(capsys, "inject", "--out-dir", d, "--kind", "suddend", "--seed", "11")
    assert rc == 0 and summary["cache_hit"] is True


def test_featurize_stage(pipeline_dir, capsys):
    d = str(pipeline_dir)
    rc, summary, _ = run(capsys, "featurize", "--out-dir", d, "--kind", "suddend")
    assert rc == 0 and summary["cache_hit"] is False
    widths = {"time_value": 300, "aggregated": 7, "histogram": 10, "fft": 151}
    for token, width in widths.items():
        fm = read_features(str(pipeline_dir / f"features_suddend_{token}.csv"))
        assert fm.X.shape == (40, width)
        assert fm.labels is not None and sum(lb == "ANOMALOUS" for lb in fm.labels) == 13
    rc, summary, _ = run(capsys, "featurize", "--out-dir", d, "--kind", "suddend")
    assert rc == 0 and summary["cache_hit"] is True


def test_encode_stage(pipeline_dir, capsys):
    d = str(pipeline_dir)
    rc, summary, _ = run(capsys, "encode", "--out-dir", d, "--kind", "suddend", "--seed", "11")
    assert rc == 0 and summary["cache_hit"] is False
    for token in ("time_value", "aggregated", "histogram", "fft"):
        enc = read_features(str(pipeline_dir / f"features_suddend_{token}_encoded.csv"))
        assert enc.X.shape == (40, 4)
        assert enc.encoded is True
        assert (pipeline_dir / f"autoencoder_suddend_{token}.json").exists()
        assert summary["stats"]["suddend"][token]["epochs_run"] >= 1
    rc, summary, _ = run(capsys, "encode", "--out-dir", d, "--kind", "suddend", "--seed", "11")
    assert rc == 0 and summary["cache_hit"] is True


def test_evaluate_stage_with_config_file(pipeline_dir, tmp_path_factory, capsys):
    d = str(pipeline_dir)
    cfg_path = tmp_path_factory.mktemp("cfg") / "eval.json"
    cfg_path.write_text(json.dumps(eval_config_doc()))
    rc, summary, _ = run(capsys, "evaluate", "--out-dir", d, "--config", str(cfg_path))
    assert rc == 0 and summary["cache_hit"] is False
    cfg = ExperimentConfig.from_dict(eval_config_doc())
    assert summary["stats"]["fits"] == count_planned_fits(cfg)
    for name in ("records.csv", "records.json", "manifest.json", "records_suddend.csv", "records_suddend.meta.json"):
        assert (pipeline_dir / name).exists()
    manifest = json.loads((pipeline_dir / "manifest.json").read_text())
    assert manifest["planned_fits"] == manifest["fits"] == count_planned_fits(cfg)
    assert set(manifest["scenarios"]) == {"suddend"}
    records = read_records(str(pipeline_dir / "records.csv"))
    assert len(records) == 7  # threshold + six learned families
    assert all(r.status == "ok" for r in records)
    rc, summary, _ = run(capsys, "evaluate", "--out-dir", d, "--config", str(cfg_path))
    assert rc == 0 and summary["cache_hit"] is True


def test_evaluate_reuses_scenario_checkpoints(pipeline_dir, tmp_path_factory, capsys):
    d = str(pipeline_dir)
    cfg_path = tmp_path_factory.mktemp("cfg2") / "eval.json"
    cfg_path.write_text(json.dumps(eval_config_doc()))
    # force a rebuild of the stage outputs, then prove the per-scenario
    # checkpoint (not a fresh grid run) fed them: plant a marker status
    (pipeline_dir / "records.csv").unlink()
    (pipeline_dir / "evaluate.manifest.json").unlink()
    ck = pipeline_dir / "records_suddend.csv"
    ck.write_text(ck.read_text().replace(",ok\n", ",ok-marked\n", 1))
    rc, summary, _ = run(capsys, "evaluate", "--out-dir", d, "--config", str(cfg_path))
    assert rc == 0 and summary["cache_hit"] is False
    assert ",ok-marked\n" in (pipeline_dir / "records.csv").read_text()
    # restore a clean records.csv for the report stage
    ck.write_text(ck.read_text().replace(",ok-marked\n", ",ok\n", 1))
    (pipeline_dir / "evaluate.manifest.json").unlink()
    rc, _, _ = run(capsys, "evaluate", "--out-dir", d, "--config", str(cfg_path))
    assert rc == 0


def test_report_stage(pipeline_dir, capsys):
    d = str(pipeline_dir)
    rc, summary, _ = run(capsys, "report", "--out-dir", d)
    assert rc == 0 and summary["cache_hit"] is False
    table = pipeline_dir / "table_suddend.csv"
    assert table.exists() and (pipeline_dir / "table_suddend.json").exists()
    lines = table.read_text().splitlines()
    assert len(lines) == 14  # header + 13 detector rows
    assert lines[1].startswith("Threshold,")
    rc, summary, _ = run(capsys, "report", "--out-dir", d)
    assert rc == 0 and summary["cache_hit"] is True


# -- failure modes ------------------------------------------------------------


def test_missing_artifact_exits_2(tmp_path, capsys):
    rc, _, error = run(capsys, "inject", "--out-dir", str(tmp_path))
    assert rc == 2
    assert error["type"] == "MissingArtifact" and error["exit_code"] == 2
    assert "dataset.csv" in error["message"]


def test_ingest_without_source_exits_3(tmp_path, capsys):
    rc, _, error = run(capsys, "ingest", "--out-dir", str(tmp_path))
    assert rc == 3 and error["type"] == "ConfigError"


def test_bad_config_file_exits_3(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tmp_path / "bad.json"

    cfg.write_text(json.dumps(eval_config_doc(warp_speed=True)))
    rc, _, error = run(capsys, "evaluate", "--out-dir", str(out), "--config", str(cfg))
    assert rc == 3 and "warp_speed" in error["message"]

    cfg.write_text(json.dumps(eval_config_doc(logreg_c=[0.5])))
    rc, _, error = run(capsys, "evaluate", "--out-dir", str(out), "--config", str(cfg))
    assert rc == 3 and "logreg_c" in error["message"]

    cfg.write_text("{not json")
    rc, _, error = run(capsys, "evaluate", "--out-dir", str(out), "--config", str(cfg))
    assert rc == 3 and error["type"] == "ConfigError"

    cfg.write_text(json.dumps(eval_config_doc()))
    rc, _, error = run(capsys, "evaluate", "--out-dir", str(out), "--config", str(cfg), "--profile", "fast")
    assert rc == 3 and "mutually exclusive" in error["message"]

    rc, _, error = run(capsys, "evaluate", "--out-dir", str(out), "--config", str(tmp_path / "nope.json"))
    assert rc == 2 and error["type"] == "MissingArtifact"


def test_live_lock_blocks_and_stale_lock_recovers(tmp_path, capsys):
    lock = tmp_path / ".lock"
    lock.write_text(str(os.getpid()))  # this process is alive, so the lock holds
    rc, _, error = run(capsys, "ingest", "--out-dir", str(tmp_path), "--synthetic", "--links", "12")
    assert rc == 1 and error["type"] == "LockHeld"
    lock.write_text("99999999")  # dead pid: stale lock is reclaimed
    rc, summary, _ = run(capsys, "ingest", "--out-dir", str(tmp_path), "--synthetic", "--links", "12")
    assert rc == 0 and summary["stats"]["kept_links"] == 12
    assert not lock.exists()


def test_upstream_change_invalidates_cache(tmp_path, capsys):
    d = str(tmp_path)
    run(capsys, "ingest", "--out-dir", d, "--synthetic", "--links", "15", "--seed", "1")
    rc, summary, _ = run(capsys, "inject", "--out-dir", d, "--kind", "instad", "--seed", "1")
    assert rc == 0 and summary["cache_hit"] is False
    rc, summary, _ = run(capsys, "ingest", "--out-dir", d, "--synthetic", "--links", "15", "--seed", "2")
    assert rc == 0 and summary["cache_hit"] is False  # new dataset bytes
    rc, summary, _ = run(capsys, "inject", "--out-dir", d, "--kind", "instad", "--seed", "1")
    assert rc == 0 and summary["cache_hit"] is False  # sha changed upstream
