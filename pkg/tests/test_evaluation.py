"""Benchmark harness tests.

Covers the split machinery, the config schema and its fit-count ledger, the
record fixed-point (write -> read -> write is byte-identical), grid-search
cells, and report assembly.  One small end-to-end scenario runs for real.
"""

import dataclasses
import json
import os

import numpy as np
import pytest

from linkscope.evaluation import (
    ANOMALY_ORDER,
    FAMILY_ORDER,
    GROUP_LABELS,
    ROW_LABELS,
    ConfigError,
    EvalRecord,
    ExperimentConfig,
    _BestTracker,
    _kernel_combos,
    anomaly_spec,
    build_scenarios,
    count_planned_fits,
    encoded_features,
    evaluate_cell,
    evaluate_threshold_cell,
    ids_checksum,
    labels_vector,
    metrics,
    read_records,
    render_report,
    report_tables,
    run_matrix,
    run_scenario,
    stratified_holdout,
    stratified_kfold,
    validate_config,
    write_records,
)
from linkscope.features import Representation, global_range, representation_matrix
from linkscope.traces import generate_synthetic

from conftest import labels01


def two_blob_problem(n=60, d=4, seed=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.zeros(n, dtype=np.int64)
    y[: n // 3] = 1
    X[y == 1] += 3.0
    return X, y


# -- metrics --------------------------------------------------------------------


def test_metrics_frozen_counts():
    pred = np.array([1, 1, 0, 0, 1, 0])
    actual = np.array([1, 0, 1, 0, 1, 0])
    m = metrics(pred, actual)
    assert (m["tp"], m["fp"], m["fn"], m["tn"]) == (2, 1, 1, 2)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == pytest.approx(2 / 3)
    assert m["f1"] == pytest.approx(2 / 3)


def test_metrics_known_f1_value():
    # precision 0.66, recall 1.0 -> f1 just above 0.795
    pred = np.concatenate([np.ones(100, dtype=int), np.zeros(34, dtype=int)])
    actual = np.concatenate([np.ones(66, dtype=int), np.zeros(68, dtype=int)])
    m = metrics(pred, actual)
    assert m["precision"] == pytest.approx(0.66)
    assert m["recall"] == 1.0
    assert m["f1"] == pytest.approx(2 * 0.66 / 1.66)


def test_metrics_degenerate_and_errors():
    m = metrics(np.zeros(5, dtype=int), np.zeros(5, dtype=int))
    assert m["precision"] == 0.0 and m["recall"] == 0.0 and m["f1"] == 0.0
    with pytest.raises(ValueError):
        metrics(np.zeros(3, dtype=int), np.zeros(4, dtype=int))


# -- splits ---------------------------------------------------------------------


def test_holdout_is_stratified_disjoint_and_deterministic():
    y = np.array([0] * 70 + [1] * 30)
    train, test = stratified_holdout(y, 0.2, 7, "split", "suddend")
    assert test.size == 20 and train.size == 80
    assert (y[test] == 1).sum() == 6  # round(0.2 * 30)
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(100))
    assert np.array_equal(train, np.sort(train))
    t2 = stratified_holdout(y, 0.2, 7, "split", "suddend")
    assert np.array_equal(train, t2[0]) and np.array_equal(test, t2[1])
    t3 = stratified_holdout(y, 0.2, 7, "split", "slowd")
    assert not np.array_equal(test, t3[1])
    with pytest.raises(ValueError):
        stratified_holdout(y, 0.0, 7)


def test_kfold_partitions_and_stratifies():
    y = np.array([0] * 50 + [1] * 25)
    folds = stratified_kfold(y, 5, 7, "cv")
    vals = [va for _, va in folds]
    assert np.array_equal(np.sort(np.concatenate(vals)), np.arange(75))
    for tr, va in folds:
        assert np.intersect1d(tr, va).size == 0
        assert tr.size + va.size == 75
        assert 4 <= (y[va] == 1).sum() <= 6
    again = stratified_kfold(y, 5, 7, "cv")
    for (a, b), (c, d) in zip(folds, again):
        assert np.array_equal(a, c) and np.array_equal(b, d)
    with pytest.raises(ValueError):
        stratified_kfold(y, 1, 7)


# -- config ---------------------------------------------------------------------


def test_profiles_and_roundtrip():
    fast = ExperimentConfig.for_profile("fast", seed=9)
    assert fast.folds == 3 and fast.seed == 9
    full = ExperimentConfig.for_profile("full")
    assert full.folds == 5
    assert len(full.scalers) == 6
    assert full.logreg_c == (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
    for cfg in (fast, full):
        clone = ExperimentConfig.from_dict(cfg.to_dict())
        assert clone == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.for_profile("turbo")


def test_config_rejects_unknown_keys_and_off_grid_values():
    base = ExperimentConfig.for_profile("fast").to_dict()
    doc = dict(base, warp_speed=True)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc = dict(base, logreg_c=[0.5])  # not a table value
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc = dict(base, logreg_c=[0.5], extended=True)  # escape hatch
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.logreg_c == (0.5,)
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ExperimentConfig(), folds=1))
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ExperimentConfig(), representations=("wavelet",)))
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ExperimentConfig(), anomalies=("meteor",)))


def test_kernel_combos_expand_gamma_only_for_rbf():
    combos = _kernel_combos(("linear", "rbf"), ("scale", "auto"))
    assert combos == [("linear", "-"), ("rbf", "scale"), ("rbf", "auto")]


def test_planned_fit_counts():
    fast = ExperimentConfig.for_profile("fast")
    # per cell: logreg 6, svm 8, forest 1, lof 4, iforest 2, ocsvm 8 = 29
    # 32 cells x (29 * 3 folds + 6 refits) + 16 encoders
    assert count_planned_fits(fast) == 32 * 93 + 16 == 2992
    full = ExperimentConfig.for_profile("full")
    assert count_planned_fits(full) == 32 * (338 * 5 + 6) + 16 == 54288
    assert count_planned_fits(full) > 40_000
    manual = dataclasses.replace(fast, include_encoded=False)
    assert count_planned_fits(manual) == 16 * 93


# -- records ----------------------------------------------------------------------


def make_record(**overrides):
    base = dict(
        anomaly="suddend",
        representation="aggregated",
        encoded=False,
        family="svm",
        scaler="std_full",
        hyperparams={"C": 1.0, "kernel": "rbf", "gamma": "scale"},
        cv_f1=0.75,
        tp=10,
        fp=2,
        fn=3,
        tn=85,
        precision=10 / 12,
        recall=10 / 13,
        f1=2 * (10 / 12) * (10 / 13) / (10 / 12 + 10 / 13),
        status="ok",
    )
    base.update(overrides)
    return EvalRecord(**base)


def test_records_roundtrip_and_byte_determinism(tmp_path):
    records = [
        make_record(anomaly="slowd", family="lof", cv_f1=None, encoded=True),
        make_record(),
        make_record(representation="time_value", family="threshold"),
    ]
    csv_path = tmp_path / "records.csv"
    json_path = tmp_path / "records.json"
    write_records(records, str(csv_path), str(json_path))
    back = read_records(str(csv_path))
    # written order is the canonical sort, independent of input order
    keys = [(r.anomaly, r.representation, r.encoded, r.family) for r in back]
    assert keys == sorted(keys, key=lambda k: (
        ANOMALY_ORDER.index(k[0]),
        ("time_value", "aggregated", "histogram", "fft").index(k[1]),
        k[2],
        FAMILY_ORDER.index(k[3]),
    ))
    by_key = {(r.anomaly, r.representation, r.encoded, r.family): r for r in back}
    orig = make_record()
    got = by_key[("suddend", "aggregated", False, "svm")]
    assert got == orig
    assert by_key[("slowd", "aggregated", True, "lof")].cv_f1 is None
    first = csv_path.read_bytes()
    write_records(back, str(csv_path), str(json_path))
    assert csv_path.read_bytes() == first
    doc = json.loads(json_path.read_text())
    assert len(doc) == 3 and doc[0]["anomaly"] == "suddend"


def test_best_tracker_keeps_earlier_candidate_on_ties():
    t = _BestTracker()
    t.offer({"name": "a"}, 0.5)
    t.offer({"name": "b"}, 0.5)  # exact tie: earlier stays
    t.offer({"name": "c"}, 0.5 + 1e-13)  # within margin: earlier stays
    assert t.best_desc == {"name": "a"}
    t.offer({"name": "d"}, 0.6)
    assert t.best_desc == {"name": "d"}
    assert t.best_cv == 0.6
    assert len(t.candidates) == 4


# -- cells ------------------------------------------------------------------------


def test_evaluate_cell_logreg_grid_accounting():
    X, y = two_blob_problem()
    train_idx, test_idx = stratified_holdout(y, 0.2, 7, "split")
    cfg = ExperimentConfig.for_profile("fast")
    scaler, hp, tracker, pred, y_eval, fits = evaluate_cell(
        X, y, train_idx, test_idx, "logreg", cfg, seed_keys=("t", "r", False)
    )
    assert scaler in cfg.scalers
    assert hp["C"] in cfg.logreg_c
    assert len(tracker.candidates) == len(cfg.scalers) * len(cfg.logreg_c)
    assert fits == len(tracker.candidates) * cfg.folds + 1
    assert tracker.best_cv >= max(cv for _, cv in tracker.candidates) - 1e-12
    assert pred.shape == y_eval.shape == (test_idx.size,)
    assert metrics(pred, y_eval)["f1"] > 0.9  # blobs are easy


def test_threshold_cell_routes():
    n = 6
    import scipy.stats

    gaussian = -60.0 + scipy.stats.norm.ppf((np.arange(1, 301) - 0.5) / 300)
    samples = np.tile(gaussian, (n, 1))  # textbook-normal rows pass the gate
    samples[0] = -60.0
    samples[0, 150:] = -95.0  # step: fails normality, fills the low bin
    agg = np.zeros((n, 7))
    agg[1, 0], agg[1, 4] = -60.0, -64.0  # |mean - median| = 4 > 3
    agg[2, 1] = 1.3  # 2 * std = 2.6 > 2.5
    test_idx = np.arange(n)
    y = np.zeros(n, dtype=np.int64)
    tv = evaluate_threshold_cell(samples, agg, "time_value", y, test_idx)
    assert tv[0] == 1 and tv[1:].sum() == 0
    ag = evaluate_threshold_cell(samples, agg, "aggregated", y, test_idx)
    assert ag.tolist() == [0, 1, 1, 0, 0, 0]
    hist = evaluate_threshold_cell(samples, agg, "histogram", y, test_idx)
    assert hist[0] == 1 and hist[1:].sum() == 0
    with pytest.raises(ValueError):
        evaluate_threshold_cell(samples, agg, "fft", y, test_idx)


def test_encoded_features_use_training_rows_only():
    X, y = two_blob_problem(n=70, d=7)
    train_idx, test_idx = stratified_holdout(y, 0.2, 7, "split")
    cfg = ExperimentConfig.for_profile("fast", ae_epochs=3, ae_batch=16)
    codes, diag = encoded_features(X, y, train_idx, cfg, "suddend", "aggregated")
    assert codes.shape == (70, 4)
    fit_rows = diag["fit_rows"]
    assert np.isin(fit_rows, train_idx).all()
    assert not np.isin(fit_rows, test_idx).any()
    assert fit_rows.size == pytest.approx(0.6 * train_idx.size, abs=1)
    again, _ = encoded_features(X, y, train_idx, cfg, "suddend", "aggregated")
    assert codes.tobytes() == again.tobytes()
    other, _ = encoded_features(X, y, train_idx, cfg, "suddend", "histogram")
    assert codes.tobytes() != other.tobytes()


# -- scenarios ---------------------------------------------------------------------


def scenario_config(**overrides):
    base = dict(
        n_links=80,
        folds=2,
        ae_epochs=3,
        ae_batch=16,
        lof_k=(5, 10),
        representations=("aggregated",),
    )
    base.update(overrides)
    return ExperimentConfig.for_profile("fast", seed=11, **base)


def test_run_scenario_small_end_to_end(injected_small):
    rows = injected_small["suddend"]
    cfg = scenario_config(include_encoded=False)
    records, sdiag, fits = run_scenario(cfg, rows, "suddend")
    # aggregated only: threshold + 6 learned families
    assert [r.family for r in records] == list(FAMILY_ORDER)
    assert all(r.status == "ok" for r in records)
    assert all(r.representation == "aggregated" for r in records)
    assert fits > 0
    assert sdiag["train_checksum"] == ids_checksum(sdiag["train_ids"])
    assert len(sdiag["train_ids"]) == 64 and len(sdiag["test_ids"]) == 16
    assert set(sdiag["train_ids"]).isdisjoint(sdiag["test_ids"])
    best = {r.family: r.f1 for r in records}
    assert best["logreg"] > 0.8  # sudden drops are easy on aggregates


def test_run_scenario_thread_pool_does_not_change_records(injected_small, monkeypatch):
    rows = injected_small["instad"]
    cfg = scenario_config(include_encoded=False)
    records_serial, _, fits_serial = run_scenario(cfg, rows, "instad")
    monkeypatch.setenv("LINKSCOPE_THREADS", "4")
    records_pool, _, fits_pool = run_scenario(cfg, rows, "instad")
    assert [r.to_dict() for r in records_pool] == [r.to_dict() for r in records_serial]
    assert fits_pool == fits_serial


def test_run_matrix_tiny_grid(tmp_path):
    cfg = scenario_config(
        anomalies=("suddend", "slowd"),
        representations=("aggregated", "histogram"),
    )
    dataset = generate_synthetic(cfg.n_links, cfg.seed)
    records, diag = run_matrix(cfg, dataset=dataset)
    # per scenario: 2 thresholds + 2 reprs x 2 enc x 6 families = 26
    assert len(records) == 52
    assert all(r.status == "ok" for r in records)
    keys = [r.sort_key() for r in records]
    assert keys == sorted(keys)
    assert diag["fits"] == count_planned_fits(cfg)  # no silent skips at this size
    assert set(diag["scenarios"]) == {"suddend", "slowd"}
    for kind in ("suddend", "slowd"):
        ae = diag["scenarios"][kind]["ae"]
        assert set(ae) == {"aggregated", "histogram"}
        for entry in ae.values():
            assert entry["epochs_run"] >= 1

    tables = report_tables(records)
    assert set(tables) == {"suddend", "slowd"}
    rows = tables["suddend"]
    assert [row["detector"] for row in rows] == [label for _, _, label in ROW_LABELS]
    for row in rows:
        assert row["time_value"] is None and row["frequency"] is None
        if row["detector"] == "Threshold":
            assert row["histogram"] is not None
        else:
            assert row["aggregated"] is not None

    paths = render_report(records, str(tmp_path))
    assert sorted(os.path.basename(p) for p in paths) == [
        "table_slowd.csv",
        "table_slowd.json",
        "table_suddend.csv",
        "table_suddend.json",
    ]
    lines = (tmp_path / "table_suddend.csv").read_text().splitlines()
    assert len(lines) == 1 + len(ROW_LABELS)
    header = lines[0].split(",")
    assert header[0] == "detector"
    assert header[1:4] == ["time_value_precision", "time_value_recall", "time_value_f1"]
    before = (tmp_path / "table_suddend.csv").read_bytes()
    render_report(records, str(tmp_path))
    assert (tmp_path / "table_suddend.csv").read_bytes() == before


# -- report shaping ------------------------------------------------------------------


def test_report_tables_round_to_two_decimals():
    rec = make_record(precision=1.0, recall=0.5, f1=2 / 3)
    tables = report_tables([rec])
    cell = tables["suddend"][5]["aggregated"]  # SVM row
    assert tables["suddend"][5]["detector"] == "SVM"
    assert cell == {"precision": 1.0, "recall": 0.5, "f1": 0.67}
    failed = make_record(status="failed: ValueError: boom")
    assert report_tables([failed])["suddend"][5]["aggregated"] is None


def test_group_labels_map_fft_to_frequency():
    assert GROUP_LABELS[-1] == ("fft", "frequency")


# -- scenario assembly helpers ---------------------------------------------------------


def test_labels_and_checksums(injected_small):
    rows = injected_small["slowd"]
    y = labels_vector(rows)
    assert np.array_equal(y, labels01(rows))
    assert y.sum() == 26  # floor(0.33 * 80)
    ids = [r.trace.link_id for r in rows]
    assert ids_checksum(ids) == ids_checksum(list(reversed(ids)))
    assert ids_checksum(ids) != ids_checksum(ids[:-1])


def test_build_scenarios_covers_configured_kinds(small_dataset):
    cfg = scenario_config(anomalies=("suddenr", "instad"))
    scen = build_scenarios(small_dataset, cfg)
    assert set(scen) == {"suddenr", "instad"}
    spec = anomaly_spec(cfg, "suddenr")
    assert spec.seed == cfg.seed
    assert spec.slope_range == (cfg.slope_min, cfg.slope_max)
