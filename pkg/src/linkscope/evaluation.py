"""Benchmark harness: scenario assembly, grid search, scoring, reports.

For every (anomaly kind x representation x encoded flag) cell and every
detector family the harness grid-searches scalers and hyperparameters with
stratified k-fold validation inside the training split, refits the winner on
the whole training split, and scores the untouched test split.  Nothing that
is fit (scalers, autoencoders, detectors) ever sees a test row.

Tree ensembles are invariant under the per-feature affine scalers offered
here, so forest and isolation-forest grids run with the identity scaler only;
the other families sweep the configured scaler list.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import supervised, unsupervised
from .autoencoder import AutoencoderConfig, encode, train_autoencoder
from .features import (
    Representation,
    Scaler,
    ScalerKind,
    global_range,
    representation_matrix,
)
from .inject import AnomalyKind, AnomalySpec, Label, inject
from .supervised import ConvergenceError, kernel_matrix, resolve_gamma
from .threshold import ThresholdConfig, normality_pvalues
from .traces import Dataset, derive_rng, generate_synthetic, stable_seed

ANOMALY_ORDER = ("suddend", "suddenr", "instad", "slowd")
REPR_ORDER = ("time_value", "aggregated", "histogram", "fft")
FAMILY_ORDER = ("threshold", "logreg", "forest", "svm", "lof", "iforest", "ocsvm")
THRESHOLD_REPRS = ("time_value", "aggregated", "histogram")

# hyperparameter values allowed without the extended flag
TABLE_C = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
TABLE_FOREST_N = (10, 20, 30, 40, 50, 70, 100)
TABLE_KERNELS = ("linear", "rbf")
TABLE_GAMMAS = ("auto", "scale")
TABLE_LOF_K = (5, 10, 20, 40, 50, 80)
TABLE_LOF_P = (1, 2)
TABLE_IFOREST_N = (10, 20, 30, 40, 50, 70, 100)
TABLE_OCSVM_NU = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
ALL_SCALERS = tuple(k.token for k in ScalerKind)


class ConfigError(ValueError):
    """Configuration violates the declared schema or allowed grids."""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    profile: str = "fast"
    n_links: int = 2123
    anomalies: tuple = ANOMALY_ORDER
    representations: tuple = REPR_ORDER
    include_encoded: bool = True
    train_fraction: float = 0.8
    folds: int = 3
    ae_train_fraction: float = 0.6
    affected_fraction: float = 0.33
    floor_dbm: float = -95.0
    spike_prob: float = 0.01
    slope_min: float = 0.5
    slope_max: float = 1.5
    drop_dc: bool = False
    scalers: tuple = ("none", "std_full")
    logreg_c: tuple = (0.01, 1.0, 100.0)
    forest_estimators: tuple = (30,)
    svm_c: tuple = (1.0, 100.0)
    svm_kernels: tuple = TABLE_KERNELS
    svm_gammas: tuple = ("scale",)
    lof_k: tuple = (10, 40)
    lof_p: tuple = (2,)
    iforest_estimators: tuple = (30, 100)
    ocsvm_nu: tuple = (0.3, 0.5)
    ocsvm_kernels: tuple = TABLE_KERNELS
    ocsvm_gammas: tuple = ("scale",)
    ae_epochs: int = 80
    ae_batch: int = 64
    ae_patience: int = 10
    extended: bool = False

    @classmethod
    def for_profile(cls, profile: str, seed: int = 7, **overrides) -> "ExperimentConfig":
        if profile == "fast":
            cfg = cls(seed=seed, profile="fast")
        elif profile == "full":
            cfg = cls(
                seed=seed,
                profile="full",
                folds=5,
                scalers=ALL_SCALERS,
                logreg_c=TABLE_C,
                forest_estimators=TABLE_FOREST_N,
                svm_c=TABLE_C,
                svm_kernels=TABLE_KERNELS,
                svm_gammas=TABLE_GAMMAS,
                lof_k=TABLE_LOF_K,
                lof_p=TABLE_LOF_P,
                iforest_estimators=TABLE_IFOREST_N,
                ocsvm_nu=TABLE_OCSVM_NU,
                ocsvm_kernels=TABLE_KERNELS,
                ocsvm_gammas=TABLE_GAMMAS,
                ae_epochs=200,
                ae_patience=20,
            )
        else:
            raise ConfigError(f"unknown profile {profile!r}")
        if overrides:
            cfg = replace(cfg, **overrides)
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = doc.get("profile", "fast")
        if base not in ("fast", "full"):
            raise ConfigError(f"unknown profile {base!r}")
        kwargs = {}
        for name, value in doc.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value
        try:
            cfg = cls.for_profile(base, seed=int(doc.get("seed", 7)))
            cfg = replace(cfg, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        validate_config(cfg)
        return cfg


def _check_subset(name, values, allowed, extended):
    if extended:
        return
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigError(f"{name} values {bad} are outside the allowed grid {list(allowed)}")


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.profile not in ("fast", "full"):
        raise ConfigError(f"unknown profile {cfg.profile!r}")
    if not (0.0 < cfg.train_fraction < 1.0):
        raise ConfigError("train_fraction must be in (0, 1)")
    if not (0.0 < cfg.ae_train_fraction < 1.0):
        raise ConfigError("ae_train_fraction must be in (0, 1)")
    if cfg.folds < 2:
        raise ConfigError("folds must be >= 2")
    if cfg.n_links < 10:
        raise ConfigError("n_links must be >= 10")
    try:
        for a in cfg.anomalies:
            AnomalyKind.from_token(a)
        for s in cfg.scalers:
            ScalerKind.from_token(s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for r in cfg.representations:
        if r not in REPR_ORDER:
            raise ConfigError(f"unknown representation {r!r}")
    _check_subset("logreg_c", cfg.logreg_c, TABLE_C, cfg.extended)
    _check_subset("forest_estimators", cfg.forest_estimators, TABLE_FOREST_N, cfg.extended)
    _check_subset("svm_c", cfg.svm_c, TABLE_C, cfg.extended)
    _check_subset("svm_kernels", cfg.svm_kernels, TABLE_KERNELS, cfg.extended)
    _check_subset("svm_gammas", cfg.svm_gammas, TABLE_GAMMAS, cfg.extended)
    _check_subset("lof_k", cfg.lof_k, TABLE_LOF_K, cfg.extended)
    _check_subset("lof_p", cfg.lof_p, TABLE_LOF_P, cfg.extended)
    _check_subset("iforest_estimators", cfg.iforest_estimators, TABLE_IFOREST_N, cfg.extended)
    _check_subset("ocsvm_nu", cfg.ocsvm_nu, TABLE_OCSVM_NU, cfg.extended)
    _check_subset("ocsvm_kernels", cfg.ocsvm_kernels, TABLE_KERNELS, cfg.extended)
    _check_subset("ocsvm_gammas", cfg.ocsvm_gammas, TABLE_GAMMAS, cfg.extended)


def _kernel_combos(kernels, gammas):
    combos = []
    for k in kernels:
        if k == "linear":
            combos.append((k, "-"))
        else:
            combos.extend((k, g) for g in gammas)
    return combos


def count_planned_fits(cfg: ExperimentConfig) -> int:
    """Number of models the grid will fit (CV candidates + refits + encoders)."""
    per_cell = {
        "logreg": len(cfg.logreg_c) * len(cfg.scalers),
        "svm": len(cfg.svm_c) * len(_kernel_combos(cfg.svm_kernels, cfg.svm_gammas)) * len(cfg.scalers),
        "forest": len(cfg.forest_estimators),
        "lof": len(cfg.lof_k) * len(cfg.lof_p) * len(cfg.scalers),
        "iforest": len(cfg.iforest_estimators),
        "ocsvm": len(cfg.ocsvm_nu) * len(_kernel_combos(cfg.ocsvm_kernels, cfg.ocsvm_gammas)) * len(cfg.scalers),
    }
    cells = len(cfg.anomalies) * len(cfg.representations) * (2 if cfg.include_encoded else 1)
    total = sum(cells * (n * cfg.folds + 1) for n in per_cell.values())
    if cfg.include_encoded:
        total += len(cfg.anomalies) * len(cfg.representations)
    return total


# -- splits -------------------------------------------------------------------


def stratified_holdout(y, test_fraction: float, seed: int, *keys):
    """Per-class shuffled holdout; class shares in each part stay within one
    row of the global ratio.  Returns sorted (train_idx, test_idx)."""
    y = np.asarray(y)
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must be in (0, 1)")
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng = derive_rng(seed, "holdout", *keys, int(c))
        perm = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_kfold(y, k: int, seed: int, *keys):
    """Deterministic stratified folds; returns [(train_idx, val_idx)] * k."""
    y = np.asarray(y)
    if k < 2:
        raise ValueError("need k >= 2 folds")
    chunks = [[] for _ in range(k)]
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng = derive_rng(seed, "fold", *keys, int(c))
        perm = idx[rng.permutation(idx.size)]
        for i, part in enumerate(np.array_split(perm, k)):
            chunks[i].append(part)
    folds = []
    everything = np.arange(y.size)
    for i in range(k):
        val = np.sort(np.concatenate(chunks[i]))
        train = np.setdiff1d(everything, val, assume_unique=False)
        folds.append((train, val))
    return folds


# -- metrics ------------------------------------------------------------------


def metrics(pred, actual) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    tp = int(np.sum((pred == 1) & (actual == 1)))
    fp = int(np.sum((pred == 1) & (actual == 0)))
    fn = int(np.sum((pred == 0) & (actual == 1)))
    tn = int(np.sum((pred == 0) & (actual == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn, "precision": precision, "recall": recall, "f1": f1}


def _f1(pred, actual) -> float:
    return metrics(pred, actual)["f1"]


# -- records ------------------------------------------------------------------


@dataclass
class EvalRecord:
    anomaly: str
    representation: str
    encoded: bool
    family: str
    scaler: str
    hyperparams: dict
    cv_f1: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    status: str = "ok"

    def sort_key(self):
        return (
            ANOMALY_ORDER.index(self.anomaly),
            REPR_ORDER.index(self.representation),
            self.encoded,
            FAMILY_ORDER.index(self.family),
        )

    def to_dict(self) -> dict:
        return {
            "anomaly": self.anomaly,
            "representation": self.representation,
            "encoded": self.encoded,
            "family": self.family,
            "scaler": self.scaler,
            "hyperparams": self.hyperparams,
            "cv_f1": self.cv_f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "status": self.status,
        }


RECORD_COLUMNS = [
    "anomaly", "representation", "encoded", "family", "scaler", "hyperparams",
    "cv_f1", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "status",
]


def write_records(records, csv_path: str, json_path: Optional[str] = None) -> None:
    records = sorted(records, key=lambda r: r.sort_key())
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.anomaly,
                    r.representation,
                    "true" if r.encoded else "false",
                    r.family,
                    r.scaler,
                    json.dumps(r.hyperparams, sort_keys=True),
                    "" if r.cv_f1 is None else repr(float(r.cv_f1)),
                    r.tp,
                    r.fp,
                    r.fn,
                    r.tn,
                    repr(float(r.precision)),
                    repr(float(r.recall)),
                    repr(float(r.f1)),
                    r.status,
                ]
            )
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in records], fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_records(csv_path: str):
    records = []
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                EvalRecord(
                    anomaly=row["anomaly"],
                    representation=row["representation"],
                    encoded=row["encoded"] == "true",
                    family=row["family"],
                    scaler=row["scaler"],
                    hyperparams=json.loads(row["hyperparams"]),
                    cv_f1=None if row["cv_f1"] == "" else float(row["cv_f1"]),
                    tp=int(row["tp"]),
                    fp=int(row["fp"]),
                    fn=int(row["fn"]),
                    tn=int(row["tn"]),
                    precision=float(row["precision"]),
                    recall=float(row["recall"]),
                    f1=float(row["f1"]),
                    status=row["status"],
                )
            )
    return records


# -- scenario assembly ----------------------------------------------------------


def anomaly_spec(cfg: ExperimentConfig, kind_token: str) -> AnomalySpec:
    return AnomalySpec(
        kind=AnomalyKind.from_token(kind_token),
        seed=cfg.seed,
        affected_fraction=cfg.affected_fraction,
        floor_dbm=cfg.floor_dbm,
        spike_prob=cfg.spike_prob,
        slope_range=(cfg.slope_min, cfg.slope_max),
    )


def build_scenarios(dataset: Dataset, cfg: ExperimentConfig) -> dict:
    return {kind: inject(dataset, anomaly_spec(cfg, kind)) for kind in cfg.anomalies}


def labels_vector(rows) -> np.ndarray:
    return np.asarray([1 if r.label is Label.ANOMALOUS else 0 for r in rows], dtype=np.int64)


def ids_checksum(link_ids) -> str:
    joined = ",".join(sorted(link_ids))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def encoded_features(X, y, train_idx, cfg: ExperimentConfig, kind: str, repr_token: str, ae_seed=None):
    """Train the 4-dim encoder on a 60% stratified sub-split of the training
    rows and encode everything.

    Inputs are standardized with statistics of the encoder-training rows
    (the optimizer budget cannot move biases to raw dB levels otherwise);
    that map is part of the encoded representation and is fit-rows-only.
    Returns (codes, diagnostics).
    """
    X = np.asarray(X, dtype=np.float64)
    sub_train, _sub_rest = stratified_holdout(
        y[train_idx], 1.0 - cfg.ae_train_fraction, cfg.seed, "ae-split", kind, repr_token
    )
    fit_rows = train_idx[sub_train]
    mu = X[fit_rows].mean(axis=0)
    sd = X[fit_rows].std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    Xn = (X - mu) / sd
    if ae_seed is None:
        ae_seed = stable_seed(cfg.seed, "ae", kind, repr_token)
    ae_cfg = AutoencoderConfig(
        input_dim=X.shape[1],
        seed=ae_seed,
        epochs=cfg.ae_epochs,
        batch_size=min(cfg.ae_batch, fit_rows.size),
        patience=cfg.ae_patience,
    )
    model = train_autoencoder(Xn[fit_rows], ae_cfg)
    codes = encode(model, Xn)
    diag = {
        "fit_rows": fit_rows,
        "final_loss": model.loss_history[model.best_epoch],
        "epochs_run": len(model.loss_history),
        "model": model,
    }
    return codes, diag


# -- per-cell evaluation ---------------------------------------------------------


class _CellContext:
    """Shared per-cell state: the split, the folds, and scaled-matrix cache.

    fold index -1 means (full training split -> test split); 0..k-1 are the
    cross-validation folds, each (fold-train -> fold-validation).
    """

    def __init__(self, X, y, train_idx, test_idx, folds):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.train_idx = train_idx
        self.test_idx = test_idx
        self.folds = folds  # absolute index pairs
        self._scaled = {}

    def pair(self, fold_i):
        if fold_i == -1:
            return self.train_idx, self.test_idx
        return self.folds[fold_i]

    def scaled(self, scaler_token: str, fold_i: int):
        key = (scaler_token, fold_i)
        if key not in self._scaled:
            fit_rows, eval_rows = self.pair(fold_i)
            scaler = Scaler(ScalerKind.from_token(scaler_token)).fit(self.X[fit_rows])
            self._scaled[key] = (scaler.transform(self.X[fit_rows]), scaler.transform(self.X[eval_rows]))
        return self._scaled[key]

    def labels(self, fold_i):
        fit_rows, eval_rows = self.pair(fold_i)
        return self.y[fit_rows], self.y[eval_rows]


class _BestTracker:
    def __init__(self):
        self.best_desc = None
        self.best_cv = -np.inf
        self.candidates = []

    def offer(self, desc: dict, cv: float):
        self.candidates.append((desc, cv))
        if cv > self.best_cv + 1e-12:
            self.best_cv = cv
            self.best_desc = desc


def _fold_indices(ctx):
    return range(len(ctx.folds))


def _eval_logreg(ctx, cfg, seed_keys):
    tracker = _BestTracker()
    fits = 0
    for scaler in cfg.scalers:
        for C in cfg.logreg_c:
            scores = []
            for i in _fold_indices(ctx):
                Xa, Xb = ctx.scaled(scaler, i)
                ya, yb = ctx.labels(i)
                model = supervised.train_logreg(Xa, ya, C=C)
                fits += 1
                scores.append(_f1(supervised.predict_logreg(model, Xb), yb))
            tracker.offer({"scaler": scaler, "C": C}, float(np.mean(scores)))
    best = tracker.best_desc
    Xa, Xb = ctx.scaled(best["scaler"], -1)
    ya, yb = ctx.labels(-1)
    model = supervised.train_logreg(Xa, ya, C=best["C"])
    fits += 1
    pred = supervised.predict_logreg(model, Xb)
    return best["scaler"], {"C": best["C"]}, tracker, pred, yb, fits


def _svm_fit_predict(Xa, ya, Xb, C, kernel, gmode, Kaa=None, Kba=None):
    gamma = "auto" if gmode == "-" else gmode
    converged = True
    try:
        model = supervised.train_svm(Xa, ya, C=C, kernel=kernel, gamma=gamma, gram=Kaa)
    except ConvergenceError as exc:
        model = exc.model
        converged = False
    if Kba is None:
        dec = supervised.svm_decision(model, Xb)
    else:
        dec = Kba @ (model.alpha * model.signs) + model.b
    return (dec > 0).astype(np.int64), converged


def _eval_svm(ctx, cfg, seed_keys):
    tracker = _BestTracker()
    fits = 0
    combos = _kernel_combos(cfg.svm_kernels, cfg.svm_gammas)
    for scaler in cfg.scalers:
        for kernel, gmode in combos:
            grams = {}
            for i in _fold_indices(ctx):
                Xa, Xb = ctx.scaled(scaler, i)
                gamma = resolve_gamma("auto" if gmode == "-" else gmode, Xa)
                grams[i] = (kernel_matrix(Xa, Xa, kernel, gamma), kernel_matrix(Xb, Xa, kernel, gamma))
            for C in cfg.svm_c:
                scores = []
                all_converged = True
                for i in _fold_indices(ctx):
                    Xa, Xb = ctx.scaled(scaler, i)
                    ya, yb = ctx.labels(i)
                    Kaa, Kba = grams[i]
                    pred, conv = _svm_fit_predict(Xa, ya, Xb, C, kernel, gmode, Kaa, Kba)
                    fits += 1
                    all_converged &= conv
                    scores.append(_f1(pred, yb))
                tracker.offer(
                    {"scaler": scaler, "C": C, "kernel": kernel, "gamma": gmode, "converged": all_converged},
                    float(np.mean(scores)),
                )
    best = tracker.best_desc
    Xa, Xb = ctx.scaled(best["scaler"], -1)
    ya, yb = ctx.labels(-1)
    pred, conv = _svm_fit_predict(Xa, ya, Xb, best["C"], best["kernel"], best["gamma"])
    fits += 1
    hp = {"C": best["C"], "kernel": best["kernel"], "gamma": best["gamma"]}
    if not (conv and best["converged"]):
        hp["converged"] = False
    return best["scaler"], hp, tracker, pred, yb, fits


def _eval_forest(ctx, cfg, seed_keys):
    # CART splits are invariant under positive per-feature affine maps, so
    # the scaler axis would only produce ties; run the identity scaler.
    tracker = _BestTracker()
    fits = 0
    for n_est in cfg.forest_estimators:
        scores = []
        for i in _fold_indices(ctx):
            fit_rows, eval_rows = ctx.pair(i)
            model = supervised.train_forest(
                ctx.X[fit_rows], ctx.y[fit_rows], n_estimators=n_est,
                seed=stable_seed(cfg.seed, "forest", *seed_keys, i, n_est),
            )
            fits += 1
            scores.append(_f1(supervised.predict_forest(model, ctx.X[eval_rows]), ctx.y[eval_rows]))
        tracker.offer({"scaler": "none", "n_estimators": n_est}, float(np.mean(scores)))
    best = tracker.best_desc
    fit_rows, eval_rows = ctx.pair(-1)
    model = supervised.train_forest(
        ctx.X[fit_rows], ctx.y[fit_rows], n_estimators=best["n_estimators"],
        seed=stable_seed(cfg.seed, "forest", *seed_keys, "refit", best["n_estimators"]),
    )
    fits += 1
    pred = supervised.predict_forest(model, ctx.X[eval_rows])
    return "none", {"n_estimators": best["n_estimators"]}, tracker, pred, ctx.y[eval_rows], fits


def _eval_lof(ctx, cfg, seed_keys):
    tracker = _BestTracker()
    fits = 0
    for scaler in cfg.scalers:
        for p in cfg.lof_p:
            dists = {}
            for i in _fold_indices(ctx):
                Xa, Xb = ctx.scaled(scaler, i)
                dists[i] = (unsupervised.minkowski_dists(Xa, Xa, p), unsupervised.minkowski_dists(Xb, Xa, p))
            for k in cfg.lof_k:
                scores = []
                usable = True
                for i in _fold_indices(ctx):
                    Xa, Xb = ctx.scaled(scaler, i)
                    _ya, yb = ctx.labels(i)
                    if k >= Xa.shape[0]:
                        usable = False
                        break
                    Daa, Dba = dists[i]
                    model = unsupervised.fit_lof(Xa, k=k, p=p, dists=Daa)
                    fits += 1
                    pred = (unsupervised.lof_scores(model, Xb, dists=Dba) > model.offset).astype(np.int64)
                    scores.append(_f1(pred, yb))
                if usable:
                    tracker.offer({"scaler": scaler, "k": k, "p": p}, float(np.mean(scores)))
    best = tracker.best_desc
    Xa, Xb = ctx.scaled(best["scaler"], -1)
    _ya, yb = ctx.labels(-1)
    model = unsupervised.fit_lof(Xa, k=best["k"], p=best["p"])
    fits += 1
    pred = unsupervised.predict_lof(model, Xb)
    return best["scaler"], {"k": best["k"], "p": best["p"]}, tracker, pred, yb, fits


def _eval_iforest(ctx, cfg, seed_keys):
    # random splits scale with the features, so the scaler axis is redundant
    tracker = _BestTracker()
    fits = 0
    for n_est in cfg.iforest_estimators:
        scores = []
        for i in _fold_indices(ctx):
            fit_rows, eval_rows = ctx.pair(i)
            model = unsupervised.fit_iforest(
                ctx.X[fit_rows], n_estimators=n_est,
                seed=stable_seed(cfg.seed, "iforest", *seed_keys, i, n_est),
            )
            fits += 1
            scores.append(_f1(unsupervised.predict_iforest(model, ctx.X[eval_rows]), ctx.y[eval_rows]))
        tracker.offer({"scaler": "none", "n_estimators": n_est}, float(np.mean(scores)))
    best = tracker.best_desc
    fit_rows, eval_rows = ctx.pair(-1)
    model = unsupervised.fit_iforest(
        ctx.X[fit_rows], n_estimators=best["n_estimators"],
        seed=stable_seed(cfg.seed, "iforest", *seed_keys, "refit", best["n_estimators"]),
    )
    fits += 1
    pred = unsupervised.predict_iforest(model, ctx.X[eval_rows])
    return "none", {"n_estimators": best["n_estimators"]}, tracker, pred, ctx.y[eval_rows], fits


def _ocsvm_fit_predict(Xa, nu, kernel, gmode, Kaa=None, Kba=None, Xb=None):
    gamma = "auto" if gmode == "-" else gmode
    converged = True
    try:
        model = unsupervised.train_ocsvm(Xa, nu=nu, kernel=kernel, gamma=gamma, gram=Kaa)
    except ConvergenceError as exc:
        model = exc.model
        converged = False
    if Kba is None:
        dec = unsupervised.ocsvm_decision(model, Xb)
    else:
        dec = Kba @ model.alpha - model.rho
    return (dec < 0).astype(np.int64), converged


def _eval_ocsvm(ctx, cfg, seed_keys):
    tracker = _BestTracker()
    fits = 0
    combos = _kernel_combos(cfg.ocsvm_kernels, cfg.ocsvm_gammas)
    for scaler in cfg.scalers:
        for kernel, gmode in combos:
            grams = {}
            for i in _fold_indices(ctx):
                Xa, Xb = ctx.scaled(scaler, i)
                gamma = resolve_gamma("auto" if gmode == "-" else gmode, Xa)
                grams[i] = (kernel_matrix(Xa, Xa, kernel, gamma), kernel_matrix(Xb, Xa, kernel, gamma))
            for nu in cfg.ocsvm_nu:
                scores = []
                all_converged = True
                for i in _fold_indices(ctx):
                    Xa, Xb = ctx.scaled(scaler, i)
                    _ya, yb = ctx.labels(i)
                    Kaa, Kba = grams[i]
                    pred, conv = _ocsvm_fit_predict(Xa, nu, kernel, gmode, Kaa, Kba)
                    fits += 1
                    all_converged &= conv
                    scores.append(_f1(pred, yb))
                tracker.offer(
                    {"scaler": scaler, "nu": nu, "kernel": kernel, "gamma": gmode, "converged": all_converged},
                    float(np.mean(scores)),
                )
    best = tracker.best_desc
    Xa, Xb = ctx.scaled(best["scaler"], -1)
    _ya, yb = ctx.labels(-1)
    pred, conv = _ocsvm_fit_predict(Xa, best["nu"], best["kernel"], best["gamma"], Xb=Xb)
    fits += 1
    hp = {"nu": best["nu"], "kernel": best["kernel"], "gamma": best["gamma"]}
    if not (conv and best["converged"]):
        hp["converged"] = False
    return best["scaler"], hp, tracker, pred, yb, fits


_FAMILY_EVALUATORS = {
    "logreg": _eval_logreg,
    "svm": _eval_svm,
    "forest": _eval_forest,
    "lof": _eval_lof,
    "iforest": _eval_iforest,
    "ocsvm": _eval_ocsvm,
}


def evaluate_threshold_cell(samples_matrix, agg_matrix, repr_token, y_test, test_idx, tcfg=ThresholdConfig()):
    """Apply the fixed rule of one representation to the test rows."""
    if repr_token == "time_value":
        p = normality_pvalues(samples_matrix[test_idx])
        pred = (p < tcfg.p_value_cut).astype(np.int64)
    elif repr_token == "aggregated":
        v = agg_matrix[test_idx]
        pred = ((np.abs(v[:, 0] - v[:, 4]) > tcfg.mean_median_cut_db) | (2.0 * v[:, 1] > tcfg.two_std_cut_db)).astype(np.int64)
    elif repr_token == "histogram":
        frac_low = (samples_matrix[test_idx] < tcfg.hist_floor_dbm).mean(axis=1)
        pred = (frac_low > tcfg.hist_min_fraction).astype(np.int64)
    else:
        raise ValueError(f"no threshold rule for representation {repr_token!r}")
    return pred


def evaluate_cell(X, y, train_idx, test_idx, family: str, cfg: ExperimentConfig, seed_keys=()):
    """Grid-search one detector family on one feature matrix.

    Returns (scaler, hyperparams, tracker, predictions, y_test, n_fits);
    tracker.candidates holds every (candidate, cv_f1) pair evaluated.
    """
    fold_pos = stratified_kfold(y[train_idx], cfg.folds, cfg.seed, "cv", *seed_keys, family)
    folds = [(train_idx[tr], train_idx[va]) for tr, va in fold_pos]
    ctx = _CellContext(X, y, train_idx, test_idx, folds)
    return _FAMILY_EVALUATORS[family](ctx, cfg, seed_keys)


# -- the matrix ------------------------------------------------------------------


def _worker_count() -> int:
    try:
        n = int(os.environ.get("LINKSCOPE_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def run_scenario(cfg: ExperimentConfig, rows, kind: str):
    """Evaluate every (representation x encoded x family) cell of one
    injected scenario.

    Cells are independent work items; LINKSCOPE_THREADS bounds the worker
    pool and records are order-normalized afterwards, so the pool size never
    changes the output.  A failing cell is recorded with a failed status and
    zeroed metrics; the run continues.

    Returns (records, scenario_diagnostics, n_fits).
    """
    y = labels_vector(rows)
    link_ids = [r.trace.link_id for r in rows]
    train_idx, test_idx = stratified_holdout(y, 1.0 - cfg.train_fraction, cfg.seed, "split", kind)
    hist_range = global_range(rows)
    # histogram threshold rule reads raw samples, so time_value is always built
    wanted = list(cfg.representations)
    if "time_value" not in wanted:
        wanted.append("time_value")
    mats = {}
    for token in wanted:
        mats[token] = representation_matrix(
            rows, Representation.from_token(token), hist_range=hist_range, drop_dc=cfg.drop_dc
        )
    sdiag = {
        "train_ids": [link_ids[i] for i in train_idx],
        "test_ids": [link_ids[i] for i in test_idx],
        "train_checksum": ids_checksum([link_ids[i] for i in train_idx]),
        "ae": {},
    }
    fits = 0
    encoded_mats = {}
    if cfg.include_encoded:
        for token in cfg.representations:
            codes, ae_diag = encoded_features(mats[token], y, train_idx, cfg, kind, token)
            encoded_mats[token] = codes
            fits += 1
            sdiag["ae"][token] = {
                "fit_ids": [link_ids[i] for i in ae_diag["fit_rows"]],
                "fit_checksum": ids_checksum([link_ids[i] for i in ae_diag["fit_rows"]]),
                "final_loss": ae_diag["final_loss"],
                "epochs_run": ae_diag["epochs_run"],
            }

    encoded_flags = (False, True) if cfg.include_encoded else (False,)
    tasks = []
    for token in cfg.representations:
        for enc in encoded_flags:
            for family in FAMILY_ORDER:
                if family == "threshold" and (enc or token not in THRESHOLD_REPRS):
                    continue
                tasks.append((token, enc, family))

    def work(task):
        token, enc, family = task
        if family == "threshold":
            pred = evaluate_threshold_cell(mats["time_value"], mats.get("aggregated"), token, y, test_idx)
            m = metrics(pred, y[test_idx])
            return (
                EvalRecord(
                    anomaly=kind, representation=token, encoded=False, family="threshold",
                    scaler="none", hyperparams={}, cv_f1=None, status="ok", **m,
                ),
                0,
            )
        X = encoded_mats[token] if enc else mats[token]
        try:
            scaler, hp, tracker, pred, y_eval, n_fits = evaluate_cell(
                X, y, train_idx, test_idx, family, cfg, seed_keys=(kind, token, enc)
            )
            m = metrics(pred, y_eval)
            return (
                EvalRecord(
                    anomaly=kind, representation=token, encoded=enc, family=family,
                    scaler=scaler, hyperparams=hp, cv_f1=float(tracker.best_cv),
                    status="ok", **m,
                ),
                n_fits,
            )
        except Exception as exc:  # cell totality: record and move on
            return (
                EvalRecord(
                    anomaly=kind, representation=token, encoded=enc, family=family,
                    scaler="", hyperparams={}, cv_f1=None,
                    tp=0, fp=0, fn=0, tn=0, precision=0.0, recall=0.0, f1=0.0,
                    status=f"failed: {type(exc).__name__}: {exc}",
                ),
                0,
            )

    workers = _worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    records = [r for r, _ in results]
    fits += sum(n for _, n in results)
    records.sort(key=lambda r: r.sort_key())
    return records, sdiag, fits


def run_matrix(cfg: ExperimentConfig, dataset: Optional[Dataset] = None):
    """Run the whole benchmark: every scenario, representation and family.

    Returns (records, diagnostics).
    """
    validate_config(cfg)
    if dataset is None:
        dataset = generate_synthetic(cfg.n_links, cfg.seed)
    scenarios = build_scenarios(dataset, cfg)
    records = []
    diag = {"fits": 0, "scenarios": {}, "config": cfg.to_dict()}
    for kind in cfg.anomalies:
        kind_records, sdiag, fits = run_scenario(cfg, scenarios[kind], kind)
        records.extend(kind_records)
        diag["scenarios"][kind] = sdiag
        diag["fits"] += fits
    records.sort(key=lambda r: r.sort_key())
    return records, diag


# -- report -----------------------------------------------------------------------

ROW_LABELS = [
    ("threshold", False, "Threshold"),
    ("logreg", False, "LR"),
    ("logreg", True, "encoder+LR"),
    ("forest", False, "RForest"),
    ("forest", True, "encoder+RForest"),
    ("svm", False, "SVM"),
    ("svm", True, "encoder+SVM"),
    ("lof", False, "LOF"),
    ("lof", True, "encoder+LOF"),
    ("iforest", False, "IForest"),
    ("iforest", True, "encoder+IForest"),
    ("ocsvm", False, "OC-SVM"),
    ("ocsvm", True, "encoder+OC-SVM"),
]

GROUP_LABELS = [
    ("time_value", "time_value"),
    ("aggregated", "aggregated"),
    ("histogram", "histogram"),
    ("fft", "frequency"),
]

_METRIC_KEYS = ("precision", "recall", "f1")


def report_tables(records) -> dict:
    """Per-anomaly 13-row tables; cells hold 2-decimal values or None."""
    index = {(r.anomaly, r.representation, r.encoded, r.family): r for r in records if r.status == "ok"}
    tables = {}
    for kind in ANOMALY_ORDER:
        if not any(r.anomaly == kind for r in records):
            continue
        rows = []
        for family, enc, label in ROW_LABELS:
            row = {"detector": label}
            for repr_token, group in GROUP_LABELS:
                rec = index.get((kind, repr_token, enc, family))
                if rec is None:
                    row[group] = None
                else:
                    row[group] = {k: float(f"{getattr(rec, k):.2f}") for k in _METRIC_KEYS}
            rows.append(row)
        tables[kind] = rows
    return tables


def render_report(records, out_dir: str) -> list:
    """Write table_<anomaly>.csv and .json pairs; returns the paths written."""
    tables = report_tables(records)
    written = []
    for kind, rows in tables.items():
        csv_path = os.path.join(out_dir, f"table_{kind}.csv")
        json_path = os.path.join(out_dir, f"table_{kind}.json")
        header = ["detector"]
        for _repr, group in GROUP_LABELS:
            header += [f"{group}_{m}" for m in _METRIC_KEYS]
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                cells = [row["detector"]]
                for _repr, group in GROUP_LABELS:
                    if row[group] is None:
                        cells += ["", "", ""]
                    else:
                        cells += [f"{row[group][m]:.2f}" for m in _METRIC_KEYS]
                writer.writerow(cells)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"anomaly": kind, "rows": rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written += [csv_path, json_path]
    return written
