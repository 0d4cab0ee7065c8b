"""Staged pipeline front-end.

Each command reads its upstream artifact from --out-dir, writes its own
artifact plus a stage manifest, and is a cache-hit no-op when re-run with
unchanged inputs and config.  One process per output directory (lockfile).

Exit codes: 0 success, 2 missing upstream artifact, 3 config schema
violation, 1 anything else.  Failures print a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager

from . import __version__
from .autoencoder import save_autoencoder
from .evaluation import (
    ANOMALY_ORDER,
    ConfigError,
    ExperimentConfig,
    anomaly_spec,
    count_planned_fits,
    encoded_features,
    read_records,
    render_report,
    run_scenario,
    stratified_holdout,
    validate_config,
    write_records,
)
from .features import (
    FeatureMatrix,
    Representation,
    global_range,
    read_features,
    representation_matrix,
    write_features,
)
from .inject import AnomalyKind, Label, inject, join_labels, read_labels, write_labels
from .traces import (
    Dataset,
    dataset_checksum,
    filter_lossless,
    generate_synthetic,
    ingest_rutgers,
    read_csv,
    write_csv,
)

KIND_TOKENS = tuple(k.token for k in AnomalyKind)
REPR_TOKENS = tuple(r.token for r in Representation if r.token != "encoded")


class MissingArtifact(Exception):
    """An upstream stage artifact this command depends on does not exist."""


class LockHeld(Exception):
    pass


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _tree_signature(root: str) -> str:
    """Cheap content signature of a directory tree (paths + sizes)."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            h.update(f"{rel}:{os.path.getsize(full)}\n".encode("utf-8"))
    return h.hexdigest()


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _load_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dump_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise MissingArtifact(f"missing upstream artifact {name!r} in {out_dir} (run the earlier stage first)")
    return path


@contextmanager
def _dir_lock(out_dir: str):
    """One command process at a time per output directory."""
    path = os.path.join(out_dir, ".lock")
    for attempt in (0, 1):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                holder = int(open(path, "r", encoding="utf-8").read().strip() or "0")
            except (OSError, ValueError):
                holder = 0
            alive = holder > 0 and os.path.exists(f"/proc/{holder}")
            if alive or attempt:
                raise LockHeld(f"output directory is locked by pid {holder or 'unknown'} ({path})")
            os.unlink(path)  # stale lock from a dead process
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass


def _run_stage(out_dir: str, stage: str, inputs: dict, config: dict, outputs: list, build):
    """Run `build()` unless the previous run had identical inputs and config
    and its outputs are still present; returns the summary dict."""
    manifest_path = os.path.join(out_dir, f"{stage}.manifest.json")
    if os.path.exists(manifest_path):
        old = _load_json(manifest_path)
        unchanged = (
            old.get("inputs") == inputs
            and old.get("config") == config
            and old.get("outputs") == outputs
            and all(os.path.exists(os.path.join(out_dir, p)) for p in outputs)
        )
        if unchanged:
            return {"stage": stage, "cache_hit": True, "outputs": outputs, "stats": old.get("stats", {})}
    stats = build() or {}
    _dump_json(
        manifest_path,
        {
            "stage": stage,
            "version": __version__,
            "inputs": inputs,
            "config": config,
            "outputs": outputs,
            "stats": stats,
        },
    )
    return {"stage": stage, "cache_hit": False, "outputs": outputs, "stats": stats}


def _kinds(arg: str) -> list:
    return list(KIND_TOKENS) if arg == "all" else [arg]


# -- commands -------------------------------------------------------------------


def cmd_ingest(args) -> dict:
    out = args.out_dir
    if args.synthetic:
        inputs = {}
        config = {"synthetic": True, "links": args.links, "seed": args.seed}
    else:
        if not args.data_dir:
            raise ConfigError("ingest needs --synthetic or --data-dir")
        if not os.path.isdir(args.data_dir):
            raise MissingArtifact(f"data directory {args.data_dir!r} does not exist")
        inputs = {"data_tree": _tree_signature(args.data_dir)}
        config = {"synthetic": False, "dbm_offset": args.dbm_offset}

    def build():
        if args.synthetic:
            raw = generate_synthetic(args.links, args.seed)
        else:
            raw = ingest_rutgers(args.data_dir, dbm_offset=args.dbm_offset)
        kept = filter_lossless(raw)
        write_csv(kept, os.path.join(out, "dataset.csv"))
        return {"raw_links": len(raw), "kept_links": len(kept), "checksum": dataset_checksum(kept)}

    return _run_stage(out, "ingest", inputs, config, ["dataset.csv"], build)


def cmd_inject(args) -> dict:
    out = args.out_dir
    kinds = _kinds(args.kind)
    dataset_path = _require(out, "dataset.csv")
    inputs = {"dataset.csv": _sha256_file(dataset_path)}
    config = {"kinds": kinds, "seed": args.seed}
    outputs = []
    for k in kinds:
        outputs += [f"scenario_{k}.csv", f"labels_{k}.csv"]

    def build():
        ds = read_csv(dataset_path)
        cfg = ExperimentConfig(seed=args.seed)
        stats = {}
        for k in kinds:
            rows = inject(ds, anomaly_spec(cfg, k))
            mutated = Dataset(tuple(r.trace for r in rows), provenance=ds.provenance)
            write_csv(mutated, os.path.join(out, f"scenario_{k}.csv"))
            write_labels(rows, os.path.join(out, f"labels_{k}.csv"))
            stats[k] = {
                "total": len(rows),
                "anomalous": sum(1 for r in rows if r.label is Label.ANOMALOUS),
            }
        return stats

    return _run_stage(out, "inject", inputs, config, outputs, build)


def cmd_featurize(args) -> dict:
    out = args.out_dir
    kinds = _kinds(args.kind)
    inputs = {}
    for k in kinds:
        for name in (f"scenario_{k}.csv", f"labels_{k}.csv"):
            inputs[name] = _sha256_file(_require(out, name))
    config = {"representations": list(REPR_TOKENS), "drop_dc": False}
    outputs = [f"features_{k}_{r}.csv" for k in kinds for r in REPR_TOKENS]

    def build():
        stats = {}
        for k in kinds:
            ds = read_csv(os.path.join(out, f"scenario_{k}.csv"))
            labels = read_labels(os.path.join(out, f"labels_{k}.csv"))
            rows = join_labels(ds, labels)
            lo, hi = global_range(rows)
            link_ids = tuple(r.trace.link_id for r in rows)
            row_labels = tuple(r.label.value for r in rows)
            for token in REPR_TOKENS:
                X = representation_matrix(rows, Representation.from_token(token), hist_range=(lo, hi))
                fm = FeatureMatrix(
                    representation=Representation.from_token(token),
                    encoded=False,
                    link_ids=link_ids,
                    X=X,
                    labels=row_labels,
                )
                meta = {"anomaly": k, "hist_range": [lo, hi], "drop_dc": False}
                write_features(fm, os.path.join(out, f"features_{k}_{token}.csv"), meta=meta)
            stats[k] = {"rows": len(link_ids), "hist_range": [lo, hi]}
        return stats

    return _run_stage(out, "featurize", inputs, config, outputs, build)


def cmd_encode(args) -> dict:
    out = args.out_dir
    kinds = _kinds(args.kind)
    cfg = ExperimentConfig.for_profile(args.profile, seed=args.seed)
    inputs = {}
    for k in kinds:
        for token in REPR_TOKENS:
            name = f"features_{k}_{token}.csv"
            inputs[name] = _sha256_file(_require(out, name))
    config = {
        "seed": cfg.seed,
        "profile": cfg.profile,
        "train_fraction": cfg.train_fraction,
        "ae_train_fraction": cfg.ae_train_fraction,
        "ae_epochs": cfg.ae_epochs,
        "ae_batch": cfg.ae_batch,
        "ae_patience": cfg.ae_patience,
    }
    outputs = []
    for k in kinds:
        for token in REPR_TOKENS:
            outputs += [f"features_{k}_{token}_encoded.csv", f"autoencoder_{k}_{token}.json"]

    def build():
        import numpy as np

        stats = {}
        for k in kinds:
            stats[k] = {}
            for token in REPR_TOKENS:
                fm = read_features(os.path.join(out, f"features_{k}_{token}.csv"))
                if fm.labels is None:
                    raise ConfigError(f"features_{k}_{token}.csv carries no labels; re-run featurize")
                y = np.asarray([1 if lb == Label.ANOMALOUS.value else 0 for lb in fm.labels], dtype=np.int64)
                train_idx, _test_idx = stratified_holdout(y, 1.0 - cfg.train_fraction, cfg.seed, "split", k)
                codes, diag = encoded_features(fm.X, y, train_idx, cfg, k, token)
                enc = FeatureMatrix(
                    representation=fm.representation,
                    encoded=True,
                    link_ids=fm.link_ids,
                    X=codes,
                    labels=fm.labels,
                )
                meta = {"anomaly": k, "source_representation": token}
                write_features(enc, os.path.join(out, f"features_{k}_{token}_encoded.csv"), meta=meta)
                save_autoencoder(diag["model"], os.path.join(out, f"autoencoder_{k}_{token}.json"))
                stats[k][token] = {
                    "final_loss": float(diag["final_loss"]),
                    "epochs_run": int(diag["epochs_run"]),
                }
        return stats

    return _run_stage(out, "encode", inputs, config, outputs, build)


def _condense_sdiag(sdiag: dict) -> dict:
    return {
        "train_checksum": sdiag["train_checksum"],
        "n_train": len(sdiag["train_ids"]),
        "n_test": len(sdiag["test_ids"]),
        "ae": {
            token: {
                "fit_checksum": d["fit_checksum"],
                "final_loss": float(d["final_loss"]),
                "epochs_run": int(d["epochs_run"]),
            }
            for token, d in sdiag["ae"].items()
        },
    }


def _evaluate_config(args) -> ExperimentConfig:
    if args.config:
        if args.profile:
            raise ConfigError("--config and --profile are mutually exclusive")
        if not os.path.exists(args.config):
            raise MissingArtifact(f"config file {args.config!r} does not exist")
        try:
            doc = _load_json(args.config)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if args.seed is not None:
            doc["seed"] = args.seed
        return ExperimentConfig.from_dict(doc)
    cfg = ExperimentConfig.for_profile(args.profile or "fast", seed=7 if args.seed is None else args.seed)
    validate_config(cfg)
    return cfg


def cmd_evaluate(args) -> dict:
    out = args.out_dir
    cfg = _evaluate_config(args)
    dataset_path = _require(out, "dataset.csv")
    dataset_sha = _sha256_file(dataset_path)
    inputs = {"dataset.csv": dataset_sha}
    config = cfg.to_dict()
    outputs = ["records.csv", "records.json", "manifest.json"]

    def build():
        ds = read_csv(dataset_path)
        cfg_digest = _digest(config)
        all_records = []
        scenario_meta = {}
        fits = 0
        for kind in cfg.anomalies:
            ck_csv = os.path.join(out, f"records_{kind}.csv")
            ck_meta_path = os.path.join(out, f"records_{kind}.meta.json")
            key = {"dataset": dataset_sha, "config_digest": cfg_digest, "kind": kind}
            reused = False
            if os.path.exists(ck_csv) and os.path.exists(ck_meta_path):
                meta = _load_json(ck_meta_path)
                if meta.get("key") == key:
                    records = read_records(ck_csv)
                    scenario_meta[kind] = meta["scenario"]
                    fits += meta["fits"]
                    reused = True
            if not reused:
                rows = inject(ds, anomaly_spec(cfg, kind))
                records, sdiag, n_fits = run_scenario(cfg, rows, kind)
                write_records(records, ck_csv)
                meta = {"key": key, "fits": n_fits, "scenario": _condense_sdiag(sdiag)}
                _dump_json(ck_meta_path, meta)
                scenario_meta[kind] = meta["scenario"]
                fits += n_fits
            all_records.extend(records)
        all_records.sort(key=lambda r: r.sort_key())
        write_records(all_records, os.path.join(out, "records.csv"), os.path.join(out, "records.json"))
        _dump_json(
            os.path.join(out, "manifest.json"),
            {
                "version": __version__,
                "config": config,
                "dataset_file_sha256": dataset_sha,
                "dataset_checksum": dataset_checksum(ds),
                "planned_fits": count_planned_fits(cfg),
                "fits": fits,
                "scenarios": scenario_meta,
            },
        )
        return {"fits": fits, "records": len(all_records)}

    return _run_stage(out, "evaluate", inputs, config, outputs, build)


def cmd_report(args) -> dict:
    out = args.out_dir
    records_path = _require(out, "records.csv")
    inputs = {"records.csv": _sha256_file(records_path)}
    records = read_records(records_path)
    kinds = [k for k in ANOMALY_ORDER if any(r.anomaly == k for r in records)]
    outputs = []
    for k in kinds:
        outputs += [f"table_{k}.csv", f"table_{k}.json"]

    def build():
        render_report(records, out)
        return {"tables": len(kinds)}

    return _run_stage(out, "report", inputs, {}, outputs, build)


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linkscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"linkscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_out(p):
        p.add_argument("--out-dir", required=True, help="artifact directory shared by all stages")

    p = sub.add_parser("ingest", help="build the canonical lossless dataset CSV")
    add_out(p)
    p.add_argument("--synthetic", action="store_true", help="generate traces instead of reading --data-dir")
    p.add_argument("--links", type=int, default=2123, help="synthetic link count")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--data-dir", help="root of the raw measurement tree")
    p.add_argument("--dbm-offset", type=float, default=-95.0, help="added to raw units to get dBm")

    p = sub.add_parser("inject", help="write injected scenario traces and labels")
    add_out(p)
    p.add_argument("--kind", choices=KIND_TOKENS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("featurize", help="write per-representation feature matrices")
    add_out(p)
    p.add_argument("--kind", choices=KIND_TOKENS + ("all",), default="all")

    p = sub.add_parser("encode", help="train autoencoders and write encoded features")
    add_out(p)
    p.add_argument("--kind", choices=KIND_TOKENS + ("all",), default="all")
    p.add_argument("--profile", choices=("fast", "full"), default="fast")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("evaluate", help="run the detector grid and write records")
    add_out(p)
    p.add_argument("--profile", choices=("fast", "full"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="JSON experiment config (mutually exclusive with --profile)")

    p = sub.add_parser("report", help="render per-anomaly result tables from records")
    add_out(p)
    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "inject": cmd_inject,
    "featurize": cmd_featurize,
    "encode": cmd_encode,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    stage = args.command
    try:
        with _dir_lock(args.out_dir):
            summary = _COMMANDS[stage](args)
    except Exception as exc:  # noqa: BLE001 - uniform machine-readable failure
        if isinstance(exc, MissingArtifact):
            code = 2
        elif isinstance(exc, ConfigError):
            code = 3
        else:
            code = 1
        err = {"error": {"stage": stage, "type": type(exc).__name__, "message": str(exc), "exit_code": code}}
        print(json.dumps(err), file=sys.stderr)
        return code
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
