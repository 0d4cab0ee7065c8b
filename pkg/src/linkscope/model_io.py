"""JSON persistence for fitted detector models.

One file per model: a family tag, the hyperparameters, and every learned
tensor as nested lists.  Floats survive the round trip bit-exactly because
json emits shortest-repr doubles.
"""

from __future__ import annotations

import json

import numpy as np

from . import supervised, unsupervised

_FORMAT_VERSION = 1


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _iarr(x):
    return np.asarray(x, dtype=np.int64)


def _tree_to_dict(t: supervised.Tree):
    return {
        "feature": t.feature.tolist(),
        "threshold": t.threshold.tolist(),
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "pred": t.pred.tolist(),
    }


def _tree_from_dict(d):
    return supervised.Tree(
        feature=_iarr(d["feature"]),
        threshold=_arr(d["threshold"]),
        left=_iarr(d["left"]),
        right=_iarr(d["right"]),
        pred=_iarr(d["pred"]),
    )


def _isotree_to_dict(t: unsupervised.IsoTree):
    return {
        "feature": t.feature.tolist(),
        "threshold": t.threshold.tolist(),
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "size": t.size.tolist(),
        "depth": t.depth.tolist(),
    }


def _isotree_from_dict(d):
    return unsupervised.IsoTree(
        feature=_iarr(d["feature"]),
        threshold=_arr(d["threshold"]),
        left=_iarr(d["left"]),
        right=_iarr(d["right"]),
        size=_iarr(d["size"]),
        depth=_iarr(d["depth"]),
    )


def model_to_dict(model) -> dict:
    if isinstance(model, supervised.LogRegModel):
        return {
            "family": "logreg",
            "C": model.C,
            "w": model.w.tolist(),
            "b": model.b,
            "converged": model.converged,
            "n_iter": model.n_iter,
        }
    if isinstance(model, supervised.ForestModel):
        return {
            "family": "forest",
            "n_estimators": model.n_estimators,
            "seed": model.seed,
            "trees": [_tree_to_dict(t) for t in model.trees],
        }
    if isinstance(model, supervised.SvmModel):
        return {
            "family": "svm",
            "kernel": model.kernel,
            "gamma": model.gamma,
            "C": model.C,
            "alpha": model.alpha.tolist(),
            "signs": model.signs.tolist(),
            "sv": model.sv.tolist(),
            "b": model.b,
            "converged": model.converged,
            "n_iter": model.n_iter,
        }
    if isinstance(model, unsupervised.LofModel):
        return {
            "family": "lof",
            "k": model.k,
            "p": model.p,
            "offset": model.offset,
            "X": model.X.tolist(),
            "kdist": model.kdist.tolist(),
            "lrd": model.lrd.tolist(),
            "neighbors": model.neighbors.tolist(),
            "train_scores": model.train_scores.tolist(),
        }
    if isinstance(model, unsupervised.IForestModel):
        return {
            "family": "iforest",
            "psi": model.psi,
            "n_estimators": model.n_estimators,
            "seed": model.seed,
            "offset": model.offset,
            "trees": [_isotree_to_dict(t) for t in model.trees],
        }
    if isinstance(model, unsupervised.OcSvmModel):
        return {
            "family": "ocsvm",
            "kernel": model.kernel,
            "gamma": model.gamma,
            "nu": model.nu,
            "alpha": model.alpha.tolist(),
            "sv": model.sv.tolist(),
            "rho": model.rho,
            "converged": model.converged,
            "n_iter": model.n_iter,
        }
    raise TypeError(f"cannot serialize model of type {type(model)!r}")


def model_from_dict(doc: dict):
    family = doc.get("family")
    if family == "logreg":
        return supervised.LogRegModel(
            w=_arr(doc["w"]), b=float(doc["b"]), C=float(doc["C"]),
            converged=bool(doc["converged"]), n_iter=int(doc["n_iter"]),
        )
    if family == "forest":
        return supervised.ForestModel(
            trees=[_tree_from_dict(t) for t in doc["trees"]],
            n_estimators=int(doc["n_estimators"]),
            seed=int(doc["seed"]),
        )
    if family == "svm":
        return supervised.SvmModel(
            kernel=doc["kernel"], gamma=float(doc["gamma"]), C=float(doc["C"]),
            alpha=_arr(doc["alpha"]), signs=_arr(doc["signs"]), sv=_arr(doc["sv"]),
            b=float(doc["b"]), converged=bool(doc["converged"]), n_iter=int(doc["n_iter"]),
        )
    if family == "lof":
        return unsupervised.LofModel(
            k=int(doc["k"]), p=int(doc["p"]), offset=float(doc["offset"]),
            X=_arr(doc["X"]), kdist=_arr(doc["kdist"]), lrd=_arr(doc["lrd"]),
            neighbors=_iarr(doc["neighbors"]), train_scores=_arr(doc["train_scores"]),
        )
    if family == "iforest":
        return unsupervised.IForestModel(
            trees=[_isotree_from_dict(t) for t in doc["trees"]],
            psi=int(doc["psi"]), n_estimators=int(doc["n_estimators"]),
            seed=int(doc["seed"]), offset=float(doc["offset"]),
        )
    if family == "ocsvm":
        return unsupervised.OcSvmModel(
            kernel=doc["kernel"], gamma=float(doc["gamma"]), nu=float(doc["nu"]),
            alpha=_arr(doc["alpha"]), sv=_arr(doc["sv"]), rho=float(doc["rho"]),
            converged=bool(doc["converged"]), n_iter=int(doc["n_iter"]),
        )
    raise ValueError(f"unknown model family {family!r}")


def save_model(model, path: str) -> None:
    doc = {"format_version": _FORMAT_VERSION}
    doc.update(model_to_dict(model))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format")
    return model_from_dict(doc)
