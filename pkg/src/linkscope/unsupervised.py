"""Unsupervised outlier detectors: LOF, isolation forest, one-class SVM.

All three fit on unlabeled training rows (the training split, anomalies
included) and score held-out rows.  Decision conventions:

  LOF       score > offset (default 1.5) is anomalous
  iforest   anomaly score s > 0.5 is anomalous
  oc-svm    decision value f(x) < 0 is anomalous
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .supervised import ConvergenceError, kernel_matrix, resolve_gamma
from .traces import derive_rng

# -- distances ----------------------------------------------------------------


def minkowski_dists(A, B, p: int, chunk: int = 512) -> np.ndarray:
    """Pairwise distances; p=2 via the Gram trick, p=1 chunked to bound memory."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if p == 2:
        sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
        return np.sqrt(np.maximum(sq, 0.0))
    if p == 1:
        out = np.empty((A.shape[0], B.shape[0]))
        for start in range(0, A.shape[0], chunk):
            blk = A[start : start + chunk]
            out[start : start + chunk] = np.abs(blk[:, None, :] - B[None, :, :]).sum(axis=2)
        return out
    raise ValueError(f"minkowski p must be 1 or 2, got {p}")


# -- local outlier factor ------------------------------------------------------

_LRD_FLOOR = 1e-12  # keeps duplicate clouds finite; their LOF ratios stay ~1


@dataclass
class LofModel:
    k: int
    p: int
    offset: float
    X: np.ndarray
    kdist: np.ndarray
    lrd: np.ndarray
    neighbors: np.ndarray
    train_scores: np.ndarray


def fit_lof(X, k: int = 20, p: int = 2, offset: float = 1.5, dists=None) -> LofModel:
    """Classic LOF over the training set with exact brute-force distances.

    `dists` may carry a precomputed train x train distance matrix so a
    hyperparameter sweep over k pays for the distances once.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not (1 <= k < n):
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    D = minkowski_dists(X, X, p) if dists is None else np.array(dists, dtype=np.float64)
    if D.shape != (n, n):
        raise ValueError(f"dists must be {n}x{n}, got {D.shape}")
    np.fill_diagonal(D, np.inf)  # a point is not its own neighbor
    order = np.argsort(D, axis=1, kind="stable")
    neighbors = order[:, :k]
    ndist = np.take_along_axis(D, neighbors, axis=1)
    kdist = ndist[:, -1]
    reach = np.maximum(kdist[neighbors], ndist)
    lrd = 1.0 / np.maximum(reach.mean(axis=1), _LRD_FLOOR)
    train_scores = lrd[neighbors].mean(axis=1) / lrd
    return LofModel(k=k, p=p, offset=offset, X=X, kdist=kdist, lrd=lrd, neighbors=neighbors, train_scores=train_scores)


def lof_scores(model: LofModel, X, dists=None) -> np.ndarray:
    """Novelty scores for query rows against the fitted training set.

    `dists` may carry a precomputed query x train distance matrix.
    """
    Xq = np.asarray(X, dtype=np.float64)
    if Xq.shape[0] == 0:
        return np.zeros(0)
    D = minkowski_dists(Xq, model.X, model.p) if dists is None else np.asarray(dists, dtype=np.float64)
    if D.shape != (Xq.shape[0], model.X.shape[0]):
        raise ValueError(f"dists must be {Xq.shape[0]}x{model.X.shape[0]}, got {D.shape}")
    order = np.argsort(D, axis=1, kind="stable")
    neighbors = order[:, : model.k]
    ndist = np.take_along_axis(D, neighbors, axis=1)
    reach = np.maximum(model.kdist[neighbors], ndist)
    lrd_q = 1.0 / np.maximum(reach.mean(axis=1), _LRD_FLOOR)
    return model.lrd[neighbors].mean(axis=1) / lrd_q


def predict_lof(model: LofModel, X) -> np.ndarray:
    return (lof_scores(model, X) > model.offset).astype(np.int64)


# -- isolation forest ----------------------------------------------------------

PSI_DEFAULT = 256


def _harmonic(n: int) -> float:
    return float(sum(1.0 / i for i in range(1, n + 1)))


_C_CACHE = {}


def average_path_length(n: int) -> float:
    """c(n): expected unsuccessful-search path length of a BST on n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    if n not in _C_CACHE:
        _C_CACHE[n] = 2.0 * _harmonic(n - 1) - 2.0 * (n - 1) / n
    return _C_CACHE[n]


@dataclass
class IsoTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray


@dataclass
class IForestModel:
    trees: list
    psi: int
    n_estimators: int
    seed: int
    offset: float = 0.5


def _grow_iso_tree(X, rng, height_cap: int) -> IsoTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def build(idx, h):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(len(idx))
        depth.append(h)
        if h >= height_cap or len(idx) <= 1:
            return node
        lo = X[idx].min(axis=0)
        hi = X[idx].max(axis=0)
        usable = np.flatnonzero(hi > lo)
        if usable.size == 0:
            return node
        q = int(usable[rng.integers(0, usable.size)])
        split = float(rng.uniform(lo[q], hi[q]))
        go_left = X[idx, q] < split
        feature[node] = q
        threshold[node] = split
        left[node] = build(idx[go_left], h + 1)
        right[node] = build(idx[~go_left], h + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return IsoTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64),
        depth=np.asarray(depth, dtype=np.int64),
    )


def fit_iforest(X, n_estimators: int = 100, seed: int = 0, psi: int = PSI_DEFAULT) -> IForestModel:
    """Isolation forest with subsample size min(psi, n) and height cap ceil(log2 psi)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 training rows")
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    psi = min(psi, n)
    height_cap = int(math.ceil(math.log2(psi))) if psi > 1 else 0
    trees = []
    for t in range(n_estimators):
        rng = derive_rng(seed, "isotree", t)
        sample = rng.choice(n, size=psi, replace=False)
        trees.append(_grow_iso_tree(X[sample], rng, height_cap))
    return IForestModel(trees=trees, psi=psi, n_estimators=n_estimators, seed=seed)


def _tree_path_lengths(tree: IsoTree, X) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[node]
        active = feat >= 0
        if not active.any():
            break
        rows = np.flatnonzero(active)
        goes_left = X[rows, feat[rows]] < tree.threshold[node[rows]]
        node[rows] = np.where(goes_left, tree.left[node[rows]], tree.right[node[rows]])
    sizes = tree.size[node]
    adjust = np.array([average_path_length(int(sz)) for sz in sizes])
    return tree.depth[node] + adjust


def score_from_path(mean_path: float, psi: int) -> float:
    """s = 2^(-E[h]/c(psi)); mean path equal to c(psi) gives exactly 0.5."""
    return float(2.0 ** (-mean_path / average_path_length(psi)))


def iforest_scores(model: IForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0)
    paths = np.zeros(X.shape[0])
    for tree in model.trees:
        paths += _tree_path_lengths(tree, X)
    mean_paths = paths / model.n_estimators
    return 2.0 ** (-mean_paths / average_path_length(model.psi))


def predict_iforest(model: IForestModel, X) -> np.ndarray:
    return (iforest_scores(model, X) > model.offset).astype(np.int64)


# -- one-class SVM --------------------------------------------------------------


@dataclass
class OcSvmModel:
    kernel: str
    gamma: float
    nu: float
    alpha: np.ndarray
    sv: np.ndarray
    rho: float
    converged: bool
    n_iter: int


def _ocsvm_smo(K, nu, tol, max_iter):
    n = K.shape[0]
    ub = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_init = int(math.floor(nu * n))
    alpha[:n_init] = ub
    if n_init < n:
        alpha[n_init] = 1.0 - n_init * ub
    G = K @ alpha
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        up = alpha < ub - 1e-15
        low = alpha > 1e-15
        g_up = np.where(up, G, np.inf)
        g_low = np.where(low, G, -np.inf)
        i = int(np.argmin(g_up))
        j = int(np.argmax(g_low))
        if g_low[j] - g_up[i] <= tol:
            converged = True
            break
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if eta <= 1e-12:
            eta = 1e-12
        delta = (G[j] - G[i]) / eta
        delta = min(delta, ub - alpha[i], alpha[j])
        if delta <= 1e-18:
            converged = True
            break
        alpha[i] += delta
        alpha[j] -= delta
        G += delta * (K[:, i] - K[:, j])
    free = (alpha > 1e-12) & (alpha < ub - 1e-12)
    if free.any():
        rho = float(G[free].mean())
    else:
        lo = float(np.min(np.where(alpha < ub - 1e-15, G, np.inf)))
        hi = float(np.max(np.where(alpha > 1e-15, G, -np.inf)))
        rho = (lo + hi) / 2.0
    return alpha, rho, converged, it


def train_ocsvm(
    X,
    nu: float = 0.5,
    kernel: str = "rbf",
    gamma="scale",
    tol: float = 1e-3,
    max_iter: Optional[int] = None,
    gram: Optional[np.ndarray] = None,
) -> OcSvmModel:
    """nu-parameterized one-class SVM solved by SMO on the equality simplex.

    nu bounds the training outlier fraction from above (asymptotically), so
    the grid value doubles as a contamination guess.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"bad training matrix shape {X.shape}")
    if not (0.0 < nu <= 1.0):
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    g = resolve_gamma(gamma, X)
    K = kernel_matrix(X, X, kernel, g) if gram is None else gram
    if max_iter is None:
        max_iter = max(20000, 200 * X.shape[0])
    alpha, rho, converged, it = _ocsvm_smo(K, nu, tol, max_iter)
    model = OcSvmModel(kernel=kernel, gamma=g, nu=nu, alpha=alpha, sv=X, rho=rho, converged=converged, n_iter=it)
    if not converged:
        raise ConvergenceError(f"one-class SMO hit the iteration cap ({max_iter})", model=model)
    return model


def ocsvm_decision(model: OcSvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0)
    keep = model.alpha > 1e-12
    K = kernel_matrix(X, model.sv[keep], model.kernel, model.gamma)
    return K @ model.alpha[keep] - model.rho


def predict_ocsvm(model: OcSvmModel, X) -> np.ndarray:
    return (ocsvm_decision(model, X) < 0).astype(np.int64)


def predict(model, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if isinstance(model, LofModel):
        return predict_lof(model, X)
    if isinstance(model, IForestModel):
        return predict_iforest(model, X)
    if isinstance(model, OcSvmModel):
        return predict_ocsvm(model, X)
    raise TypeError(f"unknown model type {type(model)!r}")
