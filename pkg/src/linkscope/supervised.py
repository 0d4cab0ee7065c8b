"""Supervised binary detectors trained on labeled feature vectors.

Three families, all implemented here without external learners:

  logistic regression  L2-penalized NLL minimized by BFGS with backtracking
  bagged forest        bootstrap ensembles of full-depth Gini CART trees
  SVM                  soft-margin kernel SVM solved by SMO

Labels are ints: 0 normal, 1 anomalous.  Ties (probability exactly 0.5,
even vote split, decision value exactly 0) resolve to normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .traces import derive_rng


class ConvergenceError(RuntimeError):
    """Optimizer hit its iteration cap; carries the best-so-far model."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"bad training shapes X={X.shape} y={y.shape}")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    if np.unique(y).size < 2:
        raise ValueError("training data contains a single class")
    return X, y


# -- logistic regression -----------------------------------------------------


@dataclass
class LogRegModel:
    w: np.ndarray
    b: float
    C: float
    converged: bool
    n_iter: int


def _sigmoid(z):
    # piecewise form stays finite for large |z|
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logreg_loss_grad(theta, X, y, C):
    # theta = [w, b]; penalty 1/(2C) * ||w||^2, bias unpenalized
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z) + np.dot(w, w) / (2.0 * C))
    r = _sigmoid(z) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r + w / C
    grad[-1] = r.sum()
    return loss, grad


def train_logreg(X, y, C: float = 1.0, tol: float = 1e-4, max_iter: int = 1000) -> LogRegModel:
    """BFGS with Armijo backtracking, stopped at max-abs gradient <= tol."""
    X, y = _check_xy(X, y)
    d = X.shape[1]
    theta = np.zeros(d + 1)
    H = np.eye(d + 1)
    loss, grad = _logreg_loss_grad(theta, X, y, C)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        p = -H @ grad
        if p @ grad >= 0:  # lost positive definiteness, reset
            H = np.eye(d + 1)
            p = -grad
        step = 1.0
        gTp = grad @ p
        for _ in range(40):
            cand = theta + step * p
            new_loss, new_grad = _logreg_loss_grad(cand, X, y, C)
            if new_loss <= loss + 1e-4 * step * gTp:
                break
            step *= 0.5
        s = cand - theta
        yk = new_grad - grad
        theta, loss, grad = cand, new_loss, new_grad
        sy = s @ yk
        if sy > 1e-12:
            rho = 1.0 / sy
            Hy = H @ yk
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + rho * (rho * (yk @ Hy) + 1.0) * np.outer(s, s)
    else:
        it = max_iter
    return LogRegModel(w=theta[:-1].copy(), b=float(theta[-1]), C=C, converged=converged, n_iter=it)


def logreg_proba(model: LogRegModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return _sigmoid(X @ model.w + model.b)


def predict_logreg(model: LogRegModel, X) -> np.ndarray:
    return (logreg_proba(model, X) > 0.5).astype(np.int64)


# -- CART + bagging ----------------------------------------------------------


@dataclass
class Tree:
    """Flat array form: node i splits on feature[i] at threshold[i] unless leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    pred: np.ndarray  # majority class at node (valid for leaves)

    @property
    def root_feature(self) -> int:
        return int(self.feature[0])

    @property
    def root_threshold(self) -> float:
        return float(self.threshold[0])


def _gini_best_split(Xn, yn):
    """Best (feature, threshold, weighted impurity) over all midpoint splits.

    Ties go to the lowest (sorted position, feature) pair so trees are
    deterministic.  Returns None when no split separates distinct values.
    """
    m, d = Xn.shape
    if m < 2:
        return None
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ys = yn[order]
    pos_left = np.cumsum(ys, axis=0)[:-1]  # class-1 count left of each cut
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    total_pos = pos_left[-1, :] + ys[-1, :]
    pos_right = total_pos[None, :] - pos_left
    p1l = pos_left / n_left
    p1r = pos_right / n_right
    gini = n_left * (2 * p1l * (1 - p1l)) + n_right * (2 * p1r * (1 - p1r))
    gini = gini / m
    valid = xs[1:] > xs[:-1]
    gini = np.where(valid, gini, np.inf)
    flat = int(np.argmin(gini))
    cut, feat = divmod(flat, d)
    if not np.isfinite(gini[cut, feat]):
        return None
    thr = 0.5 * (xs[cut, feat] + xs[cut + 1, feat])
    return feat, float(thr), float(gini[cut, feat])


def _node_gini(yn):
    p1 = yn.mean() if yn.size else 0.0
    return 2 * p1 * (1 - p1)


def grow_tree(X, y) -> Tree:
    """Grow a CART classifier to purity (min leaf 1, all features considered)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    feature, threshold, left, right, pred = [], [], [], [], []

    def new_node(idx):
        node = len(feature)
        yn = y[idx]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        # majority with tie to normal
        pred.append(1 if yn.sum() * 2 > yn.size else 0)
        return node

    def build(idx):
        node = new_node(idx)
        yn = y[idx]
        if yn.min() == yn.max():
            return node
        split = _gini_best_split(X[idx], yn)
        if split is None:
            return node
        feat, thr, child_gini = split
        if child_gini >= _node_gini(yn) - 1e-12:
            return node
        go_left = X[idx, feat] <= thr
        feature[node] = feat
        threshold[node] = thr
        left[node] = build(idx[go_left])
        right[node] = build(idx[~go_left])
        return node

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000))
    try:
        build(np.arange(X.shape[0]))
    finally:
        sys.setrecursionlimit(old_limit)
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        pred=np.asarray(pred, dtype=np.int64),
    )


def tree_predict(tree: Tree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[node]
        active = feat >= 0
        if not active.any():
            break
        rows = np.flatnonzero(active)
        f = feat[rows]
        thr = tree.threshold[node[rows]]
        goes_left = X[rows, f] <= thr
        node[rows] = np.where(goes_left, tree.left[node[rows]], tree.right[node[rows]])
    return tree.pred[node]


@dataclass
class ForestModel:
    trees: list
    n_estimators: int
    seed: int


def train_forest(X, y, n_estimators: int = 100, seed: int = 0) -> ForestModel:
    """Bagging: each tree sees a bootstrap resample of size n, full features."""
    X, y = _check_xy(X, y)
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    n = X.shape[0]
    trees = []
    for t in range(n_estimators):
        rng = derive_rng(seed, "tree", t)
        boot = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[boot], y[boot]))
    return ForestModel(trees=trees, n_estimators=n_estimators, seed=seed)


def forest_votes(model: ForestModel, X) -> np.ndarray:
    votes = np.zeros(np.asarray(X).shape[0], dtype=np.int64)
    for tree in model.trees:
        votes += tree_predict(tree, X)
    return votes


def predict_forest(model: ForestModel, X) -> np.ndarray:
    votes = forest_votes(model, X)
    return (votes * 2 > model.n_estimators).astype(np.int64)


# -- kernels (shared with the one-class solver) -------------------------------


def pairwise_sq_dists(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(sq, 0.0)


def resolve_gamma(gamma, X) -> float:
    """'auto' -> 1/d; 'scale' -> 1/(d * var(X)) with the whole-matrix variance."""
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if gamma == "auto":
        return 1.0 / d
    if gamma == "scale":
        var = float(X.var())
        return 1.0 / (d * var) if var > 0 else 1.0 / d
    g = float(gamma)
    if g <= 0:
        raise ValueError(f"gamma must be positive, got {g}")
    return g


def kernel_matrix(A, B, kernel: str, gamma: float) -> np.ndarray:
    if kernel == "linear":
        return np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64).T
    if kernel == "rbf":
        return np.exp(-gamma * pairwise_sq_dists(A, B))
    raise ValueError(f"unknown kernel {kernel!r}")


# -- SVM via SMO -------------------------------------------------------------


@dataclass
class SvmModel:
    kernel: str
    gamma: float
    C: float
    alpha: np.ndarray  # dual coefficients over the training rows
    signs: np.ndarray  # labels as +-1
    sv: np.ndarray  # training matrix (kept whole; alpha is sparse)
    b: float
    converged: bool
    n_iter: int

    def sv_count(self) -> int:
        return int(np.sum(self.alpha > 1e-12))


def _smo_solve(K, s, C, tol, max_iter):
    """Maximal-violating-pair SMO on a precomputed kernel matrix.

    Returns (alpha, b, converged, iterations).  g holds sum_j alpha_j s_j K_ij,
    so the KKT violation score is v_i = s_i - g_i and the stop rule is
    max(v over I_up) - min(v over I_low) <= tol.
    """
    n = K.shape[0]
    alpha = np.zeros(n)
    g = np.zeros(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = s - g
        up = np.where(s > 0, alpha < C, alpha > 0)
        low = np.where(s > 0, alpha > 0, alpha < C)
        if not up.any() or not low.any():
            converged = True
            break
        v_up = np.where(up, v, -np.inf)
        v_low = np.where(low, v, np.inf)
        i = int(np.argmax(v_up))
        j = int(np.argmin(v_low))
        if v_up[i] - v_low[j] <= tol:
            converged = True
            break
        si, sj = s[i], s[j]
        if si != sj:
            lo = max(0.0, alpha[j] - alpha[i])
            hi = min(C, C + alpha[j] - alpha[i])
        else:
            lo = max(0.0, alpha[i] + alpha[j] - C)
            hi = min(C, alpha[i] + alpha[j])
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if eta <= 1e-12:
            eta = 1e-12
        aj_new = alpha[j] + sj * ((g[i] - si) - (g[j] - sj)) / eta
        aj_new = min(hi, max(lo, aj_new))
        daj = aj_new - alpha[j]
        if abs(daj) < 1e-14:
            # numerically stuck pair; nudge the stop check by declaring done
            converged = True
            break
        dai = -si * sj * daj
        alpha[i] += dai
        alpha[j] = aj_new
        g += (si * dai) * K[:, i] + (sj * daj) * K[:, j]
    v = s - g
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        b = float(np.mean(v[free]))
    else:
        up = np.where(s > 0, alpha < C, alpha > 0)
        low = np.where(s > 0, alpha > 0, alpha < C)
        hi = np.max(np.where(up, v, -np.inf)) if up.any() else 0.0
        lo = np.min(np.where(low, v, np.inf)) if low.any() else 0.0
        b = float((hi + lo) / 2.0)
    return alpha, b, converged, it


def train_svm(
    X,
    y,
    C: float = 1.0,
    kernel: str = "rbf",
    gamma="scale",
    tol: float = 1e-3,
    max_iter: Optional[int] = None,
    gram: Optional[np.ndarray] = None,
) -> SvmModel:
    """Fit a soft-margin SVM.  Raises ConvergenceError (model attached) on cap."""
    X, y = _check_xy(X, y)
    n = X.shape[0]
    s = np.where(y == 1, 1.0, -1.0)
    g = resolve_gamma(gamma, X)
    K = kernel_matrix(X, X, kernel, g) if gram is None else gram
    if max_iter is None:
        max_iter = max(20000, 200 * n)
    alpha, b, converged, it = _smo_solve(K, s, C, tol, max_iter)
    model = SvmModel(
        kernel=kernel, gamma=g, C=C, alpha=alpha, signs=s, sv=X, b=b, converged=converged, n_iter=it
    )
    if not converged:
        raise ConvergenceError(f"SMO hit the iteration cap ({max_iter})", model=model)
    return model


def svm_decision(model: SvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    keep = model.alpha > 1e-12
    if not keep.any():
        return np.full(X.shape[0], model.b)
    K = kernel_matrix(X, model.sv[keep], model.kernel, model.gamma)
    return K @ (model.alpha[keep] * model.signs[keep]) + model.b


def predict_svm(model: SvmModel, X) -> np.ndarray:
    return (svm_decision(model, X) > 0).astype(np.int64)


def dual_objective(model: SvmModel, K=None) -> float:
    """Dual value of the stored coefficients; handy for optimality checks."""
    if K is None:
        K = kernel_matrix(model.sv, model.sv, model.kernel, model.gamma)
    az = model.alpha * model.signs
    return float(model.alpha.sum() - 0.5 * az @ K @ az)


# -- common prediction entry -------------------------------------------------


def predict(model, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if isinstance(model, LogRegModel):
        return predict_logreg(model, X)
    if isinstance(model, ForestModel):
        return predict_forest(model, X)
    if isinstance(model, SvmModel):
        return predict_svm(model, X)
    raise TypeError(f"unknown model type {type(model)!r}")
