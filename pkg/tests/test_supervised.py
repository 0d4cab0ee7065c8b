"""Supervised detector tests.

Dual routes: logistic regression is checked against scipy's BFGS on the very
same loss function, the SVM against KKT conditions and random feasible dual
points, and the tree splitter against hand-computed Gini splits.
"""

import numpy as np
import pytest
import scipy.optimize

from linkscope.supervised import (
    ConvergenceError,
    ForestModel,
    Tree,
    _logreg_loss_grad,
    dual_objective,
    forest_votes,
    grow_tree,
    kernel_matrix,
    logreg_proba,
    pairwise_sq_dists,
    predict,
    predict_forest,
    predict_svm,
    resolve_gamma,
    train_forest,
    train_logreg,
    train_svm,
    tree_predict,
)


def blobs(n=80, d=3, gap=2.0, seed=42):
    rng = np.random.default_rng(seed)
    half = n // 2
    X = rng.normal(size=(n, d))
    X[half:] += gap
    y = np.repeat([0, 1], (half, n - half))
    return X, y


def xor_data(n=200, seed=13):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(np.int64)
    return X, y


# -- logistic regression ------------------------------------------------------


def test_logreg_gradient_matches_finite_differences():
    X, y = blobs(n=30)
    theta = np.linspace(-0.5, 0.5, X.shape[1] + 1)
    _, grad = _logreg_loss_grad(theta, X, y, C=0.7)
    eps = 1e-6
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += eps
        dn[i] -= eps
        num = (_logreg_loss_grad(up, X, y, 0.7)[0] - _logreg_loss_grad(dn, X, y, 0.7)[0]) / (2 * eps)
        assert abs(grad[i] - num) < 1e-5 * max(1.0, abs(num))


@pytest.mark.parametrize("C", [0.01, 1.0])
def test_logreg_agrees_with_scipy_bfgs(C):
    X, y = blobs()
    model = train_logreg(X, y, C=C)
    assert model.converged
    res = scipy.optimize.minimize(
        _logreg_loss_grad,
        np.zeros(X.shape[1] + 1),
        args=(X, y, C),
        jac=True,
        method="BFGS",
        options={"gtol": 1e-8},
    )
    ours = np.append(model.w, model.b)
    loss_ours = _logreg_loss_grad(ours, X, y, C)[0]
    # same strictly convex objective, so both land on the unique minimum
    assert loss_ours <= res.fun + 1e-6 * (1 + abs(res.fun))
    np.testing.assert_allclose(ours, res.x, atol=1e-2)
    probe = np.random.default_rng(0).normal(size=(50, X.shape[1])) + 1.0
    assert np.array_equal(predict(model, probe), (res.x[:-1] @ probe.T + res.x[-1] > 0).astype(int))


def test_logreg_separable_and_tie_rule():
    X, y = blobs(gap=6.0)
    model = train_logreg(X, y, C=100.0)
    assert np.array_equal(predict(model, X), y)
    model.w[:] = 0.0
    model.b = 0.0
    assert logreg_proba(model, X[:3]).tolist() == [0.5, 0.5, 0.5]
    assert predict(model, X[:3]).tolist() == [0, 0, 0]  # exact 0.5 -> normal


def test_logreg_stays_finite_on_extreme_features():
    X, y = blobs(gap=500.0)
    model = train_logreg(X, y, C=100.0)
    p = logreg_proba(model, X * 10)
    assert np.isfinite(p).all()
    assert np.array_equal(predict(model, X), y)


def test_training_input_validation():
    with pytest.raises(ValueError):
        train_logreg(np.zeros((4, 2)), [0, 0, 0, 0])  # one class
    with pytest.raises(ValueError):
        train_logreg(np.zeros((4, 2)), [0, 1, 2, 0])  # not 0/1
    with pytest.raises(ValueError):
        train_logreg(np.zeros((4, 2)), [0, 1, 0])  # length mismatch


# -- CART and bagging ---------------------------------------------------------


def test_tree_frozen_midpoint_split():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    tree = grow_tree(X, y)
    assert tree.root_feature == 0
    assert tree.root_threshold == 2.5
    assert np.array_equal(tree_predict(tree, X), y)
    assert tree_predict(tree, [[2.5]])[0] == 0  # boundary goes left


def test_tree_split_tie_prefers_lowest_feature_index():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    X = np.hstack([X, X])  # identical columns, identical Gini everywhere
    tree = grow_tree(X, np.array([0, 0, 1, 1]))
    assert tree.root_feature == 0


def test_tree_reaches_purity_on_distinct_rows():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 3))
    y = (rng.random(40) < 0.4).astype(np.int64)
    tree = grow_tree(X, y)
    assert np.array_equal(tree_predict(tree, X), y)


def test_tree_leaf_tie_predicts_normal():
    X = np.array([[1.0], [1.0]])  # unsplittable
    tree = grow_tree(X, np.array([0, 1]))
    assert tree.feature[0] == -1
    assert tree.pred[0] == 0


def test_forest_learns_xor_and_is_deterministic():
    X, y = xor_data()
    Xt, yt = xor_data(n=150, seed=99)
    model = train_forest(X, y, n_estimators=30, seed=5)
    assert np.mean(predict_forest(model, X) == y) >= 0.99
    assert np.mean(predict_forest(model, Xt) == yt) >= 0.9
    again = train_forest(X, y, n_estimators=30, seed=5)
    assert np.array_equal(forest_votes(model, Xt), forest_votes(again, Xt))
    other = train_forest(X, y, n_estimators=30, seed=6)
    assert not np.array_equal(forest_votes(model, Xt), forest_votes(other, Xt))


def test_forest_even_vote_split_predicts_normal():
    leaf = lambda cls: Tree(
        feature=np.array([-1]),
        threshold=np.array([0.0]),
        left=np.array([-1]),
        right=np.array([-1]),
        pred=np.array([cls]),
    )
    model = ForestModel(trees=[leaf(0), leaf(1)], n_estimators=2, seed=0)
    assert predict_forest(model, np.zeros((3, 1))).tolist() == [0, 0, 0]


def test_forest_rejects_bad_estimator_count():
    X, y = blobs(n=10)
    with pytest.raises(ValueError):
        train_forest(X, y, n_estimators=0)


# -- kernels ------------------------------------------------------------------


def test_pairwise_sq_dists_matches_loops():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 3))
    B = rng.normal(size=(4, 3))
    got = pairwise_sq_dists(A, B)
    want = np.array([[np.sum((a - b) ** 2) for b in B] for a in A])
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_resolve_gamma_rules():
    X = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert resolve_gamma("auto", X) == 0.5
    assert resolve_gamma("scale", X) == pytest.approx(1.0 / (2 * X.var()))
    assert resolve_gamma(0.25, X) == 0.25
    assert resolve_gamma("scale", np.ones((3, 2))) == 0.5  # zero variance fallback
    with pytest.raises(ValueError):
        resolve_gamma(-1.0, X)


def test_kernel_matrix_forms():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(kernel_matrix(A, A, "linear", 1.0), A @ A.T)
    rbf = kernel_matrix(A, A, "rbf", 0.5)
    assert rbf[0, 0] == 1.0
    assert rbf[0, 1] == pytest.approx(np.exp(-0.5 * 5.0))
    with pytest.raises(ValueError):
        kernel_matrix(A, A, "poly", 1.0)


# -- SVM ----------------------------------------------------------------------


def random_feasible_alpha(rng, s, C):
    # box sample, then shrink one side so the equality constraint holds
    a = rng.uniform(0, C, size=s.size)
    pos = s > 0
    P, N = a[pos].sum(), a[~pos].sum()
    if P > N:
        a[pos] *= N / P
    elif N > P:
        a[~pos] *= P / N
    return a


def test_svm_kkt_and_dual_optimality():
    X, y = blobs(n=60, gap=2.5, seed=8)
    C = 1.0
    model = train_svm(X, y, C=C, kernel="rbf", gamma="scale")
    assert model.converged
    assert np.all(model.alpha >= -1e-9)
    assert np.all(model.alpha <= C + 1e-9)
    assert abs(np.dot(model.alpha, model.signs)) < 1e-6
    K = kernel_matrix(X, X, model.kernel, model.gamma)
    best = dual_objective(model, K)
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = random_feasible_alpha(rng, model.signs, C)
        az = a * model.signs
        other = a.sum() - 0.5 * az @ K @ az
        assert other <= best + 1e-6


def test_svm_separable_linear_predictions():
    X, y = blobs(gap=5.0, seed=21)
    model = train_svm(X, y, C=10.0, kernel="linear")
    assert np.array_equal(predict_svm(model, X), y)
    assert model.sv_count() < X.shape[0]  # margin sparsity


def test_svm_rbf_solves_xor():
    X, y = xor_data(n=120, seed=4)
    model = train_svm(X, y, C=100.0, kernel="rbf", gamma=5.0)
    assert np.mean(predict_svm(model, X) == y) >= 0.99


def test_svm_gram_kwarg_reproduces_default_fit():
    X, y = blobs(n=40, seed=15)
    plain = train_svm(X, y, C=1.0, kernel="rbf", gamma="scale")
    K = kernel_matrix(X, X, "rbf", resolve_gamma("scale", X))
    primed = train_svm(X, y, C=1.0, kernel="rbf", gamma="scale", gram=K)
    assert plain.alpha.tobytes() == primed.alpha.tobytes()
    assert plain.b == primed.b


def test_svm_convergence_error_carries_model():
    X, y = blobs(n=60, gap=0.3, seed=2)  # heavy overlap, slow SMO
    with pytest.raises(ConvergenceError) as exc_info:
        train_svm(X, y, C=100.0, kernel="rbf", gamma="scale", max_iter=3)
    model = exc_info.value.model
    assert model is not None
    assert not model.converged
    assert model.n_iter == 3
    assert predict_svm(model, X).shape == (60,)


# -- dispatcher ---------------------------------------------------------------


def test_predict_dispatch_and_edge_cases():
    X, y = blobs(n=30)
    lr = train_logreg(X, y)
    assert predict(lr, np.zeros((0, X.shape[1]))).shape == (0,)
    with pytest.raises(TypeError):
        predict(object(), X)
