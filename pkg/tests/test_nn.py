import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airtree.geometry import Point, Rect
from airtree.grid import prediction_recall
from airtree.nn import (
    EPS,
    FeedForwardModel,
    NNConfig,
    TrainingDivergedError,
    bce_targets,
    build_incidence,
    custom_targets,
    loss_bce,
    loss_custom,
    prior_logits,
    train,
    weighted_loss,
)
from airtree.rtree import build_tree, tree_from_leaves
from airtree.workload import profile_query


def leaves_tree(sizes, max_entries=None, seed=0):
    """Leaf i holds sizes[i] points inside the unit box shifted by 2i along x."""
    rng = np.random.default_rng(seed)
    groups, oid = [], 0
    for i, k in enumerate(sizes):
        xy = rng.random((k, 2))
        groups.append([Point(2 * i + x, y, oid + j) for j, (x, y) in enumerate(xy)])
        oid += k
    return tree_from_leaves(groups, max_entries or max(*sizes, len(sizes)))


def test_two_leaf_four_object_incidence():
    A = build_incidence(leaves_tree([2, 2]))
    dense = A.to_dense()
    assert A.nnz == 4 and dense.shape == (4, 2)
    assert (dense.sum(axis=1) == 1).all()
    assert dense.tolist() == [[1, 0], [1, 0], [0, 1], [0, 1]]


def test_single_leaf_column_holds_every_object():
    A = build_incidence(leaves_tree([9]))
    assert A.column_counts().tolist() == [9]


def test_split_keeps_total_and_adds_column():
    pts = [Point(float(i), 0.0, i) for i in range(4)]
    tree = build_tree(pts, 4)
    before = build_incidence(tree)
    tree.insert(Point(4.0, 0.0, 4))
    after = build_incidence(tree)
    assert before.nnz + 1 == after.nnz == 5
    assert after.n == before.n + 1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.integers(2, 12), st.integers(0, 1000))
def test_incidence_totals_property(m, cap, seed):
    rng = np.random.default_rng(seed)
    pts = [Point(float(x), float(y), i) for i, (x, y) in enumerate(rng.random((m, 2)))]
    A = build_incidence(build_tree(pts, cap))
    assert A.to_dense().sum() == m
    assert A.column_counts().max() <= cap
    assert (A.to_dense().sum(axis=1) == 1).all()


def test_sparse_and_dense_products_agree():
    A = build_incidence(leaves_tree([3, 5, 2, 6], seed=1))
    rng = np.random.default_rng(0)
    x, g = rng.random(A.n), rng.random(A.m)
    D = A.to_dense()
    assert np.allclose(A.matvec(x), D @ x)
    assert np.allclose(A.rmatvec(g), D.T @ g)
    assert np.allclose(A.to_sparse() @ x, D @ x)
    with pytest.raises(ValueError):
        A.matvec(np.ones(A.n + 1))


def test_bce_perfect_and_uniform():
    t = np.array([1.0, 0.0, 1.0])
    assert loss_bce(t, t) <= -math.log(1 - EPS) + 1e-12
    assert loss_bce(np.full(3, 0.5), t) == pytest.approx(math.log(2))


def test_bce_hand_computed():
    p, t = [0.2, 0.7, 0.9], [0.0, 1.0, 1.0]
    want = sum(-(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)) for pi, ti in zip(p, t)) / 3
    assert loss_bce(np.array(p), np.array(t)) == pytest.approx(want, rel=1e-12)


def test_custom_loss_two_leaf_query_is_epsilon_level():
    A = build_incidence(leaves_tree([2, 2]))
    t = A.object_vector([0, 1])
    assert loss_custom(np.array([1.0, 0.0]), t, A) <= -math.log(1 - EPS) + 1e-12


def recall_asymmetry_setup():
    tree = leaves_tree([5, 10, 15], max_entries=16)
    A = build_incidence(tree)
    prof = profile_query(tree, Rect(-1, -1, 10, 10))
    t = A.object_vector(range(30))
    return A, prof, t


def test_custom_loss_prefers_the_larger_leaf():
    A, prof, t = recall_asymmetry_setup()
    assert prof.per_leaf_hits == {0: 5, 1: 10, 2: 15}
    only_l1, only_l3 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    assert loss_custom(only_l3, t, A) < loss_custom(only_l1, t, A)
    truth = np.ones(3)
    assert loss_bce(only_l1, truth) == pytest.approx(loss_bce(only_l3, truth), rel=1e-12)
    assert prediction_recall({0}, prof.per_leaf_hits, 30) == pytest.approx(5 / 30)
    assert prediction_recall({2}, prof.per_leaf_hits, 30) == pytest.approx(15 / 30)


def test_single_leaf_custom_loss_is_soft_label_bce():
    A = build_incidence(leaves_tree([10]))
    t = A.object_vector([0, 1, 2, 3])
    p = 0.3
    want = -(0.4 * math.log(p) + 0.6 * math.log(1 - p))
    assert loss_custom(np.array([p]), t, A) == pytest.approx(want, rel=1e-12)


def test_shared_form_matches_direct_losses():
    A = build_incidence(leaves_tree([3, 4, 2, 5], seed=2))
    rng = np.random.default_rng(1)
    P = rng.uniform(0.05, 0.95, (3, A.n))
    Y = (rng.random((3, A.n)) < 0.5).astype(float)
    assert np.allclose(weighted_loss(P, bce_targets(Y)), [loss_bce(p, y) for p, y in zip(P, Y)])
    vecs = [(rng.random(A.m) < 0.4).astype(float) for _ in range(3)]
    visited = [[0, 2], [1, 2, 3], [3]]
    T = custom_targets(vecs, visited, A)
    direct = [loss_custom(p, t, A, v) for p, t, v in zip(P, vecs, visited)]
    assert np.allclose(weighted_loss(P, T), direct)
    T_all = custom_targets(vecs, None, A)
    assert np.allclose(weighted_loss(P, T_all), [loss_custom(p, t, A) for p, t in zip(P, vecs)])


def _instance(seed):
    rng = np.random.default_rng(seed)
    n_leaves = int(rng.integers(1, 7))
    sizes = rng.multinomial(int(rng.integers(n_leaves, 21)) - n_leaves, np.ones(n_leaves) / n_leaves) + 1
    tree = leaves_tree(sizes.tolist(), seed=seed)
    A = build_incidence(tree)
    hidden = tuple(int(h) for h in rng.integers(1, 9, int(rng.integers(1, 4))))
    model = FeedForwardModel.initialize(4, hidden, A.n, rng)
    model.mean, model.std = rng.random(4), rng.uniform(0.5, 2, 4)
    B = 3
    X = rng.random((B, 4)) * 2 * n_leaves
    vecs = [(rng.random(A.m) < 0.5).astype(float) for _ in range(B)]
    visited = [sorted(set(rng.integers(0, A.n, 3).tolist())) for _ in range(B)]
    Y = (rng.random((B, A.n)) < 0.5).astype(float)
    return model, X, A, vecs, visited, Y


def _finite_difference_check(model, X, T, oracle, h=1e-6):
    _, gw, gb = model.loss_and_grads(X, T)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                keep = p[idx]
                p[idx] = keep + h
                up = oracle()
                p[idx] = keep - h
                down = oracle()
                p[idx] = keep
                num = (up - down) / (2 * h)
                err = abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6)
                worst = max(worst, err)
    return worst


def _no_kinks(model, X, margin=1e-3):
    h = (X - model.mean) / model.std
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w + b
        if (np.abs(z) < margin).any():
            return False
        h = np.maximum(z, 0)
    return True


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    s = seed
    while True:
        model, X, A, vecs, visited, Y = _instance(s)
        if _no_kinks(model, X):
            break
        s += 1000
    bce = bce_targets(Y)
    worst_bce = _finite_difference_check(
        model, X, bce, lambda: float(np.mean([loss_bce(p, y) for p, y in zip(model.forward(X)[0], Y)])))
    custom = custom_targets(vecs, visited, A)
    worst_custom = _finite_difference_check(
        model, X, custom,
        lambda: float(np.mean([loss_custom(p, t, A, v) for p, t, v in zip(model.forward(X)[0], vecs, visited)])))
    assert worst_bce < 1e-4 and worst_custom < 1e-4


def test_prior_bias_matches_label_rates():
    Y = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0], [1, 0, 0]], dtype=float)
    b = prior_logits(bce_targets(Y))
    rates = 1 / (1 + np.exp(-b))
    assert np.allclose(rates, [0.75, 0.25, 1e-4])


def test_overfits_single_example():
    Y = np.array([[1, 0, 1, 1, 0, 0]], dtype=float)
    X = np.array([[0.1, 0.2, 0.3, 0.4]])
    cfg = NNConfig(hidden=(16, 16), learning_rate=1e-2, epochs=200, batch_size=1)
    model = train(X, bce_targets(Y), "bce", cfg)
    assert model.history["train"][-1] < 0.05
    assert model.predict_set(Rect(0.1, 0.2, 0.3, 0.4)) == {0, 2, 3}


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    X = rng.random((40, 4))
    Y = (rng.random((40, 5)) < 0.3).astype(float)
    cfg = NNConfig(hidden=(8,), epochs=5, seed=3)
    a, b = train(X, bce_targets(Y), config=cfg), train(X, bce_targets(Y), config=cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights + a.biases, b.weights + b.biases))


def test_training_errors():
    Y = np.ones((2, 2))
    with pytest.raises(ValueError):
        train(np.zeros((2, 4)), bce_targets(Y), "hinge")
    with pytest.raises(TrainingDivergedError), np.errstate(invalid="ignore"):
        train(np.array([[np.inf, 0, 0, 0], [0, 0, 0, 0]]), bce_targets(Y), config=NNConfig(hidden=(2,), epochs=1))
