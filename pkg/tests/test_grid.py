import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airtree.geometry import Rect
from airtree.grid import (
    DEFAULT_CANDIDATES,
    GridGeometry,
    TrainingSet,
    aggregate_predictions,
    assign_to_cells,
    fit_model,
    load_index,
    predict_aggregate,
    save_index,
    train_grid,
    tune_grid_size,
)
from airtree.workload import QueryProfile

UNIT = Rect(0, 0, 1, 1)


def small_rects(xy, size=0.01):
    return np.array([[x, y, x + size, y + size] for x, y in xy])


def cell_label_corpus(k, n=400, seed=0, n_labels=16):
    """Small queries labelled by the k x k cell they fall in."""
    rng = np.random.default_rng(seed)
    xy = rng.random((n, 2)) * 0.98
    X = small_rects(xy)
    cell = np.minimum((xy * k).astype(int), k - 1)
    Y = np.zeros((n, n_labels), dtype=np.uint8)
    Y[np.arange(n), cell[:, 1] * k + cell[:, 0]] = 1
    return TrainingSet(X, Y)


def as_profiles(data: TrainingSet):
    out = []
    for x, y in zip(data.X, data.Y):
        ids = tuple(int(j) for j in np.flatnonzero(y))
        out.append(QueryProfile(Rect(*x), None, len(ids), len(ids), len(ids), ids, {j: 1 for j in ids}))
    return out


def test_rect_inside_one_cell():
    g = GridGeometry(UNIT, 4, 4)
    assert assign_to_cells(g, Rect(0.05, 0.80, 0.1, 0.9)) == {(3, 0)}


def test_rect_spanning_two_by_two_block():
    g = GridGeometry(UNIT, 4, 4)
    assert assign_to_cells(g, Rect(0.2, 0.2, 0.3, 0.3)) == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_full_bounds_and_outside():
    g = GridGeometry(UNIT, 3, 5)
    assert assign_to_cells(g, UNIT) == set(g.cells()) and len(g.cells()) == 15
    assert assign_to_cells(g, Rect(2, 2, 3, 3)) == set()


def test_shared_edge_counts_both_cells():
    g = GridGeometry(UNIT, 2, 2)
    assert assign_to_cells(g, Rect(0.5, 0.1, 0.5, 0.1)) == {(0, 0), (0, 1)}


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.floats(0, 1), st.floats(0, 1))
def test_partition_cover(rows, cols, x, y):
    g = GridGeometry(UNIT, rows, cols)
    cells = assign_to_cells(g, Rect(x, y, x, y))
    assert cells
    assert all(g.cell_rect(*c).contains_point(x, y) for c in cells)
    assert len(cells) <= 4


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)))
def test_assignment_matches_brute_force(k, r):
    g = GridGeometry(UNIT, k, k)
    q = Rect(min(r[0], r[2]), min(r[1], r[3]), max(r[0], r[2]), max(r[1], r[3]))
    assert assign_to_cells(g, q) == {c for c in g.cells() if g.cell_rect(*c).intersects(q)}


def test_union_and_vote_aggregation():
    per_cell = {(0, 0): {1, 2}, (0, 1): {2, 3}}
    assert aggregate_predictions(per_cell, "union") == {1, 2, 3}
    assert aggregate_predictions(per_cell, "vote") == {2}
    assert aggregate_predictions({(0, 0): {4}}, "union") == {4}
    assert aggregate_predictions({(0, 0): None, (0, 1): None}) == set()
    assert aggregate_predictions({(0, 0): None, (0, 1): {5}}) == {5}


@given(st.lists(st.sets(st.integers(0, 9)), min_size=1, max_size=5), st.sets(st.integers(0, 9)))
def test_union_monotone(sets, extra):
    per_cell = {(0, i): s for i, s in enumerate(sets)}
    before = aggregate_predictions(per_cell)
    per_cell[(1, 0)] = extra
    assert before <= aggregate_predictions(per_cell)


@pytest.mark.parametrize("kind,params", [("dct", {}), ("rf", {"n_estimators": 5})])
def test_one_by_one_grid_equals_bare_model(kind, params):
    data = cell_label_corpus(4, seed=1)
    index = train_grid(data, kind, (1, 1), UNIT, params, seed=3)
    bare = fit_model(kind, data, params, seed=3)
    for row in small_rects(np.random.default_rng(2).random((50, 2))):
        assert index.predict(Rect(*row)) == bare.predict_set(Rect(*row), 0.5)


def test_disjoint_clusters_leave_two_cells_absent():
    rng = np.random.default_rng(4)
    xy = np.vstack([rng.random((30, 2)) * 0.3, 0.6 + rng.random((30, 2)) * 0.3])
    Y = np.zeros((60, 2), dtype=np.uint8)
    Y[:30, 0] = Y[30:, 1] = 1
    index = train_grid(TrainingSet(small_rects(xy), Y), "dct", (2, 2), UNIT)
    assert index.histogram == {(0, 0): 30, (1, 1): 30}
    assert set(index.cells) == {(0, 0), (1, 1)}
    assert predict_aggregate(index, Rect(0.7, 0.1, 0.8, 0.2)) == set()


def test_fine_grid_on_small_corpus():
    data = cell_label_corpus(2, n=25, seed=5)
    index = train_grid(data, "dct", (20, 20), UNIT)
    assert 0 < len(index.cells) < 100 and sum(index.histogram.values()) >= 25


def test_tuning_finds_the_separating_grid():
    data = cell_label_corpus(4, seed=6)
    val = as_profiles(cell_label_corpus(4, n=200, seed=7))
    best, report = tune_grid_size(data, val, "dct", [(2, 2), (4, 4)], UNIT, {"max_depth": 0})
    assert (best.geometry.rows, best.geometry.cols) == (4, 4)
    assert [(r["rows"], r["recall"]) for r in report] == [(2, 0.0), (4, 1.0)]


def test_tuning_tie_prefers_fewer_cells():
    data = cell_label_corpus(2, seed=8)
    val = as_profiles(cell_label_corpus(2, n=200, seed=9))
    best, report = tune_grid_size(data, val, "dct", [(4, 4), (2, 2)], UNIT, {"max_depth": 0})
    assert [r["recall"] for r in report] == [1.0, 1.0]
    assert best.geometry.rows == 2
    again, _ = tune_grid_size(data, val, "dct", [(4, 4), (2, 2)], UNIT, {"max_depth": 0})
    assert again.geometry.rows == 2


def test_single_candidate_and_report_for_both_kinds():
    data = cell_label_corpus(4, seed=10)
    val = as_profiles(cell_label_corpus(4, n=100, seed=11))
    for kind in ("dct", "rf"):
        best, report = tune_grid_size(data, val, kind, [(4, 4)], UNIT, {"n_estimators": 3} if kind == "rf" else {})
        assert len(report) == 1 and best.geometry.rows == 4 and "recall" in report[0]
    with pytest.raises(ValueError):
        tune_grid_size(data, val, "dct", [], UNIT)


def test_nn_kinds_default_to_single_model():
    assert DEFAULT_CANDIDATES["nn_bce"] == ((1, 1),) and DEFAULT_CANDIDATES["nn_custom"] == ((1, 1),)


def test_predict_many_matches_predict():
    data = cell_label_corpus(4, seed=12)
    index = train_grid(data, "rf", (3, 3), UNIT, {"n_estimators": 4}, cutoff=0.3)
    rects = [Rect(*r) for r in small_rects(np.random.default_rng(13).random((80, 2)), 0.2)]
    assert index.predict_many(rects) == [index.predict(r) for r in rects]


def test_manifest_round_trip(tmp_path):
    data = cell_label_corpus(4, seed=14)
    index = train_grid(data, "dct", (4, 4), UNIT, tree_digest="abc")
    path = save_index(index, tmp_path / "dct")
    back = load_index(path)
    assert back.histogram == index.histogram and back.tree_digest == "abc"
    rects = [Rect(*r) for r in small_rects(np.random.default_rng(15).random((40, 2)), 0.1)]
    assert [back.predict(r) for r in rects] == [index.predict(r) for r in rects]
    cell_file = next((tmp_path / "dct").glob("*_cell_*.airm"))
    cell_file.write_bytes(cell_file.read_bytes() + b"x")
    with pytest.raises(ValueError):
        load_index(path)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_grid(TrainingSet(np.zeros((0, 4)), np.zeros((0, 2))), "dct", (2, 2), UNIT)
