from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airtree.geometry import Point, Rect
from airtree.grid import TrainingSet, train_grid
from airtree.hybrid import (
    PATH_AI,
    PATH_FALLBACK,
    PATH_RTREE,
    AdversarialPredictor,
    DigestMismatchError,
    GridPredictor,
    HybridIndex,
    OraclePredictor,
    rtree_baseline,
    verify_filter,
)
from airtree.metrics import CostModel
from airtree.rtree import brute_force
from airtree.workload import features, label_matrix, profile_queries, profile_query

from conftest import four_box_tree, random_rects


class FixedRouter:
    def __init__(self, p_low):
        self.p_low = p_low
        self.meta = {}
        self.decision_cutoff = 0.5

    def prob_low(self, rect):
        return self.p_low


class SetPredictor:
    tree_digest = None

    def __init__(self, leaves):
        self.leaves = set(leaves)

    def predict(self, rect):
        return set(self.leaves)

    def covers(self, rect):
        return True


def oids(points):
    return sorted(p.oid for p in points)


def test_verify_filter_cases():
    pts = [Point(0.1, 0.1, 0), Point(0.5, 0.5, 1), Point(1.0, 0.3, 2)]
    assert verify_filter(pts, Rect(0, 0, 1, 1)) == pts
    assert verify_filter(pts, Rect(2, 2, 3, 3)) == []
    assert verify_filter(pts, Rect(0.5, 0.3, 1.0, 0.5)) == pts[1:]


def test_low_overlap_query_takes_rtree_path(uniform_points, uniform_tree):
    h = HybridIndex(uniform_tree, FixedRouter(0.9), OraclePredictor(uniform_tree))
    q = Rect(0.3, 0.3, 0.35, 0.36)
    out = h.query(q)
    assert out.path == PATH_RTREE
    assert oids(out.results) == oids(brute_force(uniform_points, q))


def test_oracle_predictor_reads_only_true_leaves(uniform_points, uniform_tree):
    h = HybridIndex(uniform_tree, FixedRouter(0.0), OraclePredictor(uniform_tree))
    for prof in profile_queries(uniform_tree, random_rects(300, seed=21, max_side=0.05)):
        out = h.query(prof.rect)
        if prof.result_count:
            assert out.path == PATH_AI and out.leaf_accesses == prof.true_count <= prof.visited_count
        assert oids(out.results) == oids(brute_force(uniform_points, prof.rect))


def test_fig1_style_oracle_halves_accesses():
    tree = four_box_tree()
    h = HybridIndex(tree, None, OraclePredictor(tree), routing="ai")
    q = Rect(0.9, 0.9, 2.1, 2.1)
    assert rtree_baseline(tree, q).leaf_accesses == 4
    out = h.query(q)
    assert out.leaf_accesses == 2 and oids(out.results) == [1, 6]


def test_adversarial_predictor_falls_back(uniform_points, uniform_tree):
    h = HybridIndex(uniform_tree, None, AdversarialPredictor(uniform_tree, wrong=3), routing="ai",
                    cost_model=CostModel(2.0))
    for q in random_rects(100, seed=22, max_side=0.05):
        truth = brute_force(uniform_points, q)
        out = h.query(q)
        assert oids(out.results) == oids(truth)
        if truth:
            full = uniform_tree.range_search(q).leaf_accesses
            assert out.path == PATH_FALLBACK
            assert (out.ai_accesses, out.fallback_accesses) == (3, full)
            assert out.leaf_accesses == out.ai_accesses + out.fallback_accesses
            assert out.simulated_io_ms == 2.0 * out.leaf_accesses


def test_fallback_disabled_returns_empty():
    tree = four_box_tree()
    h = HybridIndex(tree, None, SetPredictor({1}), routing="ai", fallback_enabled=False)
    out = h.query(Rect(0, 0, 1, 1))
    assert out.path == PATH_AI and out.results == []


def test_explain_matches_query_and_records_fallback():
    tree = four_box_tree()
    h = HybridIndex(tree, None, SetPredictor({1}), routing="ai")
    q = Rect(0, 0, 1, 1)
    trace = h.explain(q)
    out = h.query(q)
    assert trace.result_oids == oids(out.results) == [0, 1]
    assert trace.fallback_reason == "empty AI result" and trace.path == PATH_FALLBACK
    assert trace.leaves_read == ["1", "0"]


def grid_hybrid(tree):
    profiles = profile_queries(tree, random_rects(400, seed=23, max_side=0.05))
    data = TrainingSet(features(profiles), label_matrix(profiles, tree.leaf_count))
    index = train_grid(data, "dct", (2, 2), Rect(*tree.root.mbr), tree_digest=tree.id_digest)
    return HybridIndex(tree, FixedRouter(0.0), GridPredictor(index))


def test_out_of_bounds_query_routes_to_rtree(uniform_tree):
    h = grid_hybrid(uniform_tree)
    trace = h.explain(Rect(5, 5, 6, 6))
    assert not trace.in_bounds and trace.cells == {} and trace.path == PATH_RTREE and trace.result_oids == []
    inside = h.explain(Rect(0.1, 0.1, 0.12, 0.12))
    assert inside.in_bounds and inside.cells and inside.router_prob_low == 0.0


def test_digest_mismatch_rejected(uniform_tree):
    h = grid_hybrid(uniform_tree)
    h.ai.tree_digest = "stale"
    with pytest.raises(DigestMismatchError):
        h.check_digests()
    router = FixedRouter(0.0)
    router.meta["tree_digest"] = "stale"
    with pytest.raises(DigestMismatchError):
        HybridIndex(uniform_tree, router, OraclePredictor(uniform_tree))


def test_degraded_mode_switch(uniform_tree):
    h = HybridIndex(uniform_tree, FixedRouter(0.0), OraclePredictor(uniform_tree))
    h.set_routing("rtree")
    assert h.query(Rect(0.1, 0.1, 0.2, 0.2)).path == PATH_RTREE
    with pytest.raises(ValueError):
        h.set_routing("sideways")


@settings(max_examples=80, deadline=None)
@given(st.sets(st.integers(0, 120), max_size=12), st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.001, 0.1))
def test_precision_one_and_recall_bound(uniform_points, uniform_tree, leaves, x, y, side):
    q = Rect(x, y, x + side, y + side)
    h = HybridIndex(uniform_tree, None, SetPredictor(leaves), routing="ai", fallback_enabled=False)
    out = h.query(q)
    truth = {p.oid for p in brute_force(uniform_points, q)}
    assert all(q.contains_point(p.x, p.y) for p in out.results)
    assert out.result_oids <= truth
    prof = profile_query(uniform_tree, q)
    hits = sum(v for k, v in prof.per_leaf_hits.items() if k in leaves)
    assert len(out.results) == hits
    if set(prof.true_leaf_ids) <= leaves:
        assert out.result_oids == truth


def test_concurrent_queries_are_consistent(uniform_tree):
    h = HybridIndex(uniform_tree, None, OraclePredictor(uniform_tree), routing="ai")
    rects = random_rects(200, seed=24)
    serial = [oids(h.query(q).results) for q in rects]
    with ThreadPoolExecutor(4) as pool:
        parallel = list(pool.map(lambda q: oids(h.query(q).results), rects))
    assert parallel == serial


def test_construction_checks():
    tree = four_box_tree()
    with pytest.raises(ValueError):
        HybridIndex(tree, None, OraclePredictor(tree))
    with pytest.raises(ValueError):
        HybridIndex(tree, None, None, routing="ai")
    assert HybridIndex(tree, None, None, routing="rtree").query(Rect(0, 0, 1, 1)).path == PATH_RTREE
