"""Routed query processing over an R-tree plus a learned leaf predictor."""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from .geometry import Point, Rect
from .metrics import CostModel
from .rtree import RTree
from .trees import LOW_OVERLAP, BinaryRouterModel

PATH_AI = "ai"
PATH_RTREE = "rtree"
PATH_FALLBACK = "ai_then_fallback"
ROUTING_MODES = ("router", "ai", "rtree")


class DigestMismatchError(ValueError):
    pass


class LeafPredictor(Protocol):
    tree_digest: str | None

    def predict(self, rect: Rect) -> set[int]: ...

    def covers(self, rect: Rect) -> bool: ...


class ReadWriteLock:
    """Many concurrent readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class GridPredictor:
    """Adapter giving a grid index the predictor interface."""

    def __init__(self, index):
        self.index = index
        self.tree_digest = index.tree_digest
        self.router_cutoff = index.router_cutoff

    def predict(self, rect: Rect) -> set[int]:
        return self.index.predict(rect)

    def covers(self, rect: Rect) -> bool:
        return self.index.geometry.bounds.intersects(rect)

    def cell_predictions(self, rect: Rect):
        return self.index.cell_predictions(rect)


class OraclePredictor:
    """Predicts exactly the true leaves by searching the tree itself."""

    def __init__(self, tree: RTree):
        self.tree = tree

    @property
    def tree_digest(self) -> str | None:
        return self.tree.id_digest

    def predict(self, rect: Rect) -> set[int]:
        return set(self.tree.range_search(rect).true_leaf_ids)

    def covers(self, rect: Rect) -> bool:
        return True


class AdversarialPredictor:
    """Always predicts leaves holding no result, so the AI path comes back empty."""

    def __init__(self, tree: RTree, wrong: int = 1):
        self.tree = tree
        self.wrong = wrong

    @property
    def tree_digest(self) -> str | None:
        return self.tree.id_digest

    def predict(self, rect: Rect) -> set[int]:
        true = self.tree.range_search(rect).true_leaf_ids
        out = set()
        for lid in range(self.tree.leaf_count):
            if lid not in true:
                out.add(lid)
                if len(out) >= self.wrong:
                    break
        return out

    def covers(self, rect: Rect) -> bool:
        return True


def verify_filter(entries: Iterable[Point], q: Rect) -> list[Point]:
    """Entries inside the closed rectangle ``q``, order preserved."""
    return [p for p in entries if q.x_min <= p.x <= q.x_max and q.y_min <= p.y <= q.y_max]


@dataclass
class QueryOutcome:
    results: list[Point]
    path: str
    leaf_accesses: int
    ai_accesses: int = 0
    fallback_accesses: int = 0
    predicted_leaf_ids: frozenset = frozenset()
    wall_cpu_ms: float = 0.0
    simulated_io_ms: float = 0.0
    router_prob_low: float | None = None
    recall_vs_truth: float | None = None

    @property
    def result_oids(self) -> set[int]:
        return {p.oid for p in self.results}

    def to_record(self) -> dict:
        return {
            "path": self.path,
            "result_count": len(self.results),
            "leaf_accesses": self.leaf_accesses,
            "ai_accesses": self.ai_accesses,
            "fallback_accesses": self.fallback_accesses,
            "predicted_leaf_ids": sorted(self.predicted_leaf_ids),
            "simulated_io_ms": self.simulated_io_ms,
            "recall": self.recall_vs_truth,
        }


@dataclass
class RoutingTrace:
    rect: Rect
    routing_mode: str
    in_bounds: bool
    router_prob_low: float | None = None
    decision: str | None = None
    cells: dict = field(default_factory=dict)
    predicted: list[int] = field(default_factory=list)
    leaves_read: list[str] = field(default_factory=list)
    ai_result_count: int | None = None
    fallback_reason: str | None = None
    path: str = PATH_RTREE
    result_oids: list[int] = field(default_factory=list)


class HybridIndex:
    """Router + learned leaf predictor + R-tree with empty-result fallback."""

    def __init__(self, tree: RTree, router: BinaryRouterModel | None, ai: LeafPredictor | None,
                 fallback_enabled: bool = True, cost_model: CostModel | None = None, routing: str = "router",
                 check_digest: bool = True, decision_cutoff: float | None = None):
        if routing not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}")
        if routing == "router" and router is None:
            raise ValueError("router routing needs a router model")
        if routing != "rtree" and ai is None:
            raise ValueError("AI routing needs a leaf predictor")
        self.tree = tree
        self.router = router
        self.ai = ai
        self.fallback_enabled = fallback_enabled
        self.cost_model = cost_model or CostModel()
        self.routing = routing
        if decision_cutoff is None:
            decision_cutoff = getattr(ai, "router_cutoff", None)
        if decision_cutoff is None and router is not None:
            decision_cutoff = router.decision_cutoff
        self.decision_cutoff = decision_cutoff
        self.lock = ReadWriteLock()
        if check_digest:
            self.check_digests()

    def check_digests(self) -> None:
        want = self.tree.id_digest
        if self.router is not None:
            got = self.router.meta.get("tree_digest")
            if got is not None and got != want:
                raise DigestMismatchError("router was trained against a different leaf-ID assignment")
        if self.ai is not None and self.ai.tree_digest is not None and self.ai.tree_digest != want:
            raise DigestMismatchError("leaf predictor was trained against a different leaf-ID assignment")

    def set_routing(self, mode: str) -> None:
        if mode not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}")
        self.routing = mode

    def query(self, q: Rect) -> QueryOutcome:
        with self.lock.read():
            return self._execute(q, None)

    def explain(self, q: Rect) -> RoutingTrace:
        trace = RoutingTrace(q, self.routing, in_bounds=False)
        with self.lock.read():
            self._execute(q, trace)
        return trace

    def _execute(self, q: Rect, trace: RoutingTrace | None) -> QueryOutcome:
        t0 = time.perf_counter()
        in_bounds = self.ai is not None and self.ai.covers(q)
        prob = None
        if self.routing == "rtree" or not in_bounds:
            use_ai = False
        elif self.routing == "ai":
            use_ai = True
        else:
            prob = self.router.prob_low(q)
            use_ai = prob < self.decision_cutoff
        if trace is not None:
            trace.in_bounds = in_bounds
            trace.router_prob_low = prob
            if prob is not None:
                trace.decision = LOW_OVERLAP if not use_ai else "high_overlap"
        if not use_ai:
            st = self.tree.range_search(q)
            out = QueryOutcome(st.results, PATH_RTREE, st.leaf_accesses, router_prob_low=prob)
            if trace is not None:
                trace.leaves_read = list(st.touched)
        else:
            predicted = self.ai.predict(q)
            if trace is not None and hasattr(self.ai, "cell_predictions"):
                trace.cells = {c: (None if s is None else sorted(s)) for c, s in self.ai.cell_predictions(q).items()}
            results: list[Point] = []
            seen: set[int] = set()
            accesses = 0
            for lid in sorted(predicted):
                if not 0 <= lid < self.tree.leaf_count:
                    continue
                owner, hops = lid, 0
                for node in self.tree.leaf(lid).chain():
                    if node.is_overflow:
                        hops += 1
                    else:
                        owner, hops = node.leaf_id, 0
                    if id(node) in seen:
                        continue
                    seen.add(id(node))
                    accesses += 1
                    results.extend(node.matching(q))
                    if trace is not None:
                        trace.leaves_read.append(f"{owner}" + "'" * hops)
            out = QueryOutcome(results, PATH_AI, accesses, ai_accesses=accesses,
                               predicted_leaf_ids=frozenset(predicted), router_prob_low=prob)
            if trace is not None:
                trace.predicted = sorted(predicted)
                trace.ai_result_count = len(results)
            if not results and self.fallback_enabled:
                st = self.tree.range_search(q)
                out.results = st.results
                out.path = PATH_FALLBACK
                out.fallback_accesses = st.leaf_accesses
                out.leaf_accesses = accesses + st.leaf_accesses
                if trace is not None:
                    trace.fallback_reason = "empty AI result"
                    trace.leaves_read.extend(st.touched)
        out.wall_cpu_ms = (time.perf_counter() - t0) * 1000.0
        out.simulated_io_ms = self.cost_model.io_ms(out.leaf_accesses)
        if trace is not None:
            trace.path = out.path
            trace.result_oids = sorted(p.oid for p in out.results)
        return out

    def run_batch(self, rects: Iterable[Rect]) -> list[QueryOutcome]:
        return [self.query(q) for q in rects]


def rtree_baseline(tree: RTree, q: Rect, cost_model: CostModel | None = None) -> QueryOutcome:
    """Plain R-tree search timed and costed like a hybrid outcome."""
    cost_model = cost_model or CostModel()
    t0 = time.perf_counter()
    st = tree.range_search(q)
    out = QueryOutcome(st.results, PATH_RTREE, st.leaf_accesses)
    out.wall_cpu_ms = (time.perf_counter() - t0) * 1000.0
    out.simulated_io_ms = cost_model.io_ms(out.leaf_accesses)
    return out
