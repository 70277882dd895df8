"""Inserts, logical deletes, updates and retraining over a hybrid index."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Point, Rect
from .hybrid import PATH_FALLBACK, HybridIndex, RoutingTrace
from .rtree import DuplicateKeyError, Node, RTree, UnknownObjectError

log = logging.getLogger(__name__)

INSERT_STRATEGIES = ("in_place", "out_of_place")
OVERFLOW_MODES = ("full", "always")
TRIGGERS = ("manual", "threshold")


class ScriptError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MutationPolicy:
    """How inserts are placed and when retraining fires.

    ``overflow_when="full"`` sends an out-of-place insert to an overflow leaf
    only when the target leaf is at capacity; ``"always"`` sends every
    out-of-place insert there.
    """

    insert_strategy: str = "in_place"
    overflow_when: str = "full"
    retrain_trigger: str = "manual"
    fallback_limit: float = 0.2
    window: int = 1000
    chain_cap: int = 4
    delete_strategy: str = "logical"

    def __post_init__(self):
        if self.insert_strategy not in INSERT_STRATEGIES:
            raise ValueError(f"insert_strategy must be one of {INSERT_STRATEGIES}")
        if self.overflow_when not in OVERFLOW_MODES:
            raise ValueError(f"overflow_when must be one of {OVERFLOW_MODES}")
        if self.retrain_trigger not in TRIGGERS:
            raise ValueError(f"retrain_trigger must be one of {TRIGGERS}")
        if self.delete_strategy != "logical":
            raise ValueError("only logical deletes are supported")
        if not 0 <= self.fallback_limit <= 1:
            raise ValueError("fallback_limit must be in [0, 1]")
        if self.window < 1 or self.chain_cap < 1:
            raise ValueError("window and chain_cap must be positive")


@dataclass
class MutationRecord:
    op: str
    oid: int
    x: float
    y: float
    leaf_id: int | None
    case: int | None = None
    overlap: bool | None = None
    split: bool = False
    overflow: bool = False
    overflow_created: bool = False
    new_leaf_id: int | None = None
    flagged: bool = False
    logical_oid: int | None = None

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class MutationLog:
    records: list[MutationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, rec: MutationRecord) -> None:
        self.records.append(rec)

    def case_histogram(self) -> dict[int, int]:
        hist = {c: 0 for c in (1, 2, 3, 4)}
        for r in self.records:
            if r.case is not None:
                hist[r.case] += 1
        return hist

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_record(), sort_keys=True, separators=(",", ":")) + "\n")


def classify(tree: RTree, leaf: Node, x: float, y: float) -> tuple[bool, bool]:
    """(overlap, split) for inserting (x, y) into ``leaf``.

    Overlap: the leaf MBR grown by the point intersects another leaf MBR.
    Split: the leaf already holds ``max_entries`` entries.
    """
    m = leaf.mbr
    post = (x, y, x, y) if m is None else (min(m[0], x), min(m[1], y), max(m[2], x), max(m[3], y))
    others = np.array([n.mbr for n in tree.leaves() if n is not leaf and n.mbr is not None]).reshape(-1, 4)
    hit = (others[:, 0] <= post[2]) & (others[:, 2] >= post[0]) & (others[:, 1] <= post[3]) & (others[:, 3] >= post[1])
    return bool(hit.any()), len(leaf.entries) >= tree.max_entries


def case_of(overlap: bool, split: bool) -> int:
    return 1 + 2 * overlap + split


def primary_of(tree: RTree, node: Node) -> Node:
    if not node.is_overflow:
        return node
    for leaf in tree.leaves():
        if any(o is node for o in leaf.overflow_run()):
            return leaf
    raise UnknownObjectError("overflow leaf has no primary")


class MutableIndex:
    """Single-writer mutation front end over a :class:`HybridIndex`.

    Updates re-insert under a fresh physical oid; the caller keeps using the
    original (logical) oid, which :meth:`resolve` maps to the current entry.
    ``factory`` builds a retrained index from a compacted tree.
    """

    def __init__(self, hybrid: HybridIndex, policy: MutationPolicy | None = None,
                 factory: Callable[[RTree, HybridIndex], HybridIndex] | None = None):
        self.hybrid = hybrid
        self.policy = policy or MutationPolicy()
        self.factory = factory
        self.log = MutationLog()
        self.flagged: set[int] = set()
        self.retrains: list[dict] = []
        self._window: deque[bool] = deque(maxlen=self.policy.window)
        self._alias: dict[int, int] = {}
        self._logical: dict[int, int] = {}
        self._next_oid = max(hybrid.tree._where, default=-1) + 1

    @property
    def tree(self) -> RTree:
        return self.hybrid.tree

    def resolve(self, oid: int) -> int:
        return self._alias.get(oid, oid)

    def logical(self, physical: int) -> int:
        return self._logical.get(physical, physical)

    def next_oid(self) -> int:
        return self._next_oid

    # -- mutations --------------------------------------------------------

    def insert_point(self, p: Point) -> MutationRecord:
        with self.hybrid.lock.write():
            if p.oid in self._alias:
                raise DuplicateKeyError(f"oid {p.oid} already present")
            rec = self._insert(p)
        self.log.append(rec)
        return rec

    def delete_point(self, oid: int) -> MutationRecord:
        with self.hybrid.lock.write():
            rec = self._delete(oid)
        self.log.append(rec)
        return rec

    def update_point(self, oid: int, x: float, y: float) -> list[MutationRecord]:
        """Delete then insert, both under one write lock."""
        with self.hybrid.lock.write():
            gone = self._delete(oid)
            fresh = Point(x, y, self._next_oid)
            added = self._insert(fresh)
            old_phys = gone.oid
            self._logical.pop(old_phys, None)
            self._alias[oid] = fresh.oid
            self._logical[fresh.oid] = oid
        gone.op = added.op = "update"
        gone.logical_oid = added.logical_oid = oid
        self.log.append(gone)
        self.log.append(added)
        return [gone, added]

    def _insert(self, p: Point) -> MutationRecord:
        tree = self.tree
        if p.oid in tree:
            raise DuplicateKeyError(f"oid {p.oid} already present")
        leaf = tree.choose_leaf(p.x, p.y)
        overlap, full = classify(tree, leaf, p.x, p.y)
        rec = MutationRecord("insert", p.oid, p.x, p.y, leaf.leaf_id, case_of(overlap, full), overlap)
        pol = self.policy
        if pol.insert_strategy == "out_of_place" and (full or pol.overflow_when == "always"):
            _, created = tree.add_overflow(leaf, p)
            rec.overflow = True
            rec.overflow_created = created
            if sum(1 for _ in leaf.overflow_run()) > pol.chain_cap:
                rec.flagged = True
                if leaf.leaf_id is not None:
                    self.flagged.add(leaf.leaf_id)
        else:
            res = tree.insert_into(leaf, p)
            if res.split:
                rec.split = True
                rec.new_leaf_id = res.new_leaf.leaf_id
        self._next_oid = max(self._next_oid, p.oid + 1)
        return rec

    def _delete(self, oid: int) -> MutationRecord:
        tree = self.tree
        phys = self.resolve(oid)
        if phys not in tree:
            raise UnknownObjectError(f"unknown oid {oid}")
        node = tree.mark_deleted(phys)
        p = next(e for e in node.entries if e.oid == phys)
        return MutationRecord("delete", phys, p.x, p.y, primary_of(tree, node).leaf_id, logical_oid=oid)

    # -- queries and retraining -------------------------------------------

    def query(self, q: Rect):
        out = self.hybrid.query(q)
        self._observe(out.path)
        return out

    def query_logical(self, q: Rect) -> list[int]:
        """Sorted logical oids of the result, mapped under the same read lock as the search."""
        hybrid = self.hybrid
        with hybrid.lock.read():
            out = hybrid.query(q)
            oids = sorted(self.logical(p.oid) for p in out.results)
        self._observe(out.path)
        return oids

    def explain(self, q: Rect) -> RoutingTrace:
        trace = self.hybrid.explain(q)
        self._observe(trace.path)
        return trace

    def _observe(self, path: str) -> None:
        self._window.append(path == PATH_FALLBACK)
        if self.retrain_due and self.factory is not None:
            log.info("fallback fraction %.3f over %d queries; retraining", self.fallback_fraction, len(self._window))
            self.retrain()

    @property
    def fallback_fraction(self) -> float:
        return float(np.mean(self._window)) if self._window else 0.0

    @property
    def retrain_due(self) -> bool:
        pol = self.policy
        return (pol.retrain_trigger == "threshold" and len(self._window) == pol.window
                and self.fallback_fraction > pol.fallback_limit)

    def retrain(self, factory: Callable[[RTree, HybridIndex], HybridIndex] | None = None) -> HybridIndex:
        """Compact, rebuild models aside, then swap.

        The old index answers through the R-tree alone until the swap. On a
        failure it is restored and the error propagates.
        """
        factory = factory or self.factory
        if factory is None:
            raise ValueError("no retrain factory configured")
        old = self.hybrid
        with old.lock.write():
            before = old.routing
            old.routing = "rtree"
        try:
            tree = old.tree.compacted()
            new = factory(tree, old)
        except Exception:
            with old.lock.write():
                old.routing = before
            raise
        if new.tree is not tree:
            raise ValueError("retrain factory must serve the compacted tree it was given")
        with old.lock.write():
            self.hybrid = new
        self.retrains.append({"before": old.tree.id_digest, "after": tree.id_digest,
                              "flagged": sorted(self.flagged), "mutations": len(self.log)})
        self.flagged.clear()
        self._window.clear()
        return new


# -- scripts ---------------------------------------------------------------


@dataclass(frozen=True)
class ScriptOp:
    line: int
    op: str
    args: tuple
    label: str | None = None


_ARITY = {"insert": (2, 3), "delete": (1, 1), "update": (3, 3), "query": (4, 5), "retrain": (0, 0)}


def parse_script(text: str) -> list[ScriptOp]:
    """Parse line-delimited operations; ``#`` starts a comment.

    insert x y [oid] | delete oid | update oid x y | query x0 y0 x1 y1 [label] | retrain
    """
    ops = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        if word not in _ARITY:
            raise ScriptError(n, f"unknown operation {word!r}")
        lo, hi = _ARITY[word]
        if not lo <= len(rest) <= hi:
            raise ScriptError(n, f"{word} takes {lo}" + (f"-{hi}" if hi != lo else "") + f" arguments, got {len(rest)}")
        try:
            if word == "insert":
                args = (float(rest[0]), float(rest[1])) + ((int(rest[2]),) if len(rest) == 3 else ())
                label = None
            elif word == "delete":
                args, label = (int(rest[0]),), None
            elif word == "update":
                args, label = (int(rest[0]), float(rest[1]), float(rest[2])), None
            elif word == "query":
                args = tuple(float(v) for v in rest[:4])
                Rect(*args)
                label = rest[4] if len(rest) == 5 else None
            else:
                args, label = (), None
        except ValueError as exc:
            raise ScriptError(n, str(exc)) from exc
        if word in ("insert", "update") and not all(np.isfinite(a) for a in args if isinstance(a, float)):
            raise ScriptError(n, "coordinates must be finite")
        ops.append(ScriptOp(n, word, args, label))
    return ops


def load_script(path) -> list[ScriptOp]:
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read())


@dataclass
class QueryEvent:
    line: int
    label: str | None
    rect: Rect
    path: str
    leaves_read: list[str]
    result_oids: list[int]
    truth_count: int = 0

    @property
    def recall(self) -> float:
        if self.truth_count == 0:
            return 1.0
        return min(len(self.result_oids), self.truth_count) / self.truth_count


@dataclass
class ReplayResult:
    log: MutationLog
    queries: list[QueryEvent] = field(default_factory=list)
    retrains: list[dict] = field(default_factory=list)

    def query(self, label: str) -> QueryEvent:
        hits = [q for q in self.queries if q.label == label]
        if not hits:
            raise KeyError(label)
        return hits[-1]


def replay(index: MutableIndex, ops: Sequence[ScriptOp]) -> ReplayResult:
    """Run parsed operations in order; a failing operation reports its line."""
    result = ReplayResult(MutationLog())
    for op in ops:
        try:
            if op.op == "insert":
                oid = op.args[2] if len(op.args) == 3 else index.next_oid()
                result.log.append(index.insert_point(Point(op.args[0], op.args[1], oid)))
            elif op.op == "delete":
                result.log.append(index.delete_point(op.args[0]))
            elif op.op == "update":
                for rec in index.update_point(*op.args):
                    result.log.append(rec)
            elif op.op == "query":
                rect = Rect(*op.args)
                trace = index.explain(rect)
                truth = len(index.tree.range_search(rect).results)
                result.queries.append(QueryEvent(op.line, op.label, rect, trace.path, list(trace.leaves_read),
                                                 [index.logical(o) for o in trace.result_oids], truth))
            else:
                index.retrain()
                result.retrains.append(index.retrains[-1])
        except (DuplicateKeyError, UnknownObjectError, ValueError) as exc:
            raise ScriptError(op.line, str(exc)) from exc
    return result
