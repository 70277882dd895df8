"""Guttman R-tree with linear split, DFS leaf numbering and access-counting search.

Leaves may carry a ``link`` chain. Two kinds of leaves appear on it:

* overflow leaves (``is_overflow``) created by deferred, out-of-place inserts.
  They are not part of the hierarchy; the primary leaf's MBR covers them and a
  range search reading the primary always reads its leading overflow run too.
* split siblings created by an in-place split after IDs were assigned. They sit
  in the hierarchy under their own fresh ID; the link only lets a stale model
  that predicts the old ID reach the moved entries through :meth:`RTree.read_leaf`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import Point, Rect

SNAPSHOT_MAGIC = "AIRTREE-SNAPSHOT"
SNAPSHOT_VERSION = 1


class RTreeError(Exception):
    pass


class DuplicateKeyError(RTreeError):
    pass


class LeafNotFoundError(RTreeError, KeyError):
    pass


class UnknownObjectError(RTreeError, KeyError):
    pass


class SnapshotFormatError(RTreeError):
    pass


class Node:
    __slots__ = (
        "is_leaf",
        "parent",
        "children",
        "boxes",
        "entries",
        "deleted",
        "mbr",
        "leaf_id",
        "link",
        "is_overflow",
        "_cache",
    )

    def __init__(self, is_leaf: bool, capacity: int, is_overflow: bool = False):
        self.is_leaf = is_leaf
        self.parent: Node | None = None
        self.children: list[Node] = []
        self.boxes = None if is_leaf else np.empty((capacity + 1, 4))
        self.entries: list[Point] = []
        self.deleted: set[int] = set()
        self.mbr: list[float] | None = None
        self.leaf_id: int | None = None
        self.link: Node | None = None
        self.is_overflow = is_overflow
        self._cache = None

    def __repr__(self) -> str:
        kind = "overflow" if self.is_overflow else ("leaf" if self.is_leaf else "internal")
        size = len(self.entries) if self.is_leaf else len(self.children)
        return f"<Node {kind} id={self.leaf_id} size={size} mbr={self.mbr}>"

    def live_entries(self) -> list[Point]:
        if not self.deleted:
            return list(self.entries)
        return [p for p in self.entries if p.oid not in self.deleted]

    def overflow_run(self) -> Iterator["Node"]:
        node = self.link
        while node is not None and node.is_overflow:
            yield node
            node = node.link

    def chain(self) -> Iterator["Node"]:
        """This leaf followed by every leaf reachable over links."""
        node: Node | None = self
        while node is not None:
            yield node
            node = node.link

    def _arrays(self):
        if self._cache is None:
            n = len(self.entries)
            xs = np.fromiter((p.x for p in self.entries), float, n)
            ys = np.fromiter((p.y for p in self.entries), float, n)
            if self.deleted:
                live = np.fromiter((p.oid not in self.deleted for p in self.entries), bool, n)
            else:
                live = None
            self._cache = (xs, ys, live)
        return self._cache

    def matching(self, q: Rect) -> list[Point]:
        if not self.entries:
            return []
        xs, ys, live = self._arrays()
        mask = (xs >= q.x_min) & (xs <= q.x_max) & (ys >= q.y_min) & (ys <= q.y_max)
        if live is not None:
            mask &= live
        entries = self.entries
        return [entries[i] for i in np.flatnonzero(mask)]


@dataclass
class SearchTrace:
    """What one range search returned and which leaves it had to read."""

    results: list[Point] = field(default_factory=list)
    visited_leaf_ids: list[int] = field(default_factory=list)
    true_leaf_ids: set[int] = field(default_factory=set)
    per_leaf_hits: dict[int, int] = field(default_factory=dict)
    overflow_hops: int = 0
    internal_visits: int = 0
    touched: list[str] = field(default_factory=list)

    @property
    def leaf_accesses(self) -> int:
        return len(self.visited_leaf_ids) + self.overflow_hops


@dataclass
class LeafRead:
    leaf_id: int
    mbr: Rect | None
    entries: list[Point]
    accesses: int


@dataclass
class InsertResult:
    leaf: Node
    split: bool = False
    new_leaf: Node | None = None


def _box_of(node: Node) -> list[float] | None:
    """Bounding box of a leaf's own entries (deleted included)."""
    if not node.entries:
        return None
    xs = [p.x for p in node.entries]
    ys = [p.y for p in node.entries]
    return [min(xs), min(ys), max(xs), max(ys)]


def _merge(a: list[float] | None, b: list[float] | None) -> list[float] | None:
    if a is None:
        return None if b is None else list(b)
    if b is None:
        return list(a)
    return [min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])]


def _area(b) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def linear_split(boxes: list, min_entries: int) -> tuple[list[int], list[int]]:
    """Guttman's linear-cost split of ``boxes`` (sequence of 4-tuples) into two index groups.

    Seeds are the pair with the greatest normalized separation along either axis.
    Remaining entries are taken in stored order and go to the group needing the
    least enlargement; ties go to the smaller area, then fewer entries, then the
    first group. A group is handed every remaining entry once it needs them all
    to reach ``min_entries``.
    """
    k = len(boxes)
    if k < 2:
        raise ValueError("cannot split fewer than two entries")
    best = None
    for d in (0, 1):
        lows = [b[d] for b in boxes]
        highs = [b[d + 2] for b in boxes]
        hi_low = max(range(k), key=lambda i: (lows[i], -i))
        lo_high = min(range(k), key=lambda i: (highs[i], i))
        if lo_high == hi_low:
            lo_high = min((i for i in range(k) if i != hi_low), key=lambda i: (highs[i], i))
        width = max(highs) - min(lows)
        sep = (lows[hi_low] - highs[lo_high]) / width if width > 0 else 0.0
        if best is None or sep > best[0]:
            best = (sep, lo_high, hi_low)
    _, s1, s2 = best
    g1, g2 = [s1], [s2]
    b1, b2 = list(boxes[s1]), list(boxes[s2])
    rest = [i for i in range(k) if i != s1 and i != s2]
    for pos, i in enumerate(rest):
        remaining = len(rest) - pos
        if len(g1) + remaining == min_entries:
            g1.extend(rest[pos:])
            break
        if len(g2) + remaining == min_entries:
            g2.extend(rest[pos:])
            break
        b = boxes[i]
        u1 = _merge(b1, b)
        u2 = _merge(b2, b)
        a1, a2 = _area(b1), _area(b2)
        e1, e2 = _area(u1) - a1, _area(u2) - a2
        if (e1, a1, len(g1)) <= (e2, a2, len(g2)):
            g1.append(i)
            b1 = u1
        else:
            g2.append(i)
            b2 = u2
    return g1, g2


class RTree:
    """Dynamic R-tree over 2-d points.

    ``max_entries`` bounds both leaf entries and internal fanout. Minimum fill on
    split is ``ceil(min_fill * max_entries)``.
    """

    def __init__(self, max_entries: int = 1000, min_fill: float = 0.4):
        if max_entries < 2:
            raise ValueError("max_entries must be at least 2")
        if not 0 < min_fill <= 0.5:
            raise ValueError("min_fill must be in (0, 0.5]")
        self.max_entries = max_entries
        self.min_fill = min_fill
        self.min_entries = max(1, math.ceil(min_fill * max_entries))
        self.root = Node(True, max_entries)
        self._where: dict[int, Node] = {}
        self._leaf_index: dict[int, Node] = {}
        self.next_leaf_id = 0
        self.ids_assigned = False
        self.id_digest: str | None = None

    # -- construction -----------------------------------------------------

    def __len__(self) -> int:
        return sum(1 for _ in self.live_points())

    def __contains__(self, oid: int) -> bool:
        return oid in self._where

    @property
    def leaf_count(self) -> int:
        return self.next_leaf_id

    def insert(self, p: Point) -> InsertResult:
        if p.oid in self._where:
            raise DuplicateKeyError(f"oid {p.oid} already present")
        return self.insert_into(self.choose_leaf(p.x, p.y), p)

    def choose_leaf(self, x: float, y: float) -> Node:
        node = self.root
        while not node.is_leaf:
            b = node.boxes[: len(node.children)]
            area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
            grown = (np.maximum(b[:, 2], x) - np.minimum(b[:, 0], x)) * (
                np.maximum(b[:, 3], y) - np.minimum(b[:, 1], y)
            )
            enl = grown - area
            cand = np.flatnonzero(enl == enl.min())
            i = cand[0] if len(cand) == 1 else cand[np.argmin(area[cand])]
            node = node.children[i]
        return node

    def insert_into(self, leaf: Node, p: Point) -> InsertResult:
        """Place ``p`` into ``leaf`` itself, splitting on overflow."""
        if p.oid in self._where:
            raise DuplicateKeyError(f"oid {p.oid} already present")
        leaf.entries.append(p)
        leaf._cache = None
        self._where[p.oid] = leaf
        if len(leaf.entries) > self.max_entries:
            new = self._split_leaf(leaf)
            return InsertResult(leaf=self._where[p.oid], split=True, new_leaf=new)
        self._grow(leaf, p.x, p.y, p.x, p.y)
        return InsertResult(leaf=leaf)

    def add_overflow(self, leaf: Node, p: Point) -> tuple[Node, bool]:
        """Defer a split: store ``p`` in ``leaf``'s overflow run.

        Uses the last overflow leaf of the run if it has room, otherwise appends
        an empty one. Returns the node used and whether it was created.
        """
        if p.oid in self._where:
            raise DuplicateKeyError(f"oid {p.oid} already present")
        tail = leaf
        for node in leaf.overflow_run():
            tail = node
        created = False
        if tail is leaf or len(tail.entries) >= self.max_entries:
            fresh = Node(True, self.max_entries, is_overflow=True)
            fresh.link = tail.link
            tail.link = fresh
            tail = fresh
            created = True
        tail.entries.append(p)
        tail._cache = None
        tail.mbr = _merge(tail.mbr, [p.x, p.y, p.x, p.y])
        self._where[p.oid] = tail
        self._grow(leaf, p.x, p.y, p.x, p.y)
        return tail, created

    def mark_deleted(self, oid: int) -> Node:
        node = self._where.get(oid)
        if node is None:
            raise UnknownObjectError(f"unknown oid {oid}")
        if oid in node.deleted:
            raise UnknownObjectError(f"oid {oid} already deleted")
        node.deleted.add(oid)
        node._cache = None
        return node

    def node_of(self, oid: int) -> Node:
        node = self._where.get(oid)
        if node is None:
            raise UnknownObjectError(f"unknown oid {oid}")
        return node

    def is_live(self, oid: int) -> bool:
        node = self._where.get(oid)
        return node is not None and oid not in node.deleted

    def _grow(self, node: Node, x0: float, y0: float, x1: float, y1: float) -> None:
        while node is not None:
            m = node.mbr
            if m is None:
                node.mbr = [x0, y0, x1, y1]
            elif x0 >= m[0] and y0 >= m[1] and x1 <= m[2] and y1 <= m[3]:
                return
            else:
                m[0] = min(m[0], x0)
                m[1] = min(m[1], y0)
                m[2] = max(m[2], x1)
                m[3] = max(m[3], y1)
            parent = node.parent
            if parent is None:
                return
            parent.boxes[parent.children.index(node)] = node.mbr
            node = parent

    def _refresh_up(self, node: Node) -> None:
        while node is not None:
            if node.is_leaf:
                mbr = _box_of(node)
                if not node.is_overflow:
                    for o in node.overflow_run():
                        mbr = _merge(mbr, o.mbr)
                node.mbr = mbr
            elif node.children:
                b = node.boxes[: len(node.children)]
                node.mbr = [float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())]
            else:
                node.mbr = None
            parent = node.parent
            if parent is None:
                return
            if node.mbr is not None:
                parent.boxes[parent.children.index(node)] = node.mbr
            node = parent

    def _split_leaf(self, leaf: Node) -> Node:
        items = leaf.entries
        g1, g2 = linear_split([(p.x, p.y, p.x, p.y) for p in items], self.min_entries)
        new = Node(True, self.max_entries)
        leaf.entries = [items[i] for i in g1]
        new.entries = [items[i] for i in g2]
        if leaf.deleted:
            moved = {p.oid for p in new.entries}
            new.deleted = leaf.deleted & moved
            leaf.deleted -= moved
        leaf._cache = None
        for p in new.entries:
            self._where[p.oid] = new
        mbr = _box_of(leaf)
        for o in leaf.overflow_run():
            mbr = _merge(mbr, o.mbr)
        leaf.mbr = mbr
        new.mbr = _box_of(new)
        if self.ids_assigned and leaf.leaf_id is not None:
            new.leaf_id = self.next_leaf_id
            self._leaf_index[new.leaf_id] = new
            self.next_leaf_id += 1
            tail = leaf
            for o in leaf.overflow_run():
                tail = o
            new.link = tail.link
            tail.link = new
        self._install_sibling(leaf, new)
        return new

    def _split_internal(self, node: Node) -> Node:
        n = len(node.children)
        rows = [tuple(float(v) for v in node.boxes[i]) for i in range(n)]
        g1, g2 = linear_split(rows, self.min_entries)
        kids = node.children
        new = Node(False, self.max_entries)
        node.children = [kids[i] for i in g1]
        new.children = [kids[i] for i in g2]
        for target, group in ((node, g1), (new, g2)):
            for j, i in enumerate(group):
                target.boxes[j] = rows[i]
                kids[i].parent = target
            b = target.boxes[: len(group)]
            target.mbr = [float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())]
        self._install_sibling(node, new)
        return new

    def _install_sibling(self, node: Node, sibling: Node) -> None:
        parent = node.parent
        if parent is None:
            root = Node(False, self.max_entries)
            root.children = [node, sibling]
            root.boxes[0] = node.mbr
            root.boxes[1] = sibling.mbr
            node.parent = sibling.parent = root
            root.mbr = _merge(node.mbr, sibling.mbr)
            self.root = root
            return
        parent.boxes[parent.children.index(node)] = node.mbr
        parent.children.append(sibling)
        parent.boxes[len(parent.children) - 1] = sibling.mbr
        sibling.parent = parent
        if len(parent.children) > self.max_entries:
            self._split_internal(parent)
        else:
            self._refresh_up(parent)

    # -- leaf numbering ---------------------------------------------------

    def leaves(self) -> list[Node]:
        """Hierarchy leaves in DFS pre-order (children in stored order)."""
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def assign_leaf_ids(self) -> int:
        """Number hierarchy leaves 0..L-1 in DFS order and drop split links."""
        leaves = self.leaves()
        self._leaf_index = {}
        for i, leaf in enumerate(leaves):
            leaf.leaf_id = i
            self._leaf_index[i] = leaf
            tail = leaf
            for o in leaf.overflow_run():
                o.leaf_id = None
                tail = o
            tail.link = None
        self.next_leaf_id = len(leaves)
        self.ids_assigned = True
        self.id_digest = self._digest(leaves)
        return len(leaves)

    def _digest(self, leaves: list[Node]) -> str:
        h = hashlib.sha256(f"M={self.max_entries};".encode())
        for leaf in leaves:
            oids = sorted(p.oid for node in leaf.chain() for p in node.entries)
            h.update(f"{leaf.leaf_id}:".encode())
            h.update(np.asarray(oids, dtype=np.int64).tobytes())
        return h.hexdigest()

    def leaf(self, leaf_id: int) -> Node:
        node = self._leaf_index.get(leaf_id)
        if node is None:
            raise LeafNotFoundError(f"unknown leaf id {leaf_id}")
        return node

    def _require_ids(self) -> None:
        if not self.ids_assigned:
            raise RTreeError("leaf IDs not assigned; call assign_leaf_ids() first")

    # -- queries ----------------------------------------------------------

    def range_search(self, q: Rect) -> SearchTrace:
        self._require_ids()
        trace = SearchTrace()
        root = self.root
        m = root.mbr
        if m is None or m[0] > q.x_max or m[2] < q.x_min or m[1] > q.y_max or m[3] < q.y_min:
            return trace
        stack = [root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                self._scan_leaf(node, q, trace)
                continue
            trace.internal_visits += 1
            b = node.boxes[: len(node.children)]
            mask = (b[:, 0] <= q.x_max) & (b[:, 2] >= q.x_min) & (b[:, 1] <= q.y_max) & (b[:, 3] >= q.y_min)
            kids = node.children
            stack.extend(kids[i] for i in np.flatnonzero(mask)[::-1])
        return trace

    def _scan_leaf(self, leaf: Node, q: Rect, trace: SearchTrace) -> None:
        lid = leaf.leaf_id
        trace.visited_leaf_ids.append(lid)
        trace.touched.append(str(lid))
        hits = leaf.matching(q)
        for k, node in enumerate(leaf.overflow_run(), start=1):
            trace.overflow_hops += 1
            trace.touched.append(f"{lid}" + "'" * k)
            hits.extend(node.matching(q))
        if hits:
            trace.true_leaf_ids.add(lid)
            trace.per_leaf_hits[lid] = len(hits)
            trace.results.extend(hits)

    def read_leaf(self, leaf_id: int) -> LeafRead:
        """Live entries of a leaf and of everything on its link chain."""
        node = self.leaf(leaf_id)
        entries: list[Point] = []
        accesses = 0
        for n in node.chain():
            accesses += 1
            entries.extend(n.live_entries())
        return LeafRead(leaf_id, Rect(*node.mbr) if node.mbr else None, entries, accesses)

    def live_points(self) -> Iterator[Point]:
        for node in set(self._where.values()):
            for p in node.entries:
                if p.oid not in node.deleted:
                    yield p

    def leaf_mbrs(self) -> dict[int, Rect]:
        return {lid: Rect(*n.mbr) for lid, n in self._leaf_index.items() if n.mbr is not None}

    def depth(self) -> int:
        d, node = 1, self.root
        while not node.is_leaf:
            node = node.children[0]
            d += 1
        return d

    # -- maintenance ------------------------------------------------------

    def check_invariants(self) -> None:
        """Raise AssertionError if containment or capacity is violated."""

        def inside(inner, outer) -> bool:
            return outer[0] <= inner[0] and outer[1] <= inner[1] and inner[2] <= outer[2] and inner[3] <= outer[3]

        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                assert len(node.entries) <= self.max_entries, f"leaf over capacity: {node!r}"
                for n in [node, *node.overflow_run()]:
                    for p in n.entries:
                        assert node.mbr is not None and inside((p.x, p.y, p.x, p.y), node.mbr), (
                            f"point {p} outside leaf MBR {node.mbr}"
                        )
                        assert self._where[p.oid] is n, f"location index stale for {p.oid}"
            else:
                assert 0 < len(node.children) <= self.max_entries, f"bad fanout: {node!r}"
                for i, child in enumerate(node.children):
                    assert child.parent is node, "broken parent pointer"
                    assert list(node.boxes[i]) == list(child.mbr), "stale child box"
                    assert inside(child.mbr, node.mbr), f"child {child.mbr} outside parent {node.mbr}"
                stack.extend(node.children)
        seen = set()
        for leaf in self.leaves():
            for n in leaf.chain():
                assert id(n) not in seen or not n.is_overflow, "overflow leaf shared by two chains"
                seen.add(id(n))
            visited = set()
            for n in leaf.chain():
                assert id(n) not in visited, "cyclic link chain"
                visited.add(id(n))

    def copy(self) -> "RTree":
        return RTree.from_snapshot(self.to_snapshot())

    def compacted(self) -> "RTree":
        """A copy with deleted entries removed and deferred splits resolved.

        Overflow entries are re-inserted through ordinary insertion, empty
        leaves are removed, split links dropped and IDs re-assigned. A tree with
        no deletions and no overflow leaves comes back structurally identical.
        """
        tree = self.copy()
        tree.ids_assigned = False
        pending: list[Point] = []
        empties = []
        for leaf in tree.leaves():
            for o in leaf.overflow_run():
                pending.extend(o.live_entries())
                for p in o.entries:
                    del tree._where[p.oid]
            leaf.link = None
            if leaf.deleted:
                for oid in leaf.deleted:
                    del tree._where[oid]
                leaf.entries = leaf.live_entries()
                leaf.deleted = set()
                leaf._cache = None
            if leaf.entries:
                tree._refresh_up(leaf)
            else:
                empties.append(leaf)
        for leaf in empties:
            tree._remove_node(leaf)
        for p in pending:
            tree.insert(p)
        tree.assign_leaf_ids()
        return tree

    def _remove_node(self, node: Node) -> None:
        parent = node.parent
        if parent is None:
            self.root = Node(True, self.max_entries)
            return
        i = parent.children.index(node)
        n = len(parent.children)
        parent.boxes[i : n - 1] = parent.boxes[i + 1 : n]
        del parent.children[i]
        node.parent = None
        if not parent.children:
            self._remove_node(parent)
        else:
            self._refresh_up(parent)

    # -- persistence ------------------------------------------------------

    def to_snapshot(self) -> str:
        meta = {
            "max_entries": self.max_entries,
            "min_fill": self.min_fill,
            "next_leaf_id": self.next_leaf_id,
            "ids_assigned": self.ids_assigned,
            "id_digest": self.id_digest,
        }
        order: list[Node] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            order.append(node)
            if node.is_leaf:
                order.extend(node.overflow_run())
            else:
                stack.extend(reversed(node.children))
        serial = {id(n): i for i, n in enumerate(order)}
        lines = [f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}", json.dumps(meta, sort_keys=True)]
        for node in order:
            if node.is_leaf:
                rec = {
                    "t": "O" if node.is_overflow else "L",
                    "id": node.leaf_id,
                    "mbr": node.mbr,
                    "link": serial[id(node.link)] if node.link is not None else None,
                    "run": 0 if node.is_overflow else sum(1 for _ in node.overflow_run()),
                    "e": [[p.oid, p.x, p.y, int(p.oid in node.deleted)] for p in node.entries],
                }
            else:
                rec = {"t": "I", "n": len(node.children), "mbr": node.mbr}
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_snapshot(cls, text: str) -> "RTree":
        lines = text.splitlines()
        if len(lines) < 3 or not lines[0].startswith(SNAPSHOT_MAGIC + " "):
            raise SnapshotFormatError("missing snapshot header")
        version = lines[0].split()[1]
        if version != str(SNAPSHOT_VERSION):
            raise SnapshotFormatError(f"unsupported snapshot version {version}")
        meta = json.loads(lines[1])
        tree = cls(meta["max_entries"], meta["min_fill"])
        records = [json.loads(s) for s in lines[2:]]
        nodes: list[Node] = []
        links: list[tuple[Node, int]] = []
        pos = 0

        def build() -> Node:
            nonlocal pos
            rec = records[pos]
            pos += 1
            if rec["t"] == "I":
                node = Node(False, tree.max_entries)
                nodes.append(node)
                node.mbr = rec["mbr"]
                for j in range(rec["n"]):
                    child = build()
                    child.parent = node
                    node.children.append(child)
                    node.boxes[j] = child.mbr
                return node
            node = _leaf_from(rec)
            for _ in range(rec["run"]):
                _leaf_from(records[pos])
                pos += 1
            return node

        def _leaf_from(rec) -> Node:
            if rec["t"] not in ("L", "O"):
                raise SnapshotFormatError(f"unexpected record type {rec['t']!r}")
            node = Node(True, tree.max_entries, is_overflow=rec["t"] == "O")
            nodes.append(node)
            node.mbr = rec["mbr"]
            node.leaf_id = rec["id"]
            for oid, x, y, dead in rec["e"]:
                p = Point(x, y, oid)
                node.entries.append(p)
                if dead:
                    node.deleted.add(oid)
                tree._where[oid] = node
            if rec["link"] is not None:
                links.append((node, rec["link"]))
            if node.leaf_id is not None and not node.is_overflow:
                tree._leaf_index[node.leaf_id] = node
            return node

        tree.root = build()
        if pos != len(records):
            raise SnapshotFormatError("trailing records in snapshot")
        for node, target in links:
            node.link = nodes[target]
        tree.next_leaf_id = meta["next_leaf_id"]
        tree.ids_assigned = meta["ids_assigned"]
        tree.id_digest = meta["id_digest"]
        return tree

    def save(self, path) -> None:
        Path(path).write_text(self.to_snapshot(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RTree":
        return cls.from_snapshot(Path(path).read_text(encoding="utf-8"))


def build_tree(points, max_entries: int = 1000, min_fill: float = 0.4) -> RTree:
    """Insert ``points`` one at a time, then number the leaves."""
    tree = RTree(max_entries, min_fill)
    for p in points:
        tree.insert(p)
    tree.assign_leaf_ids()
    return tree


def tree_from_leaves(groups, max_entries: int, min_fill: float = 0.4) -> RTree:
    """Two-level tree with exactly the given leaves, numbered in order.

    For hand-built layouts; each group must fit in one leaf.
    """
    groups = [list(g) for g in groups]
    if not 0 < len(groups) <= max_entries:
        raise ValueError("need between 1 and max_entries leaves")
    tree = RTree(max_entries, min_fill)
    leaves = []
    for g in groups:
        if not 0 < len(g) <= max_entries:
            raise ValueError("each leaf needs 1..max_entries points")
        leaf = Node(True, max_entries)
        for p in g:
            if p.oid in tree._where:
                raise DuplicateKeyError(f"oid {p.oid} already present")
            leaf.entries.append(p)
            tree._where[p.oid] = leaf
        leaf.mbr = _box_of(leaf)
        leaves.append(leaf)
    if len(leaves) == 1:
        tree.root = leaves[0]
    else:
        root = Node(False, max_entries)
        for i, leaf in enumerate(leaves):
            leaf.parent = root
            root.children.append(leaf)
            root.boxes[i] = leaf.mbr
        b = root.boxes[: len(leaves)]
        root.mbr = [float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())]
        tree.root = root
    tree.assign_leaf_ids()
    return tree


def brute_force(points, q: Rect) -> list[Point]:
    return [p for p in points if q.x_min <= p.x <= q.x_max and q.y_min <= p.y <= q.y_max]
