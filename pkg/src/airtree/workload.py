"""Datasets, query generation, query profiling and workload splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Point, Rect
from .rtree import RTree

log = logging.getLogger(__name__)

DEFAULT_SELECTIVITIES = (0.00005, 0.0001, 0.0002)
DEFAULT_EDGES = (0.1, 0.25, 0.5, 0.75, 1.0)


class IngestError(ValueError):
    pass


class QueryGenerationError(RuntimeError):
    pass


# -- datasets ---------------------------------------------------------------


def ingest_csv(path, x_column: str = "x", y_column: str = "y", dedup: bool = True) -> list[Point]:
    """Read points from a headed CSV, dropping rows with missing or bad coordinates.

    Oids are assigned densely in file order after filtering.
    """
    points: list[Point] = []
    dropped: list[int] = []
    seen: set[tuple[float, float]] = set()
    duplicates = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file")
        for col in (x_column, y_column):
            if col not in reader.fieldnames:
                raise IngestError(f"{path}: missing column {col!r} (have {reader.fieldnames})")
        for row_no, row in enumerate(reader, start=2):
            try:
                x = float(row[x_column])
                y = float(row[y_column])
            except (TypeError, ValueError):
                dropped.append(row_no)
                continue
            if not (math.isfinite(x) and math.isfinite(y)):
                dropped.append(row_no)
                continue
            if dedup:
                if (x, y) in seen:
                    duplicates += 1
                    continue
                seen.add((x, y))
            points.append(Point(x, y, len(points)))
    if dropped:
        log.warning("%s: dropped %d rows with missing/unparseable coordinates (rows %s%s)",
                    path, len(dropped), dropped[:10], " ..." if len(dropped) > 10 else "")
    if duplicates:
        log.info("%s: dropped %d duplicate coordinates", path, duplicates)
    if not points:
        raise IngestError(f"{path}: no valid rows")
    return points


def export_csv(points: Iterable[Point], path, x_column: str = "x", y_column: str = "y") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([x_column, y_column, "oid"])
        for p in points:
            w.writerow([repr(p.x), repr(p.y), p.oid])


def synthetic_points(n: int, clusters: int = 10, spread: tuple[float, float] = (0.02, 0.08),
                     seed: int = 0) -> list[Point]:
    """Gaussian-mixture points clipped to the unit square, oids 0..n-1."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.random((clusters, 2)) * 0.8 + 0.1
    sigma = rng.uniform(spread[0], spread[1], clusters)
    which = rng.integers(0, clusters, n)
    xy = np.clip(centers[which] + rng.normal(size=(n, 2)) * sigma[which, None], 0.0, 1.0)
    return [Point(float(x), float(y), i) for i, (x, y) in enumerate(xy)]


def points_array(points: Sequence[Point]) -> np.ndarray:
    return np.array([(p.x, p.y) for p in points], dtype=float).reshape(-1, 2)


class CountOracle:
    """Exact closed-rectangle counting by x-sorted scan."""

    def __init__(self, points: Sequence[Point]):
        xy = points_array(points)
        order = np.argsort(xy[:, 0], kind="stable")
        self._xs = xy[order, 0]
        self._ys = xy[order, 1]
        self._oids = np.array([points[i].oid for i in order], dtype=np.int64)

    def members(self, q: Rect) -> np.ndarray:
        a = np.searchsorted(self._xs, q.x_min, "left")
        b = np.searchsorted(self._xs, q.x_max, "right")
        ys = self._ys[a:b]
        return self._oids[a:b][(ys >= q.y_min) & (ys <= q.y_max)]

    def count(self, q: Rect) -> int:
        return len(self.members(q))


# -- query generation -------------------------------------------------------


class QuerySampler:
    """Draws rectangles holding an exact number of points.

    A center is drawn from the points and an aspect ratio from a fixed grid of
    levels; the half-width is then set halfway between the k-th and (k+1)-th
    nearest neighbour under the aspect-scaled Chebyshev distance, so the closed
    rectangle contains exactly those k points.
    """

    def __init__(self, points: Sequence[Point], aspect_range=(0.75, 1.25), aspect_levels: int = 21):
        if not points:
            raise ValueError("no points to sample queries from")
        self.points = points
        self.xy = points_array(points)
        self.oids = np.array([p.oid for p in points], dtype=np.int64)
        self.aspects = np.linspace(aspect_range[0], aspect_range[1], aspect_levels)
        self._kd: dict[int, cKDTree] = {}

    def _tree(self, level: int) -> cKDTree:
        if level not in self._kd:
            self._kd[level] = cKDTree(self.xy / np.array([1.0, self.aspects[level]]))
        return self._kd[level]

    def sample(self, rng: np.random.Generator, k: int, batch: int):
        """Return ``(rects (B,4), member oids (B,k))`` for up to ``batch`` candidates."""
        n = len(self.xy)
        k = min(k, n)
        centers = rng.integers(0, n, batch)
        levels = rng.integers(0, len(self.aspects), batch)
        rects = np.empty((batch, 4))
        members = np.empty((batch, k), dtype=np.int64)
        ok = np.zeros(batch, dtype=bool)
        for lv in np.unique(levels):
            sel = np.flatnonzero(levels == lv)
            r = self.aspects[lv]
            c = self.xy[centers[sel]]
            kk = min(k + 1, n)
            d, ii = self._tree(lv).query(c / np.array([1.0, r]), k=kk, p=np.inf)
            d = d.reshape(len(sel), kk)
            ii = ii.reshape(len(sel), kk)
            if kk > k:
                h = (d[:, k - 1] + d[:, k]) / 2
                gap = d[:, k] - d[:, k - 1]
                good = gap > 1e-9 * np.maximum(1.0, d[:, k])
            else:
                h = d[:, k - 1] + 1.0
                good = np.ones(len(sel), dtype=bool)
            good &= h > 0
            rects[sel] = np.column_stack([c[:, 0] - h, c[:, 1] - h * r, c[:, 0] + h, c[:, 1] + h * r])
            members[sel] = self.oids[ii[:, :k]]
            ok[sel] = good
        return rects[ok], members[ok]


def target_count(selectivity: float, n: int, tolerance: float = 0.2) -> int:
    if not 0 < selectivity < 1:
        raise ValueError(f"selectivity must be in (0, 1), got {selectivity}")
    want = selectivity * n
    k = max(1, round(want))
    if abs(k - want) > tolerance * want:
        raise QueryGenerationError(
            f"selectivity {selectivity} over {n} points asks for {want:.3g} objects; "
            f"no integer count lies within ±{tolerance:.0%}"
        )
    return k


def generate_queries(points: Sequence[Point], target_selectivity: float, count: int, seed: int = 0,
                     tolerance: float = 0.2, max_attempts: int | None = None,
                     sampler: QuerySampler | None = None) -> list[Rect]:
    """``count`` rectangles each returning within ±tolerance of ``target_selectivity``·n points."""
    if not points:
        raise ValueError("no points")
    k = target_count(target_selectivity, len(points), tolerance)
    sampler = sampler or QuerySampler(points)
    rng = np.random.default_rng(seed)
    budget = max_attempts if max_attempts is not None else 50 * count + 1000
    out: list[Rect] = []
    tried = 0
    while len(out) < count:
        if tried >= budget:
            raise QueryGenerationError(
                f"could not reach selectivity {target_selectivity} ({k} objects) after {tried} attempts"
            )
        batch = min(max(64, 2 * (count - len(out))), budget - tried)
        rects, _ = sampler.sample(rng, k, batch)
        tried += batch
        out.extend(Rect(*row) for row in rects[: count - len(out)])
    return out


# -- profiling --------------------------------------------------------------


@dataclass
class QueryProfile:
    """One executed query and the leaves it touched."""

    rect: Rect
    selectivity: float | None
    result_count: int
    visited_count: int
    true_count: int
    true_leaf_ids: tuple[int, ...]
    per_leaf_hits: dict[int, int]
    visited_leaf_ids: tuple[int, ...] = ()
    leaf_accesses: int = 0
    tree_digest: str | None = None

    @property
    def alpha(self) -> Fraction:
        if self.visited_count == 0:
            return Fraction(1)
        return Fraction(self.true_count, self.visited_count)

    def to_record(self) -> dict:
        return {
            "rect": list(self.rect),
            "selectivity": self.selectivity,
            "result_count": self.result_count,
            "vn": self.visited_count,
            "tn": self.true_count,
            "alpha": float(self.alpha),
            "true_leaf_ids": list(self.true_leaf_ids),
            "per_leaf_hits": [[k, v] for k, v in sorted(self.per_leaf_hits.items())],
            "visited_leaf_ids": list(self.visited_leaf_ids),
            "leaf_accesses": self.leaf_accesses,
            "tree_digest": self.tree_digest,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QueryProfile":
        prof = cls(
            rect=Rect(*rec["rect"]),
            selectivity=rec["selectivity"],
            result_count=rec["result_count"],
            visited_count=rec["vn"],
            true_count=rec["tn"],
            true_leaf_ids=tuple(rec["true_leaf_ids"]),
            per_leaf_hits={int(k): int(v) for k, v in rec["per_leaf_hits"]},
            visited_leaf_ids=tuple(rec.get("visited_leaf_ids", ())),
            leaf_accesses=rec.get("leaf_accesses", 0),
            tree_digest=rec.get("tree_digest"),
        )
        if prof.true_count != len(prof.true_leaf_ids) or prof.result_count != sum(prof.per_leaf_hits.values()):
            raise ValueError(f"inconsistent profile record: {rec}")
        return prof


def is_high_overlap(profile: QueryProfile, tau: float) -> bool:
    return profile.alpha <= Fraction(str(tau))


def profile_query(tree: RTree, q: Rect, selectivity: float | None = None) -> QueryProfile:
    trace = tree.range_search(q)
    return QueryProfile(
        rect=q,
        selectivity=selectivity,
        result_count=len(trace.results),
        visited_count=len(trace.visited_leaf_ids),
        true_count=len(trace.true_leaf_ids),
        true_leaf_ids=tuple(sorted(trace.true_leaf_ids)),
        per_leaf_hits=dict(trace.per_leaf_hits),
        visited_leaf_ids=tuple(trace.visited_leaf_ids),
        leaf_accesses=trace.leaf_accesses,
        tree_digest=tree.id_digest,
    )


def profile_queries(tree: RTree, rects: Iterable[Rect], selectivity: float | None = None) -> list[QueryProfile]:
    return [profile_query(tree, q, selectivity) for q in rects]


def save_profiles(profiles: Iterable[QueryProfile], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_record(), separators=(",", ":")) + "\n")


def load_profiles(path) -> list[QueryProfile]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(QueryProfile.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad profile record ({exc})") from exc
    return out


# -- alpha buckets ----------------------------------------------------------


def _edges(edges: Sequence[float]) -> list[Fraction]:
    fr = [Fraction(str(e)) for e in edges]
    if not fr or any(e <= 0 or e > 1 for e in fr) or any(a >= b for a, b in zip(fr, fr[1:])):
        raise ValueError(f"bucket edges must be ascending within (0, 1]: {list(edges)}")
    return fr


def alpha_bucket(alpha, edges: Sequence[float] = DEFAULT_EDGES) -> float:
    """Smallest edge that is ≥ alpha."""
    a = Fraction(alpha) if not isinstance(alpha, float) else Fraction(str(alpha))
    for e, raw in zip(_edges(edges), edges):
        if a <= e:
            return raw
    raise ValueError(f"alpha {alpha} exceeds the largest bucket edge {edges[-1]}")


def bucket_by_alpha(profiles: Iterable[QueryProfile], edges: Sequence[float] = DEFAULT_EDGES) -> dict[float, list[QueryProfile]]:
    out: dict[float, list[QueryProfile]] = {e: [] for e in edges}
    for p in profiles:
        out[alpha_bucket(p.alpha, edges)].append(p)
    log.debug("bucket populations: %s", {e: len(v) for e, v in out.items()})
    return out


# -- bucket-targeted workload -----------------------------------------------


class LeafProfiler:
    """Vectorized VN/TN estimate from leaf MBRs and object ownership."""

    def __init__(self, tree: RTree):
        leaves = tree.leaves()
        self.mbrs = np.array([leaf.mbr for leaf in leaves], dtype=float).reshape(-1, 4)
        owner: dict[int, int] = {}
        for leaf in leaves:
            for node in [leaf, *leaf.overflow_run()]:
                for p in node.entries:
                    owner[p.oid] = leaf.leaf_id
        size = max(owner) + 1 if owner else 0
        self.owner = np.full(size, -1, dtype=np.int64)
        for oid, lid in owner.items():
            self.owner[oid] = lid

    def counts(self, rects: np.ndarray, members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.mbrs
        vn = np.zeros(len(rects), dtype=np.int64)
        for start in range(0, len(rects), 1024):
            r = rects[start : start + 1024]
            hit = (
                (m[None, :, 0] <= r[:, None, 2])
                & (m[None, :, 2] >= r[:, None, 0])
                & (m[None, :, 1] <= r[:, None, 3])
                & (m[None, :, 3] >= r[:, None, 1])
            )
            vn[start : start + 1024] = hit.sum(axis=1)
        owners = np.sort(self.owner[members], axis=1)
        tn = 1 + (np.diff(owners, axis=1) != 0).sum(axis=1)
        return vn, tn


@dataclass
class WorkloadReport:
    populations: dict[tuple[float, float], int] = field(default_factory=dict)
    candidates: dict[float, int] = field(default_factory=dict)
    short_cells: list[tuple[float, float]] = field(default_factory=list)


def sample_workload(tree: RTree, points: Sequence[Point], selectivities: Sequence[float] = DEFAULT_SELECTIVITIES,
                    edges: Sequence[float] = DEFAULT_EDGES, per_cell: int = 200, seed: int = 0,
                    max_candidates: int = 600_000, tolerance: float = 0.2) -> tuple[list[QueryProfile], WorkloadReport]:
    """Rejection-sample queries until every (selectivity, α-bucket) cell holds ``per_cell``.

    Candidates are screened with :class:`LeafProfiler`; accepted ones are then
    profiled through the tree itself, which is authoritative.
    """
    sampler = QuerySampler(points)
    profiler = LeafProfiler(tree)
    fr_edges = _edges(edges)
    report = WorkloadReport()
    out: list[QueryProfile] = []
    for s_idx, sel in enumerate(selectivities):
        k = target_count(sel, len(points), tolerance)
        rng = np.random.default_rng([seed, s_idx])
        need = {e: per_cell for e in edges}
        chosen: list[np.ndarray] = []
        tried = 0
        while any(need.values()) and tried < max_candidates:
            batch = min(4096, max_candidates - tried)
            rects, members = sampler.sample(rng, k, batch)
            tried += batch
            vn, tn = profiler.counts(rects, members)
            for row, v, t in zip(rects, vn, tn):
                a = Fraction(int(t), int(v)) if v else Fraction(1)
                e = next(raw for fe, raw in zip(fr_edges, edges) if a <= fe)
                if need[e]:
                    need[e] -= 1
                    chosen.append(row)
        report.candidates[sel] = tried
        for row in chosen:
            prof = profile_query(tree, Rect(*row), sel)
            out.append(prof)
        got = bucket_by_alpha([p for p in out if p.selectivity == sel], edges)
        for e in edges:
            report.populations[(sel, e)] = len(got[e])
            if len(got[e]) < per_cell:
                report.short_cells.append((sel, e))
                log.warning("selectivity %s bucket %s: only %d of %d queries after %d candidates",
                            sel, e, len(got[e]), per_cell, tried)
    return out, report


# -- splitting --------------------------------------------------------------


@dataclass
class WorkloadSplit:
    train: list[QueryProfile]
    validation: list[QueryProfile]
    test: list[QueryProfile]
    ratios: tuple[float, float, float]

    def parts(self) -> tuple[list[QueryProfile], ...]:
        return self.train, self.validation, self.test


def split_workload(profiles: Sequence[QueryProfile], ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0,
                   edges: Sequence[float] = DEFAULT_EDGES) -> WorkloadSplit:
    """Stratified shuffle-split per (selectivity, α-bucket) cell.

    Cut points carry their rounding error from one stratum to the next, so each
    global part size stays within one query of its exact share.
    """
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1: {ratios}")
    cuts = np.cumsum(ratios)[:-1]
    strata: dict[tuple, list[int]] = {}
    for i, p in enumerate(profiles):
        key = (p.selectivity if p.selectivity is not None else -1.0, alpha_bucket(p.alpha, edges))
        strata.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    carry = np.zeros(len(cuts))
    for key in sorted(strata):
        idx = strata[key]
        order = [idx[j] for j in rng.permutation(len(idx))]
        n = len(order)
        if n < 3:
            log.warning("stratum %s has %d queries; assigning it wholly to train", key, n)
            parts[0].extend(order)
            continue
        bounds = [0]
        for j, c in enumerate(cuts):
            exact = n * c + carry[j]
            b = min(max(int(math.floor(exact + 0.5)), bounds[-1]), n)
            carry[j] = exact - b
            bounds.append(b)
        bounds.append(n)
        for j in range(len(ratios)):
            parts[j].extend(order[bounds[j] : bounds[j + 1]])
    picked = [[profiles[i] for i in sorted(part)] for part in parts]
    while len(picked) < 3:
        picked.append([])
    return WorkloadSplit(picked[0], picked[1], picked[2], tuple(ratios) + (0.0,) * (3 - len(ratios)))


# -- features and labels ----------------------------------------------------


def features(profiles: Sequence[QueryProfile]) -> np.ndarray:
    return np.array([list(p.rect) for p in profiles], dtype=float).reshape(-1, 4)


def rect_features(rects: Sequence[Rect]) -> np.ndarray:
    return np.array([list(r) for r in rects], dtype=float).reshape(-1, 4)


def label_matrix(profiles: Sequence[QueryProfile], n_labels: int) -> np.ndarray:
    y = np.zeros((len(profiles), n_labels), dtype=np.uint8)
    for i, p in enumerate(profiles):
        if p.true_leaf_ids:
            if max(p.true_leaf_ids) >= n_labels:
                raise ValueError(f"leaf id {max(p.true_leaf_ids)} outside label space {n_labels}")
            y[i, list(p.true_leaf_ids)] = 1
    return y


def labels_to_ids(row: np.ndarray) -> set[int]:
    return {int(j) for j in np.flatnonzero(row)}
