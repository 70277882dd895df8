"""Recall, cost model, per-bucket aggregation and model footprint."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .workload import DEFAULT_EDGES, QueryProfile, alpha_bucket


class StateMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    io_unit_ms: float = 1.0

    def __post_init__(self):
        if self.io_unit_ms < 0:
            raise ValueError("io_unit_ms must be non-negative")

    def io_ms(self, leaf_accesses: int) -> float:
        return leaf_accesses * self.io_unit_ms


def query_recall(outcome, truth: QueryProfile, tree_digest: str | None = None) -> float:
    """Returned true objects over all true objects; 1 when the true result is empty."""
    if tree_digest is not None and truth.tree_digest is not None and truth.tree_digest != tree_digest:
        raise StateMismatchError("ground truth was profiled on a different tree state")
    if truth.result_count == 0:
        return 1.0
    return min(len(outcome.results), truth.result_count) / truth.result_count


def query_precision(outcome, rect) -> float:
    if not outcome.results:
        return 1.0
    inside = sum(1 for p in outcome.results if rect.contains_point(p.x, p.y))
    return inside / len(outcome.results)


def query_time(outcome, cost: CostModel) -> float:
    """CPU milliseconds plus simulated I/O milliseconds."""
    return outcome.wall_cpu_ms + cost.io_ms(outcome.leaf_accesses)


@dataclass
class BucketReport:
    model_kind: str
    view: str
    selectivity: float | None
    alpha_bucket: float
    query_count: int
    mean_recall: float
    mean_leaf_accesses: float
    mean_io_ms: float
    fallback_fraction: float
    ai_fraction: float
    precision: float
    mean_query_ms: float | None = None
    mean_cpu_ms: float | None = None

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("mean_query_ms")
        d.pop("mean_cpu_ms")
        return d


def aggregate(outcomes: Sequence, truths: Sequence[QueryProfile], model_kind: str, cost: CostModel,
              edges: Sequence[float] = DEFAULT_EDGES) -> list[BucketReport]:
    """Group by (view, selectivity, α bucket) and average.

    View ``by_true_alpha`` holds every query in its profiled α bucket. Views
    ``routed_ai`` and ``routed_rtree`` condition on the path the router chose.
    Rows with selectivity None pool all selectivities.
    """
    if len(outcomes) != len(truths):
        raise ValueError("one outcome per truth profile required")
    groups: dict[tuple, list[int]] = {}
    for i, (o, t) in enumerate(zip(outcomes, truths)):
        b = alpha_bucket(t.alpha, edges)
        routed = "routed_rtree" if o.path == "rtree" else "routed_ai"
        for view in ("by_true_alpha", routed):
            groups.setdefault((view, t.selectivity, b), []).append(i)
            groups.setdefault((view, None, b), []).append(i)
    out = []
    for (view, sel, b), idx in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] is None, kv[0][1] or 0, kv[0][2])):
        os_ = [outcomes[i] for i in idx]
        ts = [truths[i] for i in idx]
        out.append(BucketReport(
            model_kind=model_kind,
            view=view,
            selectivity=sel,
            alpha_bucket=b,
            query_count=len(idx),
            mean_recall=float(np.mean([query_recall(o, t) for o, t in zip(os_, ts)])),
            mean_leaf_accesses=float(np.mean([o.leaf_accesses for o in os_])),
            mean_io_ms=float(np.mean([cost.io_ms(o.leaf_accesses) for o in os_])),
            fallback_fraction=float(np.mean([o.path == "ai_then_fallback" for o in os_])),
            ai_fraction=float(np.mean([o.path != "rtree" for o in os_])),
            precision=float(np.mean([query_precision(o, t.rect) for o, t in zip(os_, ts)])),
            mean_query_ms=float(np.mean([query_time(o, cost) for o in os_])),
            mean_cpu_ms=float(np.mean([o.wall_cpu_ms for o in os_])),
        ))
    return out


@dataclass
class Footprint:
    components: dict[str, int]
    tree_bytes: int

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def overhead_pct(self) -> float:
        return 100.0 * self.total / self.tree_bytes if self.tree_bytes else float("nan")

    def overhead_text(self) -> str:
        return f"{self.overhead_pct:.2f}%"

    def to_record(self) -> dict:
        return {"components": dict(self.components), "total_bytes": self.total, "tree_bytes": self.tree_bytes,
                "overhead_pct": round(self.overhead_pct, 2)}


def model_footprint(components: dict[str, object], tree_bytes: int) -> Footprint:
    """Serialized size of every component; values may be byte counts, bytes or models."""
    from .grid import GridModelIndex, index_size
    from .serialization import serialize_model

    sizes = {}
    for name, comp in components.items():
        if comp is None:
            raise ValueError(f"component {name!r} has not been trained")
        if isinstance(comp, int):
            sizes[name] = comp
        elif isinstance(comp, (bytes, bytearray)):
            sizes[name] = len(comp)
        elif isinstance(comp, GridModelIndex):
            sizes[name] = index_size(comp)
        else:
            sizes[name] = len(serialize_model(comp))
    return Footprint(sizes, tree_bytes)


# -- report writers ---------------------------------------------------------


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def format_table(reports: Sequence[BucketReport], timed: bool = False) -> str:
    cols = ["model_kind", "view", "selectivity", "alpha_bucket", "query_count", "mean_recall",
            "mean_leaf_accesses", "mean_io_ms", "fallback_fraction", "ai_fraction", "precision"]
    if timed:
        cols += ["mean_query_ms", "mean_cpu_ms"]
    rows = [cols]
    for r in reports:
        d = asdict(r)
        rows.append([_fmt(d[c]) for c in cols])
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows) + "\n"


def write_csv(reports: Sequence[BucketReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = None
        for r in reports:
            d = asdict(r)
            if w is None:
                w = csv.DictWriter(fh, fieldnames=list(d))
                w.writeheader()
            w.writerow(d)


def _fmt(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) < 1e6 else f"{v:.4g}"
    return str(v)
