"""Uniform grid over the data space with one multi-label model per populated cell."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Rect
from .nn import NNConfig, Targets, bce_targets, train as train_nn
from .serialization import deserialize_model, serialize_model
from .trees import fit_multilabel_tree, fit_random_forest

log = logging.getLogger(__name__)

MODEL_KINDS = ("dct", "rf", "nn_bce", "nn_custom")
DEFAULT_CANDIDATES = {
    "dct": ((2, 2), (4, 4), (8, 8), (12, 12), (16, 16), (20, 20)),
    "rf": ((2, 2), (4, 4), (8, 8)),
    "nn_bce": ((1, 1),),
    "nn_custom": ((1, 1),),
}


Cell = tuple[int, int]


@dataclass(frozen=True)
class GridGeometry:
    bounds: Rect
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")

    @property
    def x_edges(self) -> np.ndarray:
        b = self.bounds
        e = b.x_min + (b.x_max - b.x_min) * np.arange(self.cols + 1) / self.cols
        e[-1] = b.x_max
        return e

    @property
    def y_edges(self) -> np.ndarray:
        b = self.bounds
        e = b.y_min + (b.y_max - b.y_min) * np.arange(self.rows + 1) / self.rows
        e[-1] = b.y_max
        return e

    def cell_rect(self, row: int, col: int) -> Rect:
        xe, ye = self.x_edges, self.y_edges
        return Rect(xe[col], ye[row], xe[col + 1], ye[row + 1])

    def cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def span(self, rect: Rect) -> tuple[int, int, int, int] | None:
        """Inclusive ``(r0, r1, c0, c1)`` of cells touching ``rect`` (closed), or None."""
        if not self.bounds.intersects(rect):
            return None
        xe, ye = self.x_edges, self.y_edges
        c0 = int(np.searchsorted(xe[1:], rect.x_min, "left"))
        c1 = int(np.searchsorted(xe[:-1], rect.x_max, "right")) - 1
        r0 = int(np.searchsorted(ye[1:], rect.y_min, "left"))
        r1 = int(np.searchsorted(ye[:-1], rect.y_max, "right")) - 1
        c0, r0 = min(c0, self.cols - 1), min(r0, self.rows - 1)
        c1, r1 = max(c1, 0), max(r1, 0)
        return r0, r1, c0, c1


def assign_to_cells(geometry: GridGeometry, rect: Rect) -> set[Cell]:
    sp = geometry.span(rect)
    if sp is None:
        return set()
    r0, r1, c0, c1 = sp
    return {(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)}


@dataclass
class TrainingSet:
    """Query features, leaf labels and, for the object-weighted loss, its targets."""

    X: np.ndarray
    Y: np.ndarray
    custom: Targets | None = None

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrainingSet(self.X[idx], self.Y[idx], None if self.custom is None else self.custom.subset(idx))


def fit_model(kind: str, data: TrainingSet, params: dict | None = None, seed: int = 0):
    params = dict(params or {})
    if kind == "dct":
        return fit_multilabel_tree(data.X, data.Y, params.get("max_depth"), params.get("min_samples_leaf", 1))
    if kind == "rf":
        return fit_random_forest(data.X, data.Y, params.get("n_estimators", 50), params.get("max_depth"),
                                 params.get("min_samples_leaf", 1), params.get("feature_subsample", 1.0), seed)
    if kind in ("nn_bce", "nn_custom"):
        cfg = params.get("nn") or NNConfig()
        if isinstance(cfg, dict):
            cfg = NNConfig(**{**cfg, "hidden": tuple(cfg.get("hidden", (64, 64, 64)))})
        cfg = NNConfig(**{**cfg.__dict__, "seed": seed})
        if kind == "nn_custom":
            if data.custom is None:
                raise ValueError("nn_custom needs object-weighted targets")
            return train_nn(data.X, data.custom, "custom", cfg)
        return train_nn(data.X, bce_targets(data.Y), "bce", cfg)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


@dataclass
class GridModelIndex:
    geometry: GridGeometry
    model_kind: str
    n_labels: int
    cells: dict[Cell, object] = field(default_factory=dict)
    histogram: dict[Cell, int] = field(default_factory=dict)
    aggregation: str = "union"
    cutoff: float = 0.5
    params: dict = field(default_factory=dict)
    tree_digest: str | None = None
    tuning_report: list = field(default_factory=list)
    router_cutoff: float | None = None

    def cell_predictions(self, rect: Rect, cutoff: float | None = None) -> dict[Cell, set[int] | None]:
        """Per overlapping cell: its predicted set, or None for an absent cell."""
        cut = self.cutoff if cutoff is None else cutoff
        out = {}
        for cell in sorted(assign_to_cells(self.geometry, rect)):
            model = self.cells.get(cell)
            out[cell] = None if model is None else model.predict_set(rect, cut)
        return out

    def predict(self, rect: Rect, cutoff: float | None = None) -> set[int]:
        return aggregate_predictions(self.cell_predictions(rect, cutoff), self.aggregation)

    def predict_many(self, rects: Sequence[Rect], cutoff: float | None = None) -> list[set[int]]:
        """Batch version of :meth:`predict` using matrix prediction per cell."""
        cut = self.cutoff if cutoff is None else cutoff
        per_cell: dict[Cell, list[int]] = {}
        spans = [assign_to_cells(self.geometry, r) for r in rects]
        for i, cs in enumerate(spans):
            for c in cs:
                if c in self.cells:
                    per_cell.setdefault(c, []).append(i)
        preds: dict[tuple[int, Cell], set[int]] = {}
        for c, rows in per_cell.items():
            X = np.array([list(rects[i]) for i in rows], dtype=float)
            P = self.cells[c].predict_proba_matrix(X)
            hit = (P > 0) & (P >= cut) if self.model_kind in ("dct", "rf") else P >= cut
            for i, row in zip(rows, hit):
                preds[(i, c)] = {int(j) for j in np.flatnonzero(row)}
        out = []
        for i, cs in enumerate(spans):
            out.append(aggregate_predictions({c: preds.get((i, c)) for c in sorted(cs)}, self.aggregation))
        return out


def aggregate_predictions(per_cell: dict[Cell, set[int] | None], mode: str = "union") -> set[int]:
    present = [s for s in per_cell.values() if s is not None]
    if not present:
        return set()
    if mode == "union":
        return set().union(*present)
    if mode == "vote":
        counts: dict[int, int] = {}
        for s in present:
            for j in s:
                counts[j] = counts.get(j, 0) + 1
        return {j for j, k in counts.items() if k > len(present) / 2}
    raise ValueError(f"unknown aggregation {mode!r}")


def predict_aggregate(index: GridModelIndex, rect: Rect, cutoff: float | None = None) -> set[int]:
    return index.predict(rect, cutoff)


def train_grid(data: TrainingSet, model_kind: str, size: tuple[int, int], bounds: Rect, params: dict | None = None,
               seed: int = 0, aggregation: str = "union", cutoff: float = 0.5,
               tree_digest: str | None = None) -> GridModelIndex:
    """One model per cell, trained on every query overlapping that cell."""
    if len(data) == 0:
        raise ValueError("empty training set")
    geom = GridGeometry(bounds, size[0], size[1])
    members: dict[Cell, list[int]] = {}
    for i, row in enumerate(data.X):
        cells = assign_to_cells(geom, Rect(*row))
        if not cells:
            log.warning("training query %d lies outside the grid bounds", i)
        for c in cells:
            members.setdefault(c, []).append(i)
    index = GridModelIndex(geom, model_kind, data.Y.shape[1], aggregation=aggregation, cutoff=cutoff,
                           params=dict(params or {}), tree_digest=tree_digest)
    for (r, c) in sorted(members):
        rows = members[(r, c)]
        index.histogram[(r, c)] = len(rows)
        index.cells[(r, c)] = fit_model(model_kind, data.subset(rows), params, seed + r * geom.cols + c)
    return index


def prediction_recall(predicted: set[int], per_leaf_hits: dict[int, int], result_count: int) -> float:
    """Share of a query's results stored in the predicted leaves; 1 for an empty result."""
    if result_count == 0:
        return 1.0
    return sum(v for k, v in per_leaf_hits.items() if k in predicted) / result_count


def score_index(index: GridModelIndex, profiles, cutoff: float | None = None) -> dict:
    preds = index.predict_many([p.rect for p in profiles], cutoff)
    rec = [prediction_recall(s, p.per_leaf_hits, p.result_count) for s, p in zip(preds, profiles)]
    return {
        "recall": float(np.mean(rec)) if rec else 0.0,
        "predicted_leaves": float(np.mean([len(s) for s in preds])) if preds else 0.0,
    }


def tune_grid_size(data: TrainingSet, validation, model_kind: str, candidates: Sequence[tuple[int, int]],
                   bounds: Rect, params: dict | None = None, seed: int = 0, aggregation: str = "union",
                   cutoff: float = 0.5, tree_digest: str | None = None) -> tuple[GridModelIndex, list[dict]]:
    """Train each candidate, score mean validation recall, keep the best (ties: fewer cells)."""
    if not candidates:
        raise ValueError("need at least one candidate grid size")
    best, best_score, report = None, -1.0, []
    for size in sorted(candidates, key=lambda s: (s[0] * s[1], s)):
        index = train_grid(data, model_kind, size, bounds, params, seed, aggregation, cutoff, tree_digest)
        score = score_index(index, validation) if validation else {"recall": 0.0, "predicted_leaves": 0.0}
        entry = {"rows": size[0], "cols": size[1], "cells": len(index.cells), **score}
        report.append(entry)
        log.info("%s grid %dx%d: validation recall %.4f", model_kind, size[0], size[1], score["recall"])
        if score["recall"] > best_score:
            best, best_score = index, score["recall"]
    best.tuning_report = report
    return best, report


# -- manifest ---------------------------------------------------------------


def save_index(index: GridModelIndex, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cells = []
    for (r, c), model in sorted(index.cells.items()):
        data = serialize_model(model)
        name = f"{index.model_kind}_cell_{r}_{c}.airm"
        (d / name).write_bytes(data)
        cells.append({"row": r, "col": c, "file": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "model_kind": index.model_kind,
        "bounds": list(index.geometry.bounds),
        "rows": index.geometry.rows,
        "cols": index.geometry.cols,
        "n_labels": index.n_labels,
        "aggregation": index.aggregation,
        "cutoff": index.cutoff,
        "router_cutoff": index.router_cutoff,
        "tree_digest": index.tree_digest,
        "params": _jsonable(index.params),
        "histogram": [[r, c, n] for (r, c), n in sorted(index.histogram.items())],
        "tuning_report": index.tuning_report,
        "cells": cells,
    }
    path = d / f"{index.model_kind}_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_index(manifest_path) -> GridModelIndex:
    path = Path(manifest_path)
    m = json.loads(path.read_text(encoding="utf-8"))
    geom = GridGeometry(Rect(*m["bounds"]), m["rows"], m["cols"])
    index = GridModelIndex(geom, m["model_kind"], m["n_labels"], aggregation=m["aggregation"], cutoff=m["cutoff"],
                           params=m["params"], tree_digest=m["tree_digest"], tuning_report=m["tuning_report"],
                           router_cutoff=m.get("router_cutoff"))
    index.histogram = {(r, c): n for r, c, n in m["histogram"]}
    for cell in m["cells"]:
        data = (path.parent / cell["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != cell["sha256"]:
            raise ValueError(f"model file {cell['file']} does not match its manifest digest")
        index.cells[(cell["row"], cell["col"])] = deserialize_model(data)
    return index


def index_size(index: GridModelIndex) -> int:
    return sum(len(serialize_model(m)) for m in index.cells.values())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, NNConfig):
        return _jsonable(obj.__dict__)
    return obj
