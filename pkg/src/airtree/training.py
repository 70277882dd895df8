"""End-to-end model training against one tree state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Rect
from .grid import DEFAULT_CANDIDATES, GridModelIndex, TrainingSet, score_index, train_grid
from .nn import IncidenceMatrix, NNConfig, build_incidence, custom_targets
from .rtree import RTree
from .trees import BinaryRouterModel, fit_binary_router
from .workload import QueryProfile, WorkloadSplit, features, label_matrix

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01)


@dataclass
class TrainConfig:
    model_kinds: tuple[str, ...] = ("dct", "rf", "nn_bce", "nn_custom")
    tau: float = 0.75
    router: dict = field(default_factory=lambda: {"n_estimators": 50, "max_depth": None, "min_samples_leaf": 1})
    params: dict = field(default_factory=lambda: {
        "dct": {"min_samples_leaf": 5},
        "rf": {"n_estimators": 50, "min_samples_leaf": 1},
        "nn_bce": {},
        "nn_custom": {},
    })
    grid_candidates: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_CANDIDATES.items()})
    cutoff_candidates: tuple[float, ...] = DEFAULT_CUTOFFS
    target_recall: float = 0.9
    tune_router_cutoff: bool = True
    router_cutoffs: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
    aggregation: str = "union"
    nn: NNConfig = field(default_factory=NNConfig)
    seed: int = 0


@dataclass
class TrainedModels:
    router: BinaryRouterModel
    indexes: dict[str, GridModelIndex]
    tree_digest: str
    reports: dict = field(default_factory=dict)


def data_bounds(tree: RTree) -> Rect:
    if tree.root.mbr is None:
        raise ValueError("empty tree")
    return Rect(*tree.root.mbr)


def make_training_set(profiles: Sequence[QueryProfile], tree: RTree, with_custom: bool = False,
                      A: IncidenceMatrix | None = None, full_support: bool = False) -> TrainingSet:
    X = features(profiles)
    Y = label_matrix(profiles, tree.leaf_count)
    custom = None
    if with_custom:
        A = A or build_incidence(tree)
        vecs = [A.object_vector(p.oid for p in tree.range_search(q.rect).results) for q in profiles]
        visited = None if full_support else [q.visited_leaf_ids for q in profiles]
        custom = custom_targets(vecs, visited, A)
    return TrainingSet(X, Y, custom)


def choose_cutoff(index: GridModelIndex, validation: Sequence[QueryProfile], candidates: Sequence[float],
                  target_recall: float) -> tuple[float, list[dict]]:
    """Largest cutoff whose validation recall reaches the target, else the best-recall one."""
    rows = []
    for c in sorted(set(candidates), reverse=True):
        rows.append({"cutoff": c, **score_index(index, validation, c)})
    for r in rows:
        if r["recall"] >= target_recall:
            return r["cutoff"], rows
    best = max(rows, key=lambda r: (r["recall"], r["cutoff"]))
    return best["cutoff"], rows


def fit_index(kind: str, train: TrainingSet, validation: Sequence[QueryProfile], tree: RTree,
              cfg: TrainConfig) -> GridModelIndex:
    """Grid-size and cutoff search on validation; ties in recall go to fewer cells."""
    params = dict(cfg.params.get(kind, {}))
    if kind.startswith("nn"):
        params["nn"] = cfg.nn
    bounds = data_bounds(tree)
    best, best_key, report = None, None, []
    sizes = sorted((tuple(s) for s in cfg.grid_candidates.get(kind, [(1, 1)])), key=lambda s: (s[0] * s[1], s))
    for size in sizes:
        index = train_grid(train, kind, size, bounds, params, cfg.seed, cfg.aggregation, 0.5, tree.id_digest)
        if validation:
            cutoff, rows = choose_cutoff(index, validation, cfg.cutoff_candidates, cfg.target_recall)
        else:
            cutoff, rows = 0.5, []
        index.cutoff = cutoff
        chosen = next((r for r in rows if r["cutoff"] == cutoff), {"recall": 0.0, "predicted_leaves": 0.0})
        entry = {"rows": size[0], "cols": size[1], "cells": len(index.cells), "cutoff": cutoff,
                 "recall": chosen["recall"], "predicted_leaves": chosen["predicted_leaves"], "cutoff_scan": rows}
        report.append(entry)
        log.info("%s %dx%d cutoff %.2f: validation recall %.4f, %.2f leaves", kind, size[0], size[1], cutoff,
                 chosen["recall"], chosen["predicted_leaves"])
        key = chosen["recall"]
        if best is None or key > best_key:
            best, best_key = index, key
    best.tuning_report = report
    return best


def estimated_accesses(index: GridModelIndex, profiles: Sequence[QueryProfile]) -> tuple[np.ndarray, np.ndarray]:
    """Per query: leaf reads on the AI path (with fallback if it finds nothing) and on the R-tree path."""
    preds = index.predict_many([p.rect for p in profiles])
    ai, rt = [], []
    for s, p in zip(preds, profiles):
        found = any(k in s for k in p.per_leaf_hits)
        ai.append(len(s) + (0 if found else p.leaf_accesses))
        rt.append(p.leaf_accesses)
    return np.array(ai, dtype=float), np.array(rt, dtype=float)


def choose_router_cutoff(router: BinaryRouterModel, index: GridModelIndex, validation: Sequence[QueryProfile],
                         candidates: Sequence[float]) -> tuple[float, list[dict]]:
    """Decision cutoff minimizing mean estimated leaf reads on validation; ties go nearest 0.5."""
    if not validation:
        return router.decision_cutoff, []
    ai, rt = estimated_accesses(index, validation)
    p_low = router.forest.predict_proba_matrix(features(validation))[:, 0]
    rows = []
    for c in candidates:
        to_rtree = p_low >= c
        rows.append({"cutoff": c, "mean_accesses": float(np.where(to_rtree, rt, ai).mean()),
                     "rtree_fraction": float(to_rtree.mean())})
    best = min(rows, key=lambda r: (round(r["mean_accesses"], 9), abs(r["cutoff"] - 0.5), r["cutoff"]))
    return best["cutoff"], rows


def train_models(tree: RTree, split: WorkloadSplit, cfg: TrainConfig) -> TrainedModels:
    """Router on the train part (its own 80/20 inside), one tuned grid index per model kind.

    Each index also carries the router decision cutoff tuned for it on validation.
    """
    if not tree.ids_assigned:
        raise ValueError("tree has no leaf IDs")
    router = fit_binary_router(split.train, cfg.tau, seed=cfg.seed, **cfg.router)
    router.meta["tree_digest"] = tree.id_digest
    need_custom = "nn_custom" in cfg.model_kinds
    train = make_training_set(split.train, tree, with_custom=need_custom, full_support=cfg.nn.full_support)
    indexes = {}
    for kind in cfg.model_kinds:
        indexes[kind] = fit_index(kind, train, split.validation, tree, cfg)
    routing = {}
    for kind, index in indexes.items():
        if cfg.tune_router_cutoff:
            index.router_cutoff, scan = choose_router_cutoff(router, index, split.validation, cfg.router_cutoffs)
            routing[kind] = {"router_cutoff": index.router_cutoff, "scan": scan}
    reports = {
        "router": {"test_accuracy": router.test_accuracy, "decision_cutoff": router.decision_cutoff, **router.meta},
        "grids": {k: idx.tuning_report for k, idx in indexes.items()},
        "routing": routing,
    }
    return TrainedModels(router, indexes, tree.id_digest, reports)


def label_counts(profiles: Sequence[QueryProfile], n_labels: int) -> np.ndarray:
    return label_matrix(profiles, n_labels).sum(axis=0)
