"""Multi-label decision trees and random forests over query rectangles.

Splits minimize the mean per-label Gini impurity of the two children. Leaves
keep sparse positive counts per label; a label's probability at a leaf is its
positive fraction among the training rows that reached it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .workload import features, split_workload


N_FEATURES = 4


def corpus_digest(X: np.ndarray, Y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(Y, dtype=np.uint8).tobytes())
    h.update(f"{X.shape}{Y.shape}".encode())
    return h.hexdigest()


@dataclass
class DecisionTreeModel:
    """Flat array tree. ``feature[i] == -1`` marks a leaf."""

    n_labels: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    label_ptr: np.ndarray
    label_idx: np.ndarray
    label_cnt: np.ndarray
    max_depth: int | None = None
    min_samples_leaf: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._fast = None

    @property
    def node_count(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.feature[i] >= 0:
                stack.append((int(self.left[i]), d + 1))
                stack.append((int(self.right[i]), d + 1))
        return best

    def _lists(self):
        if self._fast is None:
            self._fast = (self.feature.tolist(), self.threshold.tolist(), self.left.tolist(), self.right.tolist())
        return self._fast

    def leaf_of(self, x: Sequence[float]) -> int:
        feat, thr, left, right = self._lists()
        i = 0
        while feat[i] >= 0:
            i = left[i] if x[feat[i]] <= thr[i] else right[i]
        return i

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of ``X``."""
        X = np.asarray(X, dtype=float).reshape(-1, N_FEATURES)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def leaf_distribution(self, leaf: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.label_ptr[leaf], self.label_ptr[leaf + 1]
        return self.label_idx[a:b], self.label_cnt[a:b] / self.n_samples[leaf]

    def predict_proba(self, x: Sequence[float]) -> dict[int, float]:
        idx, frac = self.leaf_distribution(self.leaf_of(x))
        return dict(zip(idx.tolist(), frac.tolist()))

    def predict_set(self, rect, cutoff: float = 0.5) -> set[int]:
        return _select(self.predict_proba(tuple(rect)), cutoff)

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        leaves = self.apply(X)
        out = np.zeros((len(leaves), self.n_labels))
        for r, leaf in enumerate(leaves):
            idx, frac = self.leaf_distribution(leaf)
            out[r, idx] = frac
        return out


@dataclass
class RandomForestModel:
    trees: list[DecisionTreeModel]
    n_labels: int
    n_estimators: int
    feature_subsample: float = 1.0
    bootstrap_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    def predict_proba(self, x: Sequence[float]) -> dict[int, float]:
        acc: dict[int, float] = {}
        for t in self.trees:
            for j, f in t.predict_proba(x).items():
                acc[j] = acc.get(j, 0.0) + f
        k = len(self.trees)
        return {j: v / k for j, v in acc.items()}

    def predict_set(self, rect, cutoff: float = 0.5) -> set[int]:
        return _select(self.predict_proba(tuple(rect)), cutoff)

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        out = self.trees[0].predict_proba_matrix(X)
        for t in self.trees[1:]:
            out += t.predict_proba_matrix(X)
        return out / len(self.trees)


def _select(proba: dict[int, float], cutoff: float) -> set[int]:
    return {j for j, f in proba.items() if f > 0 and f >= cutoff}


def predict_labels(model, rect, cutoff: float = 0.5) -> set[int]:
    """Leaf IDs whose (mean) positive fraction is at least ``cutoff``; never a never-seen label."""
    return model.predict_set(rect, cutoff)


def predict_label_matrix(model, X: np.ndarray, cutoff: float = 0.5) -> np.ndarray:
    P = model.predict_proba_matrix(X)
    return (P > 0) & (P >= cutoff)


# -- fitting ----------------------------------------------------------------


def _best_split(X, Yf, idx, min_leaf, features):
    """Best ``(feature, threshold)`` for rows ``idx``, or None when no valid split exists."""
    n = len(idx)
    if n < 2 * min_leaf:
        return None
    best_score, best = -math.inf, None
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    ok_size = (nl >= min_leaf) & (nr >= min_leaf)
    for f in features:
        xs_all = X[idx, f]
        order = np.argsort(xs_all, kind="stable")
        xs = xs_all[order]
        valid = ok_size & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        cum = np.cumsum(Yf[order], axis=0)[:-1]
        total = cum[-1] + Yf[order[-1]]
        rest = total - cum
        score = np.einsum("ij,ij->i", cum, cum) / nl + np.einsum("ij,ij->i", rest, rest) / nr
        score[~valid] = -math.inf
        pos = int(np.argmax(score))
        if best is None or score[pos] > best_score + 1e-12 * max(1.0, abs(best_score)):
            best_score = float(score[pos])
            lo, hi = xs[pos], xs[pos + 1]
            thr = lo + (hi - lo) / 2
            if not lo <= thr < hi:
                thr = lo
            best = (f, float(thr))
    return best


def fit_multilabel_tree(X: np.ndarray, Y: np.ndarray, max_depth: int | None = None, min_samples_leaf: int = 1,
                        feature_subsample: float = 1.0, rng: np.random.Generator | None = None,
                        sample_idx: np.ndarray | None = None) -> DecisionTreeModel:
    """Grow a multi-label tree on rows ``X`` (n, 4) and binary labels ``Y`` (n, L)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need at least one example")
    if X.shape[1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
    if Y.ndim != 2 or len(Y) != len(X):
        raise ValueError("label matrix must have one row per example")
    if min_samples_leaf < 1:
        raise ValueError("min_samples_leaf must be ≥ 1")
    if feature_subsample < 1.0 and rng is None:
        raise ValueError("feature subsampling needs an rng")
    root_idx = np.arange(len(X)) if sample_idx is None else np.asarray(sample_idx)
    n_feat = max(1, round(feature_subsample * N_FEATURES))

    feature, threshold, left, right, n_samples = [], [], [], [], []
    leaf_lists: list[tuple[np.ndarray, np.ndarray]] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n_samples.append(0)
        leaf_lists.append((np.empty(0, np.int32), np.empty(0, np.int32)))
        return len(feature) - 1

    stack = [(new_node(), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        Ysub = Y[idx]
        cols = np.flatnonzero(Ysub.any(axis=0))
        Ya = Ysub[:, cols]
        n_samples[node] = len(idx)
        pure = bool((Ya == Ya[0]).all())
        split = None
        if not pure and (max_depth is None or depth < max_depth):
            feats = range(N_FEATURES) if n_feat == N_FEATURES else sorted(rng.choice(N_FEATURES, n_feat, replace=False))
            split = _best_split(X, Ya.astype(np.float64), idx, min_samples_leaf, feats)
        if split is None:
            counts = Ya.sum(axis=0)
            keep = counts > 0
            leaf_lists[node] = (cols[keep].astype(np.int32), counts[keep].astype(np.int32))
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node()
        right[node] = new_node()
        stack.append((right[node], idx[~mask], depth + 1))
        stack.append((left[node], idx[mask], depth + 1))
    ptr = np.zeros(len(feature) + 1, dtype=np.int64)
    for i, (li, _) in enumerate(leaf_lists):
        ptr[i + 1] = ptr[i] + len(li)
    return DecisionTreeModel(
        n_labels=Y.shape[1],
        feature=np.array(feature, dtype=np.int8),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        n_samples=np.array(n_samples, dtype=np.int32),
        label_ptr=ptr,
        label_idx=np.concatenate([li for li, _ in leaf_lists]).astype(np.int32),
        label_cnt=np.concatenate([lc for _, lc in leaf_lists]).astype(np.int32),
        max_depth=max_depth,
        min_samples_leaf=min_samples_leaf,
    )


def fit_random_forest(X: np.ndarray, Y: np.ndarray, n_estimators: int = 50, max_depth: int | None = None,
                      min_samples_leaf: int = 1, feature_subsample: float = 1.0, seed: int = 0) -> RandomForestModel:
    """Bootstrap-aggregated multi-label trees; prediction is the mean of tree distributions."""
    if n_estimators < 1:
        raise ValueError("n_estimators must be ≥ 1")
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("need at least one example")
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_estimators):
        sample = np.sort(rng.integers(0, len(X), len(X)))
        trees.append(fit_multilabel_tree(X, Y, max_depth, min_samples_leaf, feature_subsample, rng, sample))
    return RandomForestModel(trees, Y.shape[1], n_estimators, feature_subsample, seed)


# -- overlap router ---------------------------------------------------------

HIGH_OVERLAP = "high_overlap"
LOW_OVERLAP = "low_overlap"


def router_label(alpha, tau: float) -> int:
    """0 for high overlap (alpha ≤ tau), 1 for low overlap."""
    a = alpha if not isinstance(alpha, float) else Fraction(str(alpha))
    return 0 if a <= Fraction(str(tau)) else 1


@dataclass
class BinaryRouterModel:
    """Forest over one label: "the query is low-overlap"."""

    forest: RandomForestModel
    tau: float
    decision_cutoff: float = 0.5
    test_accuracy: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._tables = None

    def _compiled(self):
        if self._tables is None:
            tables = []
            for t in self.forest.trees:
                value = [0.0] * t.node_count
                for i in np.flatnonzero(t.feature < 0):
                    idx, frac = t.leaf_distribution(i)
                    value[i] = float(frac[0]) if len(idx) else 0.0
                tables.append((*t._lists(), value))
            self._tables = tables
        return self._tables

    def prob_low(self, rect) -> float:
        x = tuple(rect)
        total = 0.0
        for feat, thr, left, right, value in self._compiled():
            i = 0
            while feat[i] >= 0:
                i = left[i] if x[feat[i]] <= thr[i] else right[i]
            total += value[i]
        return total / len(self.forest.trees)

    def route(self, rect) -> str:
        return LOW_OVERLAP if self.prob_low(rect) >= self.decision_cutoff else HIGH_OVERLAP

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """1 where a row is routed low-overlap."""
        return (self.forest.predict_proba_matrix(X)[:, 0] >= self.decision_cutoff).astype(np.uint8)


def fit_binary_router(profiles, tau: float = 0.75, n_estimators: int = 50, max_depth: int | None = None,
                      min_samples_leaf: int = 1, seed: int = 0, test_fraction: float = 0.2,
                      decision_cutoff: float = 0.5) -> BinaryRouterModel:
    """Train the overlap router on a stratified train part and record held-out accuracy."""
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    labels = np.array([router_label(p.alpha, tau) for p in profiles], dtype=np.uint8)
    if len(set(labels.tolist())) < 2:
        raise ValueError(
            f"router corpus has a single class at tau={tau}; widen the workload to include "
            "both high- and low-overlap queries"
        )
    split = split_workload(profiles, (1.0 - test_fraction, test_fraction), seed)
    train, test = split.train, split.validation
    Xtr = features(train)
    ytr = np.array([[router_label(p.alpha, tau)] for p in train], dtype=np.uint8)
    forest = fit_random_forest(Xtr, ytr, n_estimators, max_depth, min_samples_leaf, seed=seed)
    forest.meta["corpus_digest"] = corpus_digest(Xtr, ytr)
    model = BinaryRouterModel(forest, tau, decision_cutoff)
    if test:
        yte = np.array([router_label(p.alpha, tau) for p in test], dtype=np.uint8)
        model.test_accuracy = float((model.predict_matrix(features(test)) == yte).mean())
    model.meta.update(train_size=len(train), test_size=len(test))
    return model
