"""Feed-forward multi-label leaf predictor trained with BCE or an object-weighted loss.

Both objectives share one form. For a query with per-leaf weights ``w_in``
(objects wanted from the leaf) and ``w_out`` (objects read for nothing)

    loss = (1/s) * sum_j  w_in_j * -log p_j  +  w_out_j * -log(1 - p_j)

Label BCE is ``w_in = t``, ``w_out = 1 - t``, ``s = L``. The object-level loss
takes ``b = A p`` per object and sums object BCE over a support set, which
collapses to the same form with ``w_in = A^T (t * support)``,
``w_out = A^T ((1 - t) * support)`` and ``s = sum(support)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .rtree import RTree

log = logging.getLogger(__name__)

EPS = 1e-7
OBJECTIVES = ("bce", "custom")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


# -- incidence matrix -------------------------------------------------------


@dataclass
class IncidenceMatrix:
    """Binary m x n object/leaf incidence with exactly one 1 per row."""

    m: int
    n: int
    leaf_of: np.ndarray
    row_oids: np.ndarray

    def __post_init__(self):
        self._row = {int(o): i for i, o in enumerate(self.row_oids)}

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(range(self.m), self.leaf_of.tolist()))

    @property
    def nnz(self) -> int:
        return len(self.leaf_of)

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.leaf_of, minlength=self.n)

    def to_sparse(self) -> sparse.csr_matrix:
        data = np.ones(self.m)
        return sparse.csr_matrix((data, (np.arange(self.m), self.leaf_of)), shape=(self.m, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``A @ x`` for a length-n vector."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected a vector of length {self.n}, got {x.shape[-1]}")
        return x[..., self.leaf_of]

    def rmatvec(self, g: np.ndarray) -> np.ndarray:
        """``A.T @ g`` for a length-m vector."""
        g = np.asarray(g, dtype=float)
        if g.shape[-1] != self.m:
            raise ValueError(f"expected a vector of length {self.m}, got {g.shape[-1]}")
        return np.bincount(self.leaf_of, weights=g, minlength=self.n)

    def object_vector(self, oids: Iterable[int]) -> np.ndarray:
        v = np.zeros(self.m)
        rows = [self._row[int(o)] for o in oids]
        v[rows] = 1.0
        return v

    def support(self, leaf_ids: Iterable[int]) -> np.ndarray:
        """1 for every object stored in one of ``leaf_ids``."""
        mask = np.zeros(self.n, dtype=bool)
        mask[list(leaf_ids)] = True
        return mask[self.leaf_of].astype(float)


def build_incidence(tree: RTree) -> IncidenceMatrix:
    """Incidence over live objects; overflow-chain entries belong to their primary leaf."""
    if not tree.ids_assigned:
        raise ValueError("leaf IDs not assigned")
    oids, cols = [], []
    for leaf in tree.leaves():
        for node in [leaf, *leaf.overflow_run()]:
            for p in node.live_entries():
                oids.append(p.oid)
                cols.append(leaf.leaf_id)
    order = np.argsort(np.asarray(oids, dtype=np.int64), kind="stable")
    return IncidenceMatrix(
        m=len(oids),
        n=tree.leaf_count,
        leaf_of=np.asarray(cols, dtype=np.int64)[order],
        row_oids=np.asarray(oids, dtype=np.int64)[order],
    )


# -- losses -----------------------------------------------------------------


def _clip(p):
    return np.clip(p, EPS, 1.0 - EPS)


def loss_bce(predicted: np.ndarray, target: np.ndarray) -> float:
    """Mean over labels of -[t log p + (1-t) log(1-p)], p clamped to [eps, 1-eps]."""
    p = _clip(np.asarray(predicted, dtype=float))
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def loss_custom(predicted: np.ndarray, object_vector: np.ndarray, A: IncidenceMatrix,
                visited_leaf_ids: Iterable[int] | None = None) -> float:
    """Object-level BCE between ``b = A p`` and the query's object vector.

    Averages over objects stored in ``visited_leaf_ids``; over all m objects
    when that is None.
    """
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(object_vector, dtype=float)
    if p.shape != (A.n,):
        raise ValueError(f"prediction length {p.shape} does not match {A.n} leaves")
    if t.shape != (A.m,):
        raise ValueError(f"object vector length {t.shape} does not match {A.m} objects")
    b = _clip(A.matvec(p))
    sup = np.ones(A.m) if visited_leaf_ids is None else A.support(visited_leaf_ids)
    s = sup.sum()
    if s == 0:
        return 0.0
    return float(-(sup * (t * np.log(b) + (1 - t) * np.log(1 - b))).sum() / s)


@dataclass
class Targets:
    """Per-example leaf weights feeding the shared loss form."""

    w_in: np.ndarray
    w_out: np.ndarray
    scale: np.ndarray

    def __len__(self) -> int:
        return len(self.scale)

    def subset(self, idx) -> "Targets":
        return Targets(self.w_in[idx], self.w_out[idx], self.scale[idx])


def bce_targets(Y: np.ndarray) -> Targets:
    Y = np.asarray(Y, dtype=float)
    return Targets(Y, 1.0 - Y, np.full(len(Y), float(Y.shape[1])))


def custom_targets(object_vectors: Sequence[np.ndarray], visited: Sequence[Iterable[int]] | None,
                   A: IncidenceMatrix) -> Targets:
    """Fold object vectors through ``A^T``; ``visited`` None means full-m support."""
    n = len(object_vectors)
    w_in = np.zeros((n, A.n))
    w_out = np.zeros((n, A.n))
    scale = np.zeros(n)
    for i, t in enumerate(object_vectors):
        sup = np.ones(A.m) if visited is None else A.support(visited[i])
        w_in[i] = A.rmatvec(t * sup)
        w_out[i] = A.rmatvec((1.0 - t) * sup)
        scale[i] = max(sup.sum(), 1.0)
    return Targets(w_in, w_out, scale)


def weighted_loss(P: np.ndarray, T: Targets) -> np.ndarray:
    """Per-example loss of the shared form for probabilities ``P`` (B, L)."""
    Pc = _clip(P)
    return -(T.w_in * np.log(Pc) + T.w_out * np.log(1 - Pc)).sum(axis=1) / T.scale


def _logit_grad(P: np.ndarray, T: Targets) -> np.ndarray:
    """d(per-example loss)/d(logit); zero where the clamp is active."""
    live = (P > EPS) & (P < 1.0 - EPS)
    return np.where(live, T.w_out * P - T.w_in * (1 - P), 0.0) / T.scale[:, None]


# -- network ----------------------------------------------------------------


@dataclass
class NNConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    full_support: bool = False


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class FeedForwardModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    objective: str = "bce"
    config: NNConfig = field(default_factory=NNConfig)
    history: dict = field(default_factory=lambda: {"train": [], "validation": []})
    meta: dict = field(default_factory=dict)

    @property
    def n_labels(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def initialize(cls, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator, **kw):
        dims = [n_in, *hidden, n_out]
        ws, bs = [], []
        for a, b in zip(dims, dims[1:]):
            bound = 1.0 / np.sqrt(a)
            ws.append(rng.uniform(-bound, bound, (a, b)))
            bs.append(rng.uniform(-bound, bound, b))
        return cls(ws, bs, np.zeros(n_in), np.ones(n_in), **kw)

    def forward(self, X: np.ndarray):
        """Probabilities plus the activations needed for backprop."""
        h = (np.asarray(X, dtype=float) - self.mean) / self.std
        acts = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        z = h @ self.weights[-1] + self.biases[-1]
        return _sigmoid(z), acts

    def backward(self, acts, dz: np.ndarray):
        gw, gb = [None] * len(self.weights), [None] * len(self.biases)
        g = dz
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            if i:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return gw, gb

    def loss_and_grads(self, X: np.ndarray, T: Targets):
        P, acts = self.forward(X)
        loss = float(weighted_loss(P, T).mean())
        gw, gb = self.backward(acts, _logit_grad(P, T) / len(X))
        return loss, gw, gb

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=float).reshape(-1, 4))[0]

    def predict_proba(self, x) -> dict[int, float]:
        p = self.predict_proba_matrix(np.asarray([tuple(x)]))[0]
        return dict(enumerate(p.tolist()))

    def predict_set(self, rect, cutoff: float = 0.5) -> set[int]:
        p = self.predict_proba_matrix(np.asarray([tuple(rect)]))[0]
        return {int(j) for j in np.flatnonzero(p >= cutoff)}


def predict(model: FeedForwardModel, rect, cutoff: float = 0.5) -> set[int]:
    return model.predict_set(rect, cutoff)


def prior_logits(targets: Targets, floor: float = 1e-4) -> np.ndarray:
    """Output biases at each label's corpus-wide positive rate.

    Labels that never carry weight start at ``floor`` instead of sitting at
    one half, which matters for the custom loss where most leaves get no
    gradient from most examples.
    """
    pos = targets.w_in.sum(axis=0)
    tot = pos + targets.w_out.sum(axis=0)
    rate = np.divide(pos, tot, out=np.zeros_like(pos), where=tot > 0)
    rate = np.clip(rate, floor, 1 - floor)
    return np.log(rate) - np.log1p(-rate)


def train(X: np.ndarray, targets: Targets, objective: str = "bce", config: NNConfig | None = None,
          validation: tuple[np.ndarray, Targets] | None = None) -> FeedForwardModel:
    """Mini-batch Adam on the shared loss form; records per-epoch losses."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    config = config or NNConfig()
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("no training examples")
    rng = np.random.default_rng(config.seed)
    n_out = targets.w_in.shape[1]
    model = FeedForwardModel.initialize(X.shape[1], config.hidden, n_out, rng, objective=objective, config=config)
    model.biases[-1] = prior_logits(targets)
    model.mean = X.mean(axis=0)
    std = X.std(axis=0)
    model.std = np.where(std > 0, std, 1.0)
    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    b1, b2 = config.beta1, config.beta2
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, gw, gb = model.loss_and_grads(X[idx], targets.subset(idx))
            total += loss * len(idx)
            step += 1
            for p, g, a, v in zip(params, gw + gb, m1, m2):
                a *= b1
                a += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= config.learning_rate * (a / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + config.adam_eps)
        epoch_loss = total / len(X)
        if not np.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergedError(epoch, epoch_loss)
        model.history["train"].append(epoch_loss)
        if validation is not None and len(validation[0]):
            P, _ = model.forward(validation[0])
            model.history["validation"].append(float(weighted_loss(P, validation[1]).mean()))
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return model


def config_dict(config: NNConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
