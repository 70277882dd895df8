"""Binary model files.

Layout: ``b"AIRM"``, little-endian u16 version, u32 header length, a compact
JSON header (sorted keys) and then the raw little-endian arrays it lists, in
order. Output is a pure function of the model, so byte length doubles as the
reported model size.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import FeedForwardModel, NNConfig
from .trees import BinaryRouterModel, DecisionTreeModel, RandomForestModel

MAGIC = b"AIRM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class ModelFormatError(ValueError):
    pass


def pack(kind: str, header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    specs, blobs = [], []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        specs.append([name, a.dtype.str, list(a.shape)])
        blobs.append(a.tobytes())
    meta = json.dumps({"kind": kind, "header": header, "arrays": specs}, sort_keys=True, separators=(",", ":"))
    hb = meta.encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(blobs)


def unpack(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise ModelFormatError("truncated model file")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != VERSION:
        raise ModelFormatError(f"model format version {version}, expected {VERSION}")
    meta = json.loads(data[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    pos = _PREFIX.size + hlen
    arrays = {}
    for name, dt, shape in meta["arrays"]:
        dtype = np.dtype(dt)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(data):
            raise ModelFormatError(f"truncated array {name}")
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ModelFormatError("trailing bytes after arrays")
    return meta["kind"], meta["header"], arrays


_TREE_FIELDS = ("feature", "threshold", "left", "right", "n_samples", "label_ptr", "label_idx", "label_cnt")


def _forest_arrays(trees: list[DecisionTreeModel]) -> list[tuple[str, np.ndarray]]:
    out = []
    for f in _TREE_FIELDS:
        parts = [getattr(t, f) for t in trees]
        out.append((f + "_len", np.array([len(p) for p in parts], dtype=np.int64)))
        out.append((f, np.concatenate(parts)))
    return out


def _forest_from(arrays, n_labels: int, max_depth, min_samples_leaf) -> list[DecisionTreeModel]:
    split = {}
    for f in _TREE_FIELDS:
        bounds = np.cumsum(arrays[f + "_len"])[:-1]
        split[f] = np.split(arrays[f], bounds)
    k = len(arrays["feature_len"])
    return [
        DecisionTreeModel(n_labels=n_labels, max_depth=max_depth, min_samples_leaf=min_samples_leaf,
                          **{f: split[f][i] for f in _TREE_FIELDS})
        for i in range(k)
    ]


def serialize_model(model) -> bytes:
    if isinstance(model, BinaryRouterModel):
        fr = model.forest
        header = {
            "feature_dim": 4,
            "n_labels": fr.n_labels,
            "n_estimators": fr.n_estimators,
            "max_depth": fr.trees[0].max_depth,
            "min_samples_leaf": fr.trees[0].min_samples_leaf,
            "feature_subsample": fr.feature_subsample,
            "bootstrap_seed": fr.bootstrap_seed,
            "tau": model.tau,
            "decision_cutoff": model.decision_cutoff,
            "test_accuracy": model.test_accuracy,
            "meta": {**fr.meta, **model.meta},
        }
        return pack("router", header, _forest_arrays(fr.trees))
    if isinstance(model, RandomForestModel):
        if not model.trees:
            raise ValueError("cannot serialize an empty forest")
        header = {
            "feature_dim": 4,
            "n_labels": model.n_labels,
            "n_estimators": model.n_estimators,
            "max_depth": model.trees[0].max_depth,
            "min_samples_leaf": model.trees[0].min_samples_leaf,
            "feature_subsample": model.feature_subsample,
            "bootstrap_seed": model.bootstrap_seed,
            "meta": model.meta,
        }
        return pack("rf", header, _forest_arrays(model.trees))
    if isinstance(model, DecisionTreeModel):
        header = {
            "feature_dim": 4,
            "n_labels": model.n_labels,
            "max_depth": model.max_depth,
            "min_samples_leaf": model.min_samples_leaf,
            "meta": model.meta,
        }
        return pack("dct", header, [(f, getattr(model, f)) for f in _TREE_FIELDS])
    if isinstance(model, FeedForwardModel):
        cfg = model.config
        header = {
            "feature_dim": model.dims[0],
            "n_labels": model.n_labels,
            "dims": model.dims,
            "objective": model.objective,
            "config": {**cfg.__dict__, "hidden": list(cfg.hidden)},
            "meta": model.meta,
        }
        arrays = [("mean", model.mean), ("std", model.std)]
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays += [(f"w{i}", w), (f"b{i}", b)]
        return pack("nn", header, arrays)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def deserialize_model(data: bytes):
    kind, h, a = unpack(data)
    if kind == "dct":
        return DecisionTreeModel(n_labels=h["n_labels"], max_depth=h["max_depth"], min_samples_leaf=h["min_samples_leaf"],
                                 meta=h["meta"], **{f: a[f] for f in _TREE_FIELDS})
    if kind in ("rf", "router"):
        trees = _forest_from(a, h["n_labels"], h["max_depth"], h["min_samples_leaf"])
        forest = RandomForestModel(trees, h["n_labels"], h["n_estimators"], h["feature_subsample"], h["bootstrap_seed"])
        if kind == "rf":
            forest.meta = h["meta"]
            return forest
        meta = dict(h["meta"])
        if "corpus_digest" in meta:
            forest.meta["corpus_digest"] = meta.pop("corpus_digest")
        return BinaryRouterModel(forest, h["tau"], h["decision_cutoff"], h["test_accuracy"], meta)
    if kind == "nn":
        n_layers = len(h["dims"]) - 1
        cfg = dict(h["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return FeedForwardModel(
            weights=[a[f"w{i}"] for i in range(n_layers)],
            biases=[a[f"b{i}"] for i in range(n_layers)],
            mean=a["mean"],
            std=a["std"],
            objective=h["objective"],
            config=NNConfig(**cfg),
            meta=h["meta"],
        )
    raise ModelFormatError(f"unknown model kind {kind!r}")


def model_kind(data: bytes) -> str:
    return unpack(data)[0]


def save_model(model, path) -> int:
    data = serialize_model(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path):
    return deserialize_model(Path(path).read_bytes())
