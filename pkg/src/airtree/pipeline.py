"""Build, train, evaluate and mutate stages with file artifacts in between."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .geometry import Point
from .grid import GridModelIndex, load_index, save_index
from .hybrid import GridPredictor, HybridIndex, OraclePredictor, rtree_baseline
from .metrics import BucketReport, CostModel, aggregate, format_table, model_footprint, query_recall, write_csv, write_jsonl
from .mutation import MutableIndex, MutationPolicy, load_script, replay
from .rtree import RTree, build_tree
from .serialization import load_model, save_model
from .training import TrainConfig, train_models
from .workload import (QueryProfile, alpha_bucket, export_csv, ingest_csv, load_profiles, profile_queries,
                       sample_workload, save_profiles, split_workload, synthetic_points)

log = logging.getLogger(__name__)

STAGES = ("build", "train", "eval", "mutate")
ORACLE = "oracle"
BASELINE = "rtree"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def stage(self, name: str) -> Path:
        return self.root / name

    @property
    def points(self) -> Path:
        return self.root / "build" / "points.csv"

    @property
    def snapshot(self) -> Path:
        return self.root / "build" / "tree.snapshot"


def stage(name: str):
    """Wrap a stage so failures name it and leave an INVALID marker."""

    def wrap(fn):
        def run(cfg: ExperimentConfig, out, *args, **kw):
            lay = Layout(out)
            d = lay.stage(name)
            if d.exists():
                shutil.rmtree(d)
            d.mkdir(parents=True)
            try:
                return fn(cfg, lay, *args, **kw)
            except Exception as exc:
                (d / "INVALID").write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
                raise StageError(name, exc) from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


# -- build -----------------------------------------------------------------


def load_points(cfg: ExperimentConfig) -> list[Point]:
    ds = cfg.dataset
    if ds.source == "csv":
        pts = ingest_csv(ds.path, ds.x_column, ds.y_column)
    else:
        pts = synthetic_points(ds.n, ds.clusters, tuple(ds.spread), seed=cfg.seed)
    if ds.limit is not None:
        pts = pts[: ds.limit]
    return pts


def build_stats(tree: RTree) -> dict:
    fills = np.array([len(leaf.entries) for leaf in tree.leaves()])
    hist, _ = np.histogram(fills / tree.max_entries, bins=10, range=(0.0, 1.0))
    return {"leaf_count": tree.leaf_count, "depth": tree.depth(), "points": int(fills.sum()),
            "max_entries": tree.max_entries, "mean_fill": round(float(fills.mean()) / tree.max_entries, 6),
            "fill_histogram": hist.tolist(), "id_digest": tree.id_digest}


@stage("build")
def cmd_build(cfg: ExperimentConfig, lay: Layout) -> dict:
    """Insert every point one at a time, number the leaves and persist the snapshot."""
    pts = load_points(cfg)
    t0 = time.perf_counter()
    tree = build_tree(pts, cfg.max_entries)
    seconds = time.perf_counter() - t0
    export_csv(pts, lay.points)
    tree.save(lay.snapshot)
    stats = build_stats(tree)
    stats["snapshot_sha256"] = sha256_file(lay.snapshot)
    stats["points_sha256"] = sha256_file(lay.points)
    _dump(stats, lay.stage("build") / "stats.json")
    _dump({"build_seconds": round(seconds, 3)}, lay.stage("build") / "timings.json")
    log.info("built %d leaves, depth %d, in %.1f s", stats["leaf_count"], stats["depth"], seconds)
    return stats


def load_tree(lay: Layout) -> RTree:
    _require(lay, "build")
    return RTree.load(lay.snapshot)


def _require(lay: Layout, name: str) -> None:
    d = lay.stage(name)
    if not d.exists():
        raise FileNotFoundError(f"run the {name} stage first ({d} missing)")
    if (d / "INVALID").exists():
        raise RuntimeError(f"{name} artifacts are invalid: {(d / 'INVALID').read_text().strip()}")


# -- train -----------------------------------------------------------------


@stage("train")
def cmd_train(cfg: ExperimentConfig, lay: Layout) -> dict:
    """Profile a workload, split it and train the router plus one grid index per model kind."""
    tree = load_tree(lay)
    pts = sorted(tree.live_points(), key=lambda p: p.oid)
    d = lay.stage("train")
    profiles, wreport = sample_workload(tree, pts, cfg.selectivities, cfg.alpha_buckets, cfg.queries_per_cell,
                                        cfg.seed, cfg.max_candidates)
    split = split_workload(profiles, cfg.split_ratios, cfg.seed, cfg.alpha_buckets)
    for name, part in zip(("train", "validation", "test"), split.parts()):
        save_profiles(part, d / f"{name}.jsonl")
    t0 = time.perf_counter()
    models = train_models(tree, split, cfg.train_config())
    seconds = time.perf_counter() - t0
    save_model(models.router, d / "router.airm")
    for kind, index in models.indexes.items():
        save_index(index, d / kind)
    artifacts = {"tree_digest": tree.id_digest, "snapshot_sha256": sha256_file(lay.snapshot), "files": {}}
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        artifacts["files"][f.relative_to(d).as_posix()] = sha256_file(f)
    report = {
        "workload": {"populations": [[s, b, n] for (s, b), n in sorted(wreport.populations.items())],
                     "candidates": [[s, n] for s, n in sorted(wreport.candidates.items())],
                     "short_cells": [list(c) for c in wreport.short_cells]},
        "split": {k: len(v) for k, v in zip(("train", "validation", "test"), split.parts())},
        **models.reports,
    }
    _dump(report, d / "report.json")
    _dump(artifacts, d / "artifacts.json")
    _dump({"train_seconds": round(seconds, 3)}, d / "timings.json")
    return artifacts


def load_models(lay: Layout, tree: RTree, kinds) -> tuple[object, dict[str, GridModelIndex]]:
    _require(lay, "train")
    d = lay.stage("train")
    art = _read(d / "artifacts.json")
    if art["tree_digest"] != tree.id_digest or art["snapshot_sha256"] != sha256_file(lay.snapshot):
        raise ValueError("trained artifacts belong to a different tree snapshot")
    for rel, digest in art["files"].items():
        if sha256_file(d / rel) != digest:
            raise ValueError(f"artifact {rel} was modified after training")
    router = load_model(d / "router.airm")
    indexes = {k: load_index(d / k / f"{k}_manifest.json") for k in kinds}
    return router, indexes


# -- eval ------------------------------------------------------------------


def hybrids(cfg: ExperimentConfig, tree: RTree, router, indexes: dict, cost: CostModel) -> dict[str, HybridIndex]:
    out = {k: HybridIndex(tree, router, GridPredictor(idx), cost_model=cost) for k, idx in indexes.items()}
    if cfg.oracle_predictor:
        out[ORACLE] = HybridIndex(tree, None, OraclePredictor(tree), cost_model=cost, routing="ai")
    return out


@stage("eval")
def cmd_eval(cfg: ExperimentConfig, lay: Layout) -> list[BucketReport]:
    """Run the test split through every hybrid and the plain R-tree; write reports."""
    tree = load_tree(lay)
    router, indexes = load_models(lay, tree, cfg.model_kinds)
    test = load_profiles(lay.stage("train") / "test.jsonl")
    cost = CostModel(cfg.io_ms)
    d = lay.stage("eval")
    reports: list[BucketReport] = []
    per_query = []
    base = [rtree_baseline(tree, p.rect, cost) for p in test]
    for p, o in zip(test, base):
        query_recall(o, p, tree.id_digest)
    reports += aggregate(base, test, BASELINE, cost, cfg.alpha_buckets)
    for kind, h in hybrids(cfg, tree, router, indexes, cost).items():
        outs = h.run_batch([p.rect for p in test])
        for i, (o, p) in enumerate(zip(outs, test)):
            o.recall_vs_truth = query_recall(o, p, tree.id_digest)
            per_query.append({"model_kind": kind, "query": i, "alpha_bucket": alpha_bucket(p.alpha, cfg.alpha_buckets),
                              "tn": len(p.true_leaf_ids), "vn": p.visited_count, **o.to_record()})
        reports += aggregate(outs, test, kind, cost, cfg.alpha_buckets)
    tree_bytes = lay.snapshot.stat().st_size
    footprints = {k: model_footprint({"router": router, "grid": idx}, tree_bytes).to_record() for k, idx in indexes.items()}
    art = _read(lay.stage("train") / "artifacts.json")
    header = {"type": "header", "config": cfg.to_dict(), "tree_digest": tree.id_digest,
              "artifacts": art["files"], "snapshot_sha256": art["snapshot_sha256"]}
    records = [header] + [{"type": "bucket", **r.deterministic()} for r in reports]
    records += [{"type": "footprint", "model_kind": k, **f} for k, f in footprints.items()]
    write_jsonl(records, d / "report.jsonl")
    write_jsonl(per_query, d / "queries.jsonl")
    (d / "report.txt").write_text(format_table(reports) + "\n" + footprint_table(footprints), encoding="utf-8")
    write_csv(reports, d / "report.csv")
    write_jsonl(timing_records(reports), d / "timings.jsonl")
    (d / "timings.txt").write_text(format_table(reports, timed=True), encoding="utf-8")
    return reports


def timing_records(reports: list[BucketReport]) -> list[dict]:
    """Timed means per bucket plus the ratio against the R-tree baseline."""
    base = {(r.view, r.selectivity, r.alpha_bucket): r for r in reports if r.model_kind == BASELINE}
    out = []
    for r in reports:
        b = base.get(("by_true_alpha", r.selectivity, r.alpha_bucket)) if r.view == "by_true_alpha" else None
        out.append({"model_kind": r.model_kind, "view": r.view, "selectivity": r.selectivity,
                    "alpha_bucket": r.alpha_bucket, "mean_query_ms": r.mean_query_ms, "mean_cpu_ms": r.mean_cpu_ms,
                    "time_ratio_vs_rtree": (r.mean_query_ms / b.mean_query_ms) if b and b.mean_query_ms else None})
    return out


def footprint_table(footprints: dict[str, dict]) -> str:
    lines = ["model_kind  router_bytes  grid_bytes  total_bytes  tree_bytes  overhead"]
    for k, f in footprints.items():
        c = f["components"]
        lines.append(f"{k:>10}  {c['router']:>12}  {c['grid']:>10}  {f['total_bytes']:>11}  {f['tree_bytes']:>10}  "
                     f"{f['overhead_pct']:.2f}%")
    return "\n".join(lines) + "\n"


# -- mutate ----------------------------------------------------------------


class RetrainPlan:
    """Rebuilds a hybrid on a compacted tree: re-profile, re-split, retrain one kind."""

    def __init__(self, cfg: ExperimentConfig, kind: str, profiles: list[QueryProfile], train_cfg: TrainConfig | None = None):
        self.cfg = cfg
        self.kind = kind
        self.workload = [(p.rect, p.selectivity) for p in profiles]
        self.train_cfg = train_cfg or _single_kind(cfg.train_config(), kind)

    def __call__(self, tree: RTree, old: HybridIndex) -> HybridIndex:
        by_sel: dict = {}
        for rect, sel in self.workload:
            by_sel.setdefault(sel, []).append(rect)
        profiles = [p for sel, rects in by_sel.items() for p in profile_queries(tree, rects, sel)]
        split = split_workload(profiles, self.cfg.split_ratios, self.cfg.seed, self.cfg.alpha_buckets)
        models = train_models(tree, split, self.train_cfg)
        idx = models.indexes[self.kind]
        return HybridIndex(tree, models.router, GridPredictor(idx), old.fallback_enabled, old.cost_model)


def _single_kind(tc: TrainConfig, kind: str) -> TrainConfig:
    tc.model_kinds = (kind,)
    return tc


def serving_kind(cfg: ExperimentConfig) -> str:
    return "dct" if "dct" in cfg.model_kinds else cfg.model_kinds[0]


def replay_report(res, index: MutableIndex) -> dict:
    queries = []
    for q in res.queries:
        queries.append({"line": q.line, "label": q.label, "path": q.path, "leaves_read": q.leaves_read,
                        "result_count": len(q.result_oids), "truth_count": q.truth_count,
                        "recall": 1.0 if q.truth_count == 0 else min(len(q.result_oids), q.truth_count) / q.truth_count})
    return {"operations": len(res.log), "case_histogram": {str(k): v for k, v in res.log.case_histogram().items()},
            "splits": sum(r.split for r in res.log), "overflow_created": sum(r.overflow_created for r in res.log),
            "flagged_leaves": sorted(index.flagged), "queries": queries, "retrains": res.retrains}


@stage("mutate")
def cmd_mutate(cfg: ExperimentConfig, lay: Layout, script_path=None) -> dict:
    """Replay a mutation script under each configured insert policy."""
    script_path = script_path or cfg.mutation.script
    if script_path is None:
        raise ValueError("no mutation script given")
    ops = load_script(script_path)
    kind = serving_kind(cfg)
    d = lay.stage("mutate")
    profiles = []
    for name in ("train", "validation", "test"):
        profiles += load_profiles(lay.stage("train") / f"{name}.jsonl")
    out = {"script": Path(script_path).name, "script_sha256": sha256_file(script_path), "model_kind": kind, "policies": {}}
    m = cfg.mutation
    for policy in m.policies:
        tree = load_tree(lay)
        router, indexes = load_models(lay, tree, [kind])
        hybrid = HybridIndex(tree, router, GridPredictor(indexes[kind]), cost_model=CostModel(cfg.io_ms))
        pol = MutationPolicy(policy, m.overflow_when, m.retrain_trigger, m.fallback_limit, m.window, m.chain_cap)
        index = MutableIndex(hybrid, pol, RetrainPlan(cfg, kind, profiles))
        res = replay(index, ops)
        res.log.to_jsonl(d / f"{policy}_log.jsonl")
        out["policies"][policy] = replay_report(res, index)
    _dump(out, d / "report.json")
    return out


def cmd_all(cfg: ExperimentConfig, out, script_path=None) -> dict:
    result = {"build": cmd_build(cfg, out), "train": cmd_train(cfg, out), "eval": cmd_eval(cfg, out)}
    if script_path or cfg.mutation.script:
        result["mutate"] = cmd_mutate(cfg, out, script_path)
    return result


def echo_config(cfg: ExperimentConfig, out) -> None:
    Path(out).mkdir(parents=True, exist_ok=True)
    _dump(cfg.to_dict(), Path(out) / "config.json")

