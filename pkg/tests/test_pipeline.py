import json

import pytest

from airtree.cli import main
from airtree.config import make_config
from airtree.hybrid import GridPredictor, HybridIndex
from airtree.metrics import query_recall
from airtree.mutation import MutableIndex, MutationPolicy
from airtree.pipeline import (
    Layout,
    RetrainPlan,
    StageError,
    cmd_all,
    cmd_build,
    cmd_eval,
    load_models,
    load_tree,
    sha256_file,
)
from airtree.rtree import RTree
from airtree.workload import alpha_bucket, load_profiles

SMALL = {
    "dataset": {"n": 4000},
    "max_entries": 40,
    "selectivities": [0.0025, 0.005],
    "queries_per_cell": 25,
    "max_candidates": 50_000,
    "model_kinds": ["dct", "rf", "nn_bce", "nn_custom"],
    "grid_candidates": {"dct": [[2, 2], [4, 4]], "rf": [[2, 2]], "nn_bce": [[1, 1]], "nn_custom": [[1, 1]]},
    "model_params": {"dct": {"min_samples_leaf": 2}, "rf": {"n_estimators": 5}, "nn_bce": {}, "nn_custom": {}},
    "router": {"n_estimators": 10},
    "nn": {"hidden": [16, 16], "epochs": 3},
    "oracle_predictor": True,
}

SCRIPT = """# a few mutations around a cluster
insert 0.5 0.5
insert 0.51 0.5
delete 3
update 4 0.2 0.2
query 0.4 0.4 0.6 0.6 Q1
retrain
query 0.4 0.4 0.6 0.6 Q2
"""

DETERMINISTIC = ["build/tree.snapshot", "build/stats.json", "build/points.csv", "train/artifacts.json",
                 "train/report.json", "train/test.jsonl", "eval/report.jsonl", "eval/report.txt",
                 "eval/queries.jsonl", "mutate/report.json", "mutate/in_place_log.jsonl",
                 "mutate/out_of_place_log.jsonl"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    script = root / "script.txt"
    script.write_text(SCRIPT)
    cfg = make_config(SMALL)
    for name in ("a", "b"):
        cmd_all(cfg, root / name, script)
    return root, cfg


def test_runs_are_byte_identical(runs):
    root, _ = runs
    for rel in DETERMINISTIC:
        assert sha256_file(root / "a" / rel) == sha256_file(root / "b" / rel), rel


def test_build_outputs(runs):
    root, cfg = runs
    stats = json.loads((root / "a" / "build" / "stats.json").read_text())
    assert stats["points"] == 4000 and stats["leaf_count"] >= 4000 // 40
    tree = load_tree(Layout(root / "a"))
    tree.check_invariants()
    assert stats["id_digest"] == tree.id_digest


def test_train_artifacts_for_every_kind(runs):
    root, cfg = runs
    lay = Layout(root / "a")
    report = json.loads((lay.stage("train") / "report.json").read_text())
    assert set(report["grids"]) == set(cfg.model_kinds)
    assert [(r["rows"], r["cols"]) for r in report["grids"]["dct"]] == [(2, 2), (4, 4)]
    assert sum(report["split"].values()) == sum(n for _, _, n in report["workload"]["populations"])
    router, indexes = load_models(lay, load_tree(lay), cfg.model_kinds)
    assert set(indexes) == set(cfg.model_kinds) and router.test_accuracy is not None


def test_eval_report_contents(runs):
    root, cfg = runs
    rows = [json.loads(line) for line in (root / "a" / "eval" / "report.jsonl").read_text().splitlines()]
    assert rows[0]["type"] == "header" and rows[0]["config"] == cfg.to_dict()
    buckets = [r for r in rows if r["type"] == "bucket"]
    kinds = {r["model_kind"] for r in buckets}
    assert kinds == {"rtree", "oracle", *cfg.model_kinds}
    assert all(r["precision"] == 1.0 for r in buckets)
    assert all(r["mean_recall"] == 1.0 for r in buckets if r["model_kind"] in ("rtree", "oracle"))
    foot = [r for r in rows if r["type"] == "footprint"]
    assert {r["model_kind"] for r in foot} == set(cfg.model_kinds)
    assert all(r["overhead_pct"] > 0 and r["total_bytes"] > 0 for r in foot)
    assert "mean_query_ms" not in (root / "a" / "eval" / "report.txt").read_text()
    timings = [json.loads(x) for x in (root / "a" / "eval" / "timings.jsonl").read_text().splitlines()]
    assert all(t["time_ratio_vs_rtree"] == pytest.approx(1.0) for t in timings
               if t["model_kind"] == "rtree" and t["view"] == "by_true_alpha")


def test_oracle_rows_read_only_true_leaves(runs):
    root, _ = runs
    for line in (root / "a" / "eval" / "queries.jsonl").read_text().splitlines():
        q = json.loads(line)
        if q["model_kind"] == "oracle" and q["tn"]:
            assert q["leaf_accesses"] == q["tn"] <= q["vn"]


def test_mutate_report(runs):
    root, _ = runs
    rep = json.loads((root / "a" / "mutate" / "report.json").read_text())
    assert rep["script"] == "script.txt" and set(rep["policies"]) == {"in_place", "out_of_place"}
    for pol in rep["policies"].values():
        assert pol["operations"] == 5 and len(pol["retrains"]) == 1
        assert [q["label"] for q in pol["queries"]] == ["Q1", "Q2"]
        assert pol["retrains"][0]["before"] != pol["retrains"][0]["after"]


def test_rebuild_same_snapshot(tmp_path):
    cfg = make_config({"dataset": {"n": 2000}, "max_entries": 20})
    a = cmd_build(cfg, tmp_path / "a")
    b = cmd_build(cfg, tmp_path / "b")
    assert a["snapshot_sha256"] == b["snapshot_sha256"] and a["leaf_count"] >= 100


def test_csv_source(tmp_path):
    (tmp_path / "pts.csv").write_text("lon,lat\n" + "".join(f"{i % 37 / 37},{i % 41 / 41}\n" for i in range(500)))
    cfg = make_config({"dataset": {"source": "csv", "path": str(tmp_path / "pts.csv"), "x_column": "lon",
                                   "y_column": "lat", "limit": 300}, "max_entries": 16})
    assert cmd_build(cfg, tmp_path / "out")["points"] == 300


def test_stage_failure_marks_invalid(tmp_path):
    cfg = make_config(SMALL)
    with pytest.raises(StageError) as err:
        cmd_eval(cfg, tmp_path)
    assert err.value.stage == "eval" and (tmp_path / "eval" / "INVALID").exists()


def test_tampered_artifact_detected(runs, tmp_path):
    root, cfg = runs
    lay = Layout(root / "b")
    model = lay.stage("train") / "router.airm"
    data = model.read_bytes()
    model.write_bytes(data + b"\0")
    try:
        with pytest.raises(ValueError, match="modified"):
            load_models(lay, load_tree(lay), cfg.model_kinds)
    finally:
        model.write_bytes(data)


def test_retrain_recovers_low_overlap_recall(runs):
    root, cfg = runs
    lay = Layout(root / "a")
    tree = load_tree(lay)
    router, indexes = load_models(lay, tree, ["dct"])
    test = load_profiles(lay.stage("train") / "test.jsonl")
    workload = []
    for name in ("train", "validation", "test"):
        workload += load_profiles(lay.stage("train") / f"{name}.jsonl")
    hybrid = HybridIndex(tree, router, GridPredictor(indexes["dct"]), routing="ai", fallback_enabled=False)
    index = MutableIndex(hybrid, MutationPolicy("in_place"), RetrainPlan(cfg, "dct", workload))
    pts = sorted(tree.live_points(), key=lambda p: p.oid)
    for p in pts[::2]:
        index.update_point(p.oid, p.y, p.x)

    def low_alpha_recall():
        t = index.tree
        rects = [p.rect for p in test]
        truths = [t.range_search(r) for r in rects]
        vals = []
        for r, st in zip(rects, truths):
            if st.visited_leaf_ids and alpha_bucket(len(st.true_leaf_ids) / len(st.visited_leaf_ids)) <= 0.25:
                got = len(index.hybrid.query(r).results)
                vals.append(1.0 if not st.results else got / len(st.results))
        return sum(vals) / len(vals)

    before = low_alpha_recall()
    index.retrain()
    index.hybrid.set_routing("ai")
    index.hybrid.fallback_enabled = False
    after = low_alpha_recall()
    assert after >= before


def test_cli_end_to_end(tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    small = dict(SMALL, model_kinds=["dct"], oracle_predictor=False)
    cfg_file.write_text(json.dumps(small))
    out = str(tmp_path / "out")
    assert main(["build", "--config", str(cfg_file), "--out", out]) == 0
    assert json.loads(capsys.readouterr().out)["points"] == 4000
    assert main(["train", "--config", str(cfg_file), "--out", out]) == 0
    assert "trained dct" in capsys.readouterr().out
    assert main(["eval", "--config", str(cfg_file), "--out", out, "--io-ms", "2"]) == 0
    assert "by_true_alpha" in capsys.readouterr().out
    saved = json.loads((tmp_path / "out" / "config.json").read_text())
    assert saved["io_ms"] == 2.0 and saved["model_kinds"] == ["dct"]
    script = tmp_path / "s.txt"
    script.write_text("insert 0.5 0.5\nquery 0 0 1 1\n")
    assert main(["mutate", "--config", str(cfg_file), "--out", out, "--script", str(script)]) == 0
    assert "in_place" in capsys.readouterr().out


def test_cli_error_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("max_entries: 1\n")
    assert main(["build", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["build", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 1
    assert "stage eval failed" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])
