"""Canned insert scenarios on tiny hand-built trees.

Each case file names its leaves L1..Ln in order, runs a short mutation script
and lists the leaves every labelled query should touch, per insert policy and
per view (plain R-tree search, or the AI path with fixed stale predictions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import yaml

from .geometry import Point, Rect
from .hybrid import HybridIndex
from .mutation import MutableIndex, MutationPolicy, parse_script, replay
from .rtree import RTree, tree_from_leaves

POLICIES = {
    "in_place": MutationPolicy("in_place"),
    "out_of_place": MutationPolicy("out_of_place"),
    "out_of_place_always": MutationPolicy("out_of_place", overflow_when="always"),
}
VIEWS = ("rtree", "ai")
CASE_NAMES = ("case1", "case2", "case3", "case4")


class StaticPredictor:
    """Fixed leaf predictions per query rectangle; nothing for unknown ones."""

    tree_digest = None

    def __init__(self, table: dict[Rect, set[int]]):
        self.table = table

    def predict(self, rect: Rect) -> set[int]:
        return set(self.table.get(rect, ()))

    def covers(self, rect: Rect) -> bool:
        return True


@dataclass
class ScenarioRun:
    touched: dict[str, list[str]]
    results: dict[str, list[int]]
    cases: list[int]
    tree: RTree


@dataclass
class Scenario:
    name: str
    title: str
    max_entries: int
    leaves: list[list[tuple[float, float]]]
    script: str
    predict: dict[str, list[str]] = field(default_factory=dict)
    expect: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(d["name"], d.get("title", ""), int(d["max_entries"]),
                   [[tuple(map(float, p)) for p in leaf] for leaf in d["leaves"]],
                   d["script"], d.get("predict", {}), d.get("expect", {}))

    def build_tree(self) -> RTree:
        groups, oid = [], 0
        for leaf in self.leaves:
            groups.append([Point(x, y, oid + i) for i, (x, y) in enumerate(leaf)])
            oid += len(leaf)
        return tree_from_leaves(groups, self.max_entries)

    def run(self, policy: str, view: str) -> ScenarioRun:
        if view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}")
        tree = self.build_tree()
        ops = parse_script(self.script)
        names = {i: f"L{i + 1}" for i in range(tree.leaf_count)}
        ids = {v: k for k, v in names.items()}
        if view == "ai":
            table = {Rect(*op.args): {ids[n] for n in self.predict.get(op.label, [])}
                     for op in ops if op.op == "query"}
            hybrid = HybridIndex(tree, None, StaticPredictor(table), fallback_enabled=False, routing="ai")
        else:
            hybrid = HybridIndex(tree, None, None, routing="rtree")
        index = MutableIndex(hybrid, POLICIES[policy])
        res = replay(index, ops)
        for rec in res.log:
            if rec.new_leaf_id is not None:
                names[rec.new_leaf_id] = names[rec.leaf_id] + "'"

        def name(label: str) -> str:
            base = label.rstrip("'")
            return names[int(base)] + label[len(base):]

        touched = {q.label: sorted(name(t) for t in q.leaves_read) for q in res.queries if q.label}
        results = {q.label: sorted(q.result_oids) for q in res.queries if q.label}
        cases = [r.case for r in res.log if r.case is not None]
        return ScenarioRun(touched, results, cases, tree)


def load_scenario(name: str) -> Scenario:
    text = resources.files("airtree.cases").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return Scenario.from_dict(yaml.safe_load(text))


def load_all() -> list[Scenario]:
    return [load_scenario(n) for n in CASE_NAMES]


def check(scenario: Scenario) -> list[str]:
    """Every mismatch between a scenario's runs and its expectations."""
    problems = []
    exp = scenario.expect
    for view in VIEWS:
        for policy, want in exp.get(view, {}).items():
            run = scenario.run(policy, view)
            if exp.get("cases") is not None and run.cases != exp["cases"]:
                problems.append(f"{scenario.name} {policy}: cases {run.cases} != {exp['cases']}")
            for label, leaves in want.items():
                got = run.touched.get(label)
                if got != sorted(leaves):
                    problems.append(f"{scenario.name} {view}/{policy} {label}: touched {got} != {sorted(leaves)}")
            key = "results" if view == "rtree" else "ai_results"
            for label, oids in exp.get(key, {}).items():
                if run.results.get(label) != sorted(oids):
                    problems.append(f"{scenario.name} {view}/{policy} {label}: results {run.results.get(label)} != {sorted(oids)}")
    return problems
