#!/usr/bin/env python3
"""Regenerates the bundled simulator scenarios under crates/core/scenarios.

Usage: python3 scripts/gen_scenarios.py
"""

import json
import math
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "scenarios"

NODE_TYPES = ["scan", "filter", "hash_join", "aggregate", "sort", "exchange"]

TABLES = {
    "orders": 4e6,
    "lineitem": 1.6e7,
    "customer": 4e5,
    "part": 6e5,
    "supplier": 4e4,
    "nation": 25,
    "store_sales": 8e6,
    "date_dim": 7.3e4,
}

AGGS = ["sum", "count", "avg", "min", "max"]
OPS = ["=", "!=", "<", "<=", ">", ">="]

# name, kind, domain, effect (a, b) or None, node types affected
SMALL_KNOBS = [
    ("max_memory", "continuous", (256, 16384), (1.2, 0.7), ["hash_join", "aggregate", "sort"]),
    ("max_threads", "discrete", (1, 32), (1.5, 0.75), ["scan", "hash_join", "aggregate", "exchange"]),
    ("scan_batch_rows", "discrete", (1024, 65536), (1.0, 0.35), ["scan"]),
    ("pushdown_depth", "discrete", (0, 8), (0.8, 0.6), ["scan", "filter"]),
    ("join_bucket_factor", "continuous", (0.5, 8.0), (1.4, 0.3), ["hash_join"]),
    ("agg_spill_ratio", "continuous", (0.1, 0.9), (1.0, 0.5), ["aggregate"]),
    ("sort_buffer_mb", "continuous", (8, 1024), (1.3, 0.65), ["sort"]),
    ("exchange_buffer_kb", "discrete", (64, 8192), (1.1, 0.4), ["exchange"]),
    ("enable_runtime_filter", "categorical", ["off", "on"], (0.6, 1.0), ["hash_join", "filter"]),
    ("result_cache_ttl_s", "discrete", (0, 3600), None, []),
]

FAILURE_RULES = [
    {"kind": "memory", "knob": "max_memory", "base": 0.15, "span": 0.3},
    {
        "kind": "parallelism",
        "knob": "max_threads",
        "mem_knob": "max_memory",
        "intercept": 0.55,
        "slope": 0.6,
    },
]


def wide_knobs(rng):
    knobs = list(SMALL_KNOBS)
    for i in range(15):
        if i in (4, 11):
            knobs.append((f"aux_flag_{i}", "discrete", (0, 1), None, []))
            continue
        types = rng.sample(NODE_TYPES, rng.choice([1, 1, 2]))
        effect = (round(rng.uniform(0.6, 1.5), 3), round(rng.uniform(0.2, 0.8), 3))
        kind = rng.choice(["continuous", "discrete"])
        domain = (0.0, 1.0) if kind == "continuous" else (0, 64)
        knobs.append((f"aux_knob_{i}", kind, domain, effect, types))
    return knobs


def grid_optimum(knob):
    """Effect optimum moved onto the knob's value grid so it is reachable."""
    _, kind, domain, (_, b), _ = knob
    if kind == "discrete":
        steps = domain[1] - domain[0]
        return round(round(b * steps) / steps, 12)
    if kind == "categorical":
        steps = len(domain) - 1
        return round(round(b * steps) / steps, 12) if steps else 0.0
    return b


def knob_spec(name, kind, domain):
    if kind == "categorical":
        return {"name": name, "kind": kind, "categories": list(domain)}
    return {"name": name, "kind": kind, "min": domain[0], "max": domain[1]}


class PlanBuilder:
    def __init__(self, rng, qid):
        self.rng = rng
        self.qid = qid
        self.nodes = []

    def add(self, op, card, own_cost, children=(), **extra):
        child_cost = sum(self.nodes[c]["cost_est"] for c in children)
        node = {
            "id": None,
            "op": op,
            "tables": extra.get("tables", []),
            "columns": extra.get("columns", []),
            "predicates": extra.get("predicates", []),
            "join": extra.get("join"),
            "aggs": extra.get("aggs", []),
            "card_est": round(card * math.exp(self.rng.gauss(0, 0.3)), 1),
            "cost_est": round(child_cost + own_cost * 1e3, 3),
            "children": list(children),
            "_own": own_cost,
        }
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, table):
        rng = self.rng
        rows = TABLES[table]
        cols = [f"{table}.id", f"{table}.c{rng.randrange(3)}"]
        scan = self.add("scan", rows, 2e-7 * rows + 0.01, tables=[table], columns=cols)
        if rng.random() < 0.6:
            sel = rng.uniform(0.05, 0.6)
            preds = [
                {"column": f"{table}.c{rng.randrange(3)}", "op": rng.choice(OPS), "value": round(rng.random(), 3)}
                for _ in range(rng.choice([1, 1, 2]))
            ]
            return self.add("filter", rows * sel, 3e-8 * rows + 0.01, [scan], predicates=preds), rows * sel, table
        return scan, rows, table

    def build(self, n_tables):
        rng = self.rng
        tables = rng.sample(sorted(TABLES), n_tables)
        parts = [self.leaf(t) for t in tables]
        while len(parts) > 1:
            (l, lc, lt), (r, rc, rt) = parts.pop(0), parts.pop(0)
            if rng.random() < 0.4:
                r = self.add("exchange", rc, 3e-8 * rc + 0.01, [r])
            card = max(lc, rc) * rng.uniform(0.2, 1.0)
            j = self.add(
                "hash_join",
                card,
                6e-8 * (lc + rc) + 0.02,
                [l, r],
                join=[f"{lt}.id", f"{rt}.id"],
                columns=[f"{lt}.id", f"{rt}.id"],
            )
            parts.insert(0, (j, card, lt))
        top, card, _ = parts[0]
        if rng.random() < 0.5:
            top = self.add("exchange", card, 3e-8 * card + 0.01, [top])
        groups = max(1.0, card * rng.uniform(1e-4, 1e-2))
        top = self.add("aggregate", groups, 5e-8 * card + 0.02, [top], aggs=rng.sample(AGGS, rng.choice([1, 2])))
        if rng.random() < 0.6:
            top = self.add("sort", groups, 1e-7 * groups * math.log(groups + 2) + 0.01, [top])
        return self.finish(top)

    def finish(self, root):
        # Ids in BFS order from the root.
        order, queue = [], [root]
        while queue:
            i = queue.pop(0)
            order.append(i)
            queue.extend(self.nodes[i]["children"])
        new_id = {old: k for k, old in enumerate(order)}
        nodes, costs = [], []
        for old in order:
            n = dict(self.nodes[old])
            costs.append(round(n.pop("_own"), 6))
            n["id"] = new_id[old]
            n["children"] = [new_id[c] for c in n["children"]]
            nodes.append(n)
        plan = {"query_id": self.qid, "nodes": nodes, "root": 0}
        return plan, costs


def scenario(name, seed, knobs, n_queries):
    rng = random.Random(seed)
    queries = []
    seen_types = set()
    while len(queries) < n_queries:
        qid = f"q{len(queries) + 1:02d}"
        plan, costs = PlanBuilder(rng, qid).build(rng.choice([2, 3, 3, 4, 5]))
        queries.append({"query_id": qid, "plan": plan, "base_costs": costs})
        seen_types.update(n["op"] for n in plan["nodes"])
    assert seen_types == set(NODE_TYPES), seen_types
    truth = [[1 if t in k[4] else 0 for k in knobs] for t in NODE_TYPES]
    return {
        "name": name,
        "seed": seed,
        "noise_sigma": 0.05,
        "node_types": NODE_TYPES,
        "knobs": [knob_spec(k[0], k[1], k[2]) for k in knobs],
        "effects": [{"knob": k[0], "a": k[3][0], "b": grid_optimum(k)} for k in knobs if k[3]],
        "ground_truth": truth,
        "failure_rules": FAILURE_RULES,
        "queries": queries,
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    small = scenario("synth-small", 42, SMALL_KNOBS, 20)
    wide = scenario("synth-wide", 43, wide_knobs(random.Random(7)), 20)
    for s in (small, wide):
        path = OUT / f"{s['name']}.json"
        path.write_text(json.dumps(s, indent=1) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
