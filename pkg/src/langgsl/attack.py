"""Structural perturbations and the robustness sweep."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .config import TrainConfig, derive_seed
from .data import UNLABELED, SplitMasks, TextAttributedGraph
from .mutual import evaluate, featurize, fit_langgsl, vanilla_gcn

STRATEGIES = ("random_flip", "heterophily_add", "degree_targeted")
METHODS = ("vanilla_gcn", "langgsl_gslm", "langgsl_lm")


@dataclass(frozen=True)
class AttackSpec:
    rate: float
    strategy: str = "random_flip"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("perturbation rate must lie in [0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown attack strategy {self.strategy!r}")

    def budget(self, num_edges: int) -> int:
        # half-up rounding, not banker's
        return int(math.floor(self.rate * num_edges + 0.5))


def _edge_set(A) -> set:
    u = sp.triu(sp.csr_matrix(A), k=1).tocoo()
    return {(int(i), int(j)) for i, j, v in zip(u.row, u.col, u.data) if v != 0}


def _sample_non_edges(n, present: set, count: int, rng, allowed=None) -> list:
    """Uniform distinct non-edges ``(i < j)``; ``allowed(i, j)`` filters candidates."""
    if count == 0:
        return []
    total = n * (n - 1) // 2
    free = total - len(present)
    out: list = []
    chosen: set = set()
    # rejection sampling is fine while the graph is sparse; enumerate otherwise
    if free > 4 * count and allowed is None:
        while len(out) < count:
            i, j = rng.integers(0, n, 2)
            if i == j:
                continue
            pair = (int(min(i, j)), int(max(i, j)))
            if pair in present or pair in chosen:
                continue
            chosen.add(pair)
            out.append(pair)
        return out
    cands = [(i, j) for i in range(n) for j in range(i + 1, n)
             if (i, j) not in present and (allowed is None or allowed(i, j))]
    if len(cands) < count:
        raise ValueError(f"flip budget {count} exceeds the {len(cands)} available non-edges")
    idx = rng.choice(len(cands), size=count, replace=False)
    return [cands[k] for k in sorted(idx)]


def perturb_edges(A, spec: AttackSpec, labels=None) -> sp.csr_matrix:
    """Flip exactly ``round(rate * |E|)`` undirected entries of ``A``.

    ``random_flip`` splits the budget between deletions and additions,
    ``heterophily_add`` only adds edges between differently-labeled nodes, and
    ``degree_targeted`` flips pairs incident to the highest-degree nodes.
    """
    A = sp.csr_matrix(A, dtype=np.float64)
    n = A.shape[0]
    edges = _edge_set(A)
    budget = spec.budget(len(edges))
    rng = np.random.default_rng(spec.seed)
    if budget == 0:
        return A.copy()
    to_add: list = []
    to_del: list = []
    if spec.strategy == "random_flip":
        free = n * (n - 1) // 2 - len(edges)
        n_del = min(budget // 2, len(edges))
        n_add = budget - n_del
        if n_add > free:
            n_add, n_del = free, budget - free
        if n_del > len(edges) or n_add > free:
            raise ValueError(f"flip budget {budget} exceeds the number of possible flips")
        ordered = sorted(edges)
        to_del = [ordered[k] for k in sorted(rng.choice(len(ordered), n_del, replace=False))]
        to_add = _sample_non_edges(n, edges, n_add, rng)
    elif spec.strategy == "heterophily_add":
        if labels is None:
            raise ValueError("heterophily_add needs node labels")
        y = np.asarray(labels)
        known = y != UNLABELED
        to_add = _sample_non_edges(n, edges, budget, rng,
                                   allowed=lambda i, j: known[i] and known[j] and y[i] != y[j])
    else:
        deg = np.asarray((A != 0).sum(axis=1)).ravel()
        hubs = np.lexsort((np.arange(n), -deg))
        seen: set = set()
        for hub in hubs:
            others = rng.permutation(n)
            for v in others:
                if v == hub:
                    continue
                pair = (int(min(hub, v)), int(max(hub, v)))
                if pair in seen:
                    continue
                seen.add(pair)
                (to_del if pair in edges else to_add).append(pair)
                if len(seen) == budget:
                    break
            if len(seen) == budget:
                break
        if len(seen) < budget:
            raise ValueError(f"flip budget {budget} exceeds the number of possible flips")

    L = A.tolil()
    for i, j in to_del:
        L[i, j] = 0.0
        L[j, i] = 0.0
    for i, j in to_add:
        L[i, j] = 1.0
        L[j, i] = 1.0
    out = L.tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


# --- sweep ------------------------------------------------------------------------------

def _cell(X, g: TextAttributedGraph, masks: SplitMasks, config: TrainConfig, strategy: str,
          rate: float, seed: int, methods: Sequence[str]) -> list:
    spec = AttackSpec(rate, strategy, derive_seed(seed, "attack", strategy, int(round(rate * 1e6))))
    A_att = perturb_edges(g.adjacency, spec, g.labels)
    cfg = replace(config, seed=seed, scenario="TR")
    rows = []
    need_langgsl = any(m.startswith("langgsl") for m in methods)
    state = fit_langgsl(X, g.labels, masks, A_att, cfg, g.num_classes)[0] if need_langgsl else None
    for method in methods:
        if method == "vanilla_gcn":
            dist = vanilla_gcn(X, g.labels, masks, A_att, cfg, g.num_classes)
        elif method == "langgsl_gslm":
            dist = state.best_p
        elif method == "langgsl_lm":
            dist = state.best_q
        else:
            raise ValueError(f"unknown method {method!r}")
        acc, f1 = evaluate(dist, g.labels, masks.test)
        rows.append({"strategy": strategy, "rate": float(rate), "method": method, "seed": int(seed),
                     "accuracy": acc, "f1": f1})
    return rows


def robustness_sweep(g: TextAttributedGraph, masks: SplitMasks, rates: Sequence[float],
                     config: TrainConfig, baselines: Sequence[str] = ("vanilla_gcn",),
                     strategy: str = "heterophily_add", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                     jobs: int = 1) -> list:
    """Test accuracy per (rate, method, seed) under the chosen attack.

    Methods are the listed baselines plus both LangGSL heads. Cells are
    independent; ``jobs > 1`` runs them on a thread pool and the output order
    does not depend on scheduling.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown attack strategy {strategy!r}")
    methods = [m for m in baselines if m not in ("langgsl_gslm", "langgsl_lm")]
    methods += ["langgsl_gslm", "langgsl_lm"]
    X, _ = featurize(g, config)
    cells = [(r, s) for r in rates for s in seeds]
    run = lambda cell: _cell(X, g, masks, config, strategy, cell[0], cell[1], methods)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    return [row for rows in results for row in rows]


def summarize(rows: Sequence[dict]) -> list:
    """Mean and (population) std of accuracy per (strategy, rate, method)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["rate"], r["method"]), []).append(r["accuracy"])
    return [{"strategy": k[0], "rate": k[1], "method": k[2], "mean": float(np.mean(v)),
             "std": float(np.std(v)), "n": len(v)} for k, v in sorted(groups.items())]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["strategy", "rate", "method", "seed", "accuracy", "f1"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "accuracy": repr(r["accuracy"]), "f1": repr(r["f1"])})
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict]) -> str:
    return json.dumps({"cells": list(rows), "summary": summarize(rows)}, indent=2) + "\n"
