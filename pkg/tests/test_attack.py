import csv
import io
import json

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import path_graph, star_graph
from langgsl.attack import (AttackSpec, perturb_edges, robustness_sweep, rows_to_csv, rows_to_json,
                            summarize)
from langgsl.config import GSLMConfig, LMConfig, TrainConfig
from langgsl.data import SyntheticConfig, make_synthetic_tag, split_nodes


def edges(A):
    u = sp.triu(A, k=1).tocoo()
    return {(int(i), int(j)) for i, j in zip(u.row, u.col)}


def ten_edge_graph():
    return path_graph(11)


@pytest.mark.parametrize("strategy", ["random_flip", "degree_targeted"])
def test_rate_zero_is_identity(strategy):
    A = ten_edge_graph()
    out = perturb_edges(A, AttackSpec(0.0, strategy))
    assert (out != A).nnz == 0


def test_random_flip_exact_example():
    A = ten_edge_graph()
    out = perturb_edges(A, AttackSpec(0.2, "random_flip", seed=1))
    diff = edges(A) ^ edges(out)
    assert len(diff) == 2
    assert abs(out - A).nnz == 4
    # the budget splits evenly between a deletion and an addition
    assert len(edges(A) - edges(out)) == 1 and len(edges(out) - edges(A)) == 1


@pytest.mark.parametrize("rate", [0.05, 0.13, 0.5, 1.0])
def test_random_flip_budget(rate):
    g = make_synthetic_tag(SyntheticConfig(nodes_per_class=20), 0)
    E = edges(g.adjacency)
    out = perturb_edges(g.adjacency, AttackSpec(rate, "random_flip", seed=2))
    assert len(E ^ edges(out)) == int(np.floor(rate * len(E) + 0.5))


def test_budget_rounds_half_up():
    assert AttackSpec(0.25).budget(10) == 3
    assert AttackSpec(0.05).budget(10) == 1


def test_heterophily_add_only_cross_class():
    g = make_synthetic_tag(SyntheticConfig(nodes_per_class=20), 1)
    out = perturb_edges(g.adjacency, AttackSpec(0.3, "heterophily_add", seed=0), g.labels)
    added = edges(out) - edges(g.adjacency)
    assert len(added) == AttackSpec(0.3).budget(g.num_edges)
    assert edges(g.adjacency) <= edges(out)
    assert all(g.labels[i] != g.labels[j] for i, j in added)


def test_heterophily_add_needs_labels():
    with pytest.raises(ValueError, match="labels"):
        perturb_edges(ten_edge_graph(), AttackSpec(0.2, "heterophily_add"))


def test_degree_targeted_touches_hub():
    A = star_graph(8)
    A = A + sp.csr_matrix(([1.0, 1.0], ([2, 3], [3, 2])), shape=(8, 8))
    out = perturb_edges(A, AttackSpec(0.25, "degree_targeted", seed=0))
    diff = edges(A) ^ edges(out)
    assert len(diff) == 2
    assert all(0 in pair for pair in diff)


@pytest.mark.parametrize("strategy", ["random_flip", "heterophily_add", "degree_targeted"])
def test_output_symmetric_zero_diagonal_binary(strategy):
    g = make_synthetic_tag(SyntheticConfig(nodes_per_class=15), 2)
    for seed in range(3):
        out = perturb_edges(g.adjacency, AttackSpec(0.4, strategy, seed), g.labels)
        assert (out != out.T).nnz == 0
        assert not out.diagonal().any()
        assert set(np.unique(out.data)) <= {1.0}


def test_deterministic_per_seed():
    A = make_synthetic_tag(SyntheticConfig(nodes_per_class=15), 3).adjacency
    a = perturb_edges(A, AttackSpec(0.3, "random_flip", 5))
    b = perturb_edges(A, AttackSpec(0.3, "random_flip", 5))
    c = perturb_edges(A, AttackSpec(0.3, "random_flip", 6))
    assert (a != b).nnz == 0
    assert (a != c).nnz > 0


def test_budget_exceeding_possible_flips():
    A = sp.csr_matrix(np.ones((3, 3)) - np.eye(3))
    with pytest.raises(ValueError, match="budget"):
        perturb_edges(A, AttackSpec(1.0, "heterophily_add"), [0, 1, 1])


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(1.5)
    with pytest.raises(ValueError):
        AttackSpec(0.1, "mettack")


# --- sweep --------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_rows():
    g = make_synthetic_tag(SyntheticConfig(nodes_per_class=25, vocab_size=120), 0)
    masks = split_nodes(g, 0.2, 0.2, 0)
    cfg = TrainConfig(em_rounds=1, lm=LMConfig(epochs=20, hidden_dim=8),
                      gslm=GSLMConfig(epochs=20, hidden=8))
    serial = robustness_sweep(g, masks, (0.0, 0.2), cfg, seeds=(0, 1))
    threaded = robustness_sweep(g, masks, (0.0, 0.2), cfg, seeds=(0, 1), jobs=3)
    return serial, threaded


def test_sweep_covers_every_cell(sweep_rows):
    rows, _ = sweep_rows
    keys = {(r["rate"], r["method"], r["seed"]) for r in rows}
    assert len(keys) == len(rows) == 2 * 3 * 2
    assert {r["method"] for r in rows} == {"vanilla_gcn", "langgsl_gslm", "langgsl_lm"}


def test_sweep_threads_do_not_change_results(sweep_rows):
    serial, threaded = sweep_rows
    assert serial == threaded


def test_csv_and_json_outputs(sweep_rows):
    rows, _ = sweep_rows
    parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert list(parsed[0]) == ["strategy", "rate", "method", "seed", "accuracy", "f1"]
    assert float(parsed[0]["accuracy"]) == rows[0]["accuracy"]
    doc = json.loads(rows_to_json(rows))
    assert len(doc["summary"]) == 6


def test_summarize_mean_std():
    rows = [{"strategy": "s", "rate": 0.1, "method": "m", "accuracy": a} for a in (0.5, 0.7)]
    (s,) = summarize(rows)
    assert s["mean"] == pytest.approx(0.6) and s["std"] == pytest.approx(0.1) and s["n"] == 2
