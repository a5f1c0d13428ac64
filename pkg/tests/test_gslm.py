import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.base import clone

from conftest import path_graph
from gradcheck import numeric_grad, relative_error
from langgsl._nn import softmax
from langgsl.data import SplitMasks
from langgsl.graph import normalize_adjacency
from langgsl.gslm import (GCNClassifier, GcnModel, GSLMPhaseConfig, RefinementConfig,
                          adjacency_from_weights, gcn_forward, graph_refine_loss, gslm_loss_and_grad,
                          gslm_phase_loss, init_gcn, joint_loss_and_grad, support_pairs,
                          train_gslm_phase)
from langgsl.local_model import LocalModel, PseudoLabelSet, lm_forward


def _random_graph(rng, n, p=0.3):
    A = np.triu((rng.random((n, n)) < p).astype(float), 1)
    return sp.csr_matrix(A + A.T)


def _instance(seed, n=10, d=4, hidden=5, C=3):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(n, d))
    labels = rng.integers(0, C, n)
    perm = rng.permutation(n)
    masks = SplitMasks(perm[:3], perm[3:5], perm[5:], n)
    U = masks.unlabeled
    pseudo = PseudoLabelSet(U[:4], rng.integers(0, C, 4))
    model = init_gcn(d, hidden, C, seed, dropout_rate=0.0)
    model = model.with_params({"b1": rng.normal(size=hidden) * 0.1,
                               "b2": rng.normal(size=C) * 0.1})
    return model, H, labels, masks, pseudo, rng


# --- forward ------------------------------------------------------------------

def test_two_node_hand_case():
    A_hat = np.full((2, 2), 0.5)
    m = GcnModel(np.array([[1.0]]), np.zeros(1), np.array([[1.0, 0.0]]), np.zeros(2),
                 dropout_rate=0.0, activation="linear")
    p = gcn_forward(m, A_hat, np.array([[1.0], [-1.0]]))
    # A_hat @ H = 0, so every logit is 0 and both rows are uniform
    np.testing.assert_array_equal(p, np.full((2, 2), 0.5))


def test_identity_adjacency_equals_mlp(rng):
    model, H, *_ = _instance(0)
    mlp = LocalModel(model.U1, model.b1, model.U2, model.b2)
    for A_hat in (np.eye(len(H)), sp.identity(len(H), format="csr")):
        np.testing.assert_array_equal(gcn_forward(model, A_hat, H), lm_forward(mlp, H)[1])


def _ring(n):
    R = sp.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n))
    return (R + R.T).tocsr()


def test_equal_rows_on_regular_graph_give_equal_outputs():
    model = init_gcn(3, 4, 2, 0)
    H = np.tile([0.3, -1.0, 2.0], (6, 1))
    p = gcn_forward(model, normalize_adjacency(_ring(6)), H)
    np.testing.assert_allclose(p, np.tile(p[0], (6, 1)), atol=1e-15)


def test_equal_rows_on_irregular_graph_can_differ():
    # symmetric normalization weights rows by degree, so a path's ends see a different sum
    model = init_gcn(3, 4, 2, 0)
    H = np.tile([0.3, -1.0, 2.0], (6, 1))
    p = gcn_forward(model, normalize_adjacency(path_graph(6)), H)
    assert not np.allclose(p[0], p[2])


def test_forward_rows_sum_to_one(rng):
    model, H, *_ = _instance(1)
    p = gcn_forward(model, normalize_adjacency(_random_graph(rng, 10)), H)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_forward_shape_errors():
    model, H, *_ = _instance(0)
    with pytest.raises(ValueError):
        gcn_forward(model, np.eye(10), H[:, :2])
    with pytest.raises(ValueError):
        gcn_forward(model, np.eye(9), H)


def test_permutation_equivariance(rng):
    n = 25
    model = init_gcn(4, 6, 3, 2)
    H = rng.normal(size=(n, 4))
    A = _random_graph(rng, n, 0.15)
    perm = rng.permutation(n)
    p = gcn_forward(model, normalize_adjacency(A), H)
    P = sp.csr_matrix((np.ones(n), (np.arange(n), perm)), shape=(n, n))
    p_perm = gcn_forward(model, normalize_adjacency(P @ A @ P.T), H[perm])
    np.testing.assert_allclose(p_perm, p[perm], atol=1e-13)


# --- task loss ----------------------------------------------------------------

def test_uniform_distribution_gives_ln_c():
    n, C = 6, 4
    masks = SplitMasks(np.array([0, 1]), np.array([2]), np.array([3, 4, 5]), n)
    pseudo = PseudoLabelSet(np.array([2, 3, 4]), np.array([0, 3, 1]))
    p = np.full((n, C), 0.25)
    labels = np.array([0, 1, 2, 3, 0, 1])
    for beta in (0.0, 0.3, 1.0):
        assert gslm_phase_loss(p, labels, pseudo, masks, beta) == pytest.approx(np.log(4), abs=1e-12)


def test_beta_boundaries():
    model, H, labels, masks, pseudo, rng = _instance(3)
    p = softmax(rng.normal(size=(10, 3)))
    L = masks.labeled
    sup = -np.mean(np.log(p[L, labels[L]]))
    pl = -np.mean(np.log(p[pseudo.nodes, pseudo.classes]))
    assert gslm_phase_loss(p, labels, pseudo, masks, 0.0) == pytest.approx(sup, rel=1e-14)
    assert gslm_phase_loss(p, labels, pseudo, masks, 1.0) == pytest.approx(pl, rel=1e-14)
    assert gslm_phase_loss(p, labels, None, masks, 0.0) == pytest.approx(sup, rel=1e-14)


def test_loss_errors():
    model, H, labels, masks, pseudo, rng = _instance(0)
    p = softmax(rng.normal(size=(10, 3)))
    with pytest.raises(ValueError):
        gslm_phase_loss(p, labels, None, masks, 0.5)
    with pytest.raises(ValueError):
        gslm_phase_loss(p, labels, pseudo, masks, -0.1)
    bad = PseudoLabelSet(masks.train[:1], np.array([0]))
    with pytest.raises(ValueError):
        gslm_phase_loss(p, labels, bad, masks, 0.5)


# --- refinement loss ----------------------------------------------------------

def test_refine_loss_two_node_example():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert graph_refine_loss(A, np.array([[0.0], [2.0]]), 1.0, 0.0, 0.0) == pytest.approx(1.0)


def test_refine_smoothness_matches_laplacian_trace(rng):
    A = _random_graph(rng, 12).toarray() * rng.random((12, 12))
    A = np.triu(A, 1)
    A = A + A.T
    H = rng.normal(size=(12, 3))
    L = np.diag(A.sum(axis=1)) - A
    expected = np.trace(H.T @ L @ H) / 144
    assert graph_refine_loss(A, H) == pytest.approx(expected, rel=1e-12)


def test_refine_smoothness_zero_for_identical_embeddings(rng):
    A = _random_graph(rng, 8)
    assert graph_refine_loss(A, np.ones((8, 2))) == 0.0


def test_refine_sparsity_is_quadratic_in_scale(rng):
    A = _random_graph(rng, 8)
    H = np.zeros((8, 1))
    base = graph_refine_loss(A, H, 0.0, 0.0, 1.0)
    for c in (0.5, 3.0):
        assert graph_refine_loss(c * A, H, 0.0, 0.0, 1.0) == pytest.approx(c**2 * base, rel=1e-12)


def test_refine_degree_term_needs_positive_rows():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 1.0
    with pytest.raises(ValueError, match="row sums"):
        graph_refine_loss(A, np.zeros((3, 1)), 0.0, 1.0, 0.0)
    A[1, 2] = A[2, 1] = 1.0
    # degrees 1, 2, 1
    assert graph_refine_loss(A, np.zeros((3, 1)), 0.0, 1.0, 0.0) == pytest.approx(-np.log(2) / 3)


def test_refinement_config_validation():
    with pytest.raises(ValueError):
        RefinementConfig("dense")
    with pytest.raises(ValueError):
        RefinementConfig("joint", gamma_sparse=-1.0)


# --- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_gcn_gradients_match_finite_differences(seed):
    model, H, labels, masks, pseudo, rng = _instance(seed)
    A_hat = normalize_adjacency(_random_graph(rng, 10))
    beta = [0.0, 0.5, 1.0, 0.2][seed]
    _, grads, _ = gslm_loss_and_grad(model, A_hat, H, labels, pseudo, masks, beta)

    def f(params):
        return gslm_loss_and_grad(model.with_params(params), A_hat, H, labels, pseudo, masks,
                                  beta)[0]

    assert relative_error(grads, numeric_grad(f, model.params())) < 1e-4


@pytest.mark.parametrize("strategy", ["implicit", "joint"])
def test_joint_edge_weight_gradient(strategy):
    model, H, labels, masks, pseudo, rng = _instance(5)
    A = _random_graph(rng, 10, 0.4)
    # a ring keeps every degree positive
    pairs = support_pairs(A, _ring(10))
    w = rng.uniform(0.2, 0.9, len(pairs))
    cfg = RefinementConfig(strategy, 1.0, 1.0, 0.1)
    _, grads, gw = joint_loss_and_grad(model, pairs, w, H, labels, pseudo, masks, 0.5, cfg)

    def f(params):
        return joint_loss_and_grad(model.with_params({k: params[k] for k in model.params()}),
                                   pairs, params["w"], H, labels, pseudo, masks, 0.5, cfg)[0]

    analytic = dict(grads, w=gw)
    assert relative_error(analytic, numeric_grad(f, dict(model.params(), w=w))) < 1e-4


def test_support_pairs_union_sorted():
    A = np.zeros((4, 4))
    A[0, 2] = A[2, 0] = 1
    B = np.zeros((4, 4))
    B[1, 3] = B[3, 1] = 1
    B[0, 2] = B[2, 0] = 0.4
    assert support_pairs(A, B, None).tolist() == [[0, 2], [1, 3]]
    assert support_pairs(np.zeros((3, 3))).shape == (0, 2)


def test_adjacency_from_weights_symmetric():
    A = adjacency_from_weights(3, np.array([[0, 1], [1, 2]]), np.array([0.3, 0.7]))
    np.testing.assert_array_equal(A.toarray(), [[0, 0.3, 0], [0.3, 0, 0.7], [0, 0.7, 0]])


# --- training -----------------------------------------------------------------

def test_implicit_returns_input_adjacency(rng):
    model, H, labels, masks, pseudo, _ = _instance(6)
    A = _random_graph(rng, 10)
    _, A_out = train_gslm_phase(model, A, H, labels, pseudo, masks, RefinementConfig(),
                                GSLMPhaseConfig(epochs=3))
    assert A_out is A


def test_zero_learning_rates_leave_everything(rng):
    model, H, labels, masks, pseudo, _ = _instance(7)
    A = _random_graph(rng, 10, 0.5)
    ref = RefinementConfig("joint", gamma_degree=0.0, adjacency_lr=0.0)
    cfg = GSLMPhaseConfig(lr=0.0, epochs=4, weight_decay=0.0)
    out, A_out = train_gslm_phase(model, A, H, labels, pseudo, masks, ref, cfg)
    for k, v in model.params().items():
        np.testing.assert_array_equal(getattr(out, k), v)
    assert abs(A_out - A).max() == 0


def test_joint_adjacency_symmetric_in_unit_interval(rng):
    model, H, labels, masks, pseudo, _ = _instance(8)
    A = _random_graph(rng, 10, 0.5)
    A = ((A + _ring(10)) > 0).astype(float)
    for epochs in (1, 5, 40):
        ref = RefinementConfig("joint", adjacency_lr=0.2)
        _, A_out = train_gslm_phase(model, A, H, labels, pseudo, masks, ref,
                                    GSLMPhaseConfig(epochs=epochs))
        assert (A_out != A_out.T).nnz == 0
        assert A_out.data.min() >= 0 and A_out.data.max() <= 1
        assert not A_out.diagonal().any()


def test_joint_candidate_edges_become_learnable(rng):
    model, H, labels, masks, pseudo, _ = _instance(9)
    A = path_graph(10).astype(float)
    cand = np.zeros((10, 10))
    cand[0, 9] = cand[9, 0] = 0.5
    ref = RefinementConfig("joint", adjacency_lr=0.05)
    _, A_out = train_gslm_phase(model, A, H, labels, pseudo, masks, ref, GSLMPhaseConfig(epochs=5),
                                candidate=cand)
    # the candidate starts at weight 0 in A_fused and may only grow from there
    assert set(map(tuple, support_pairs(A_out))) <= set(map(tuple, support_pairs(A, cand)))


def test_training_lowers_loss(rng):
    model, H, labels, masks, pseudo, _ = _instance(10)
    out, _ = train_gslm_phase(model, _random_graph(rng, 10), H, labels, pseudo, masks,
                              RefinementConfig(), GSLMPhaseConfig(epochs=60))
    assert out.loss_history[-1] < out.loss_history[0]


def test_non_finite_loss_is_reported(rng):
    model, H, labels, masks, pseudo, _ = _instance(11)
    H[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_gslm_phase(model, _random_graph(rng, 10), H, labels, pseudo, masks,
                         RefinementConfig(), GSLMPhaseConfig(epochs=3))


# --- estimator ----------------------------------------------------------------

def test_gcn_classifier_api():
    n = 20
    y = np.repeat([0, 1], 10)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(n, 3)) + y[:, None]
    A = np.zeros((n, n))
    for i in range(n - 1):
        if y[i] == y[i + 1]:
            A[i, i + 1] = A[i + 1, i] = 1
    y_partial = np.full(n, -1)
    y_partial[[0, 1, 10, 11]] = y[[0, 1, 10, 11]]
    clf = GCNClassifier(hidden=16, epochs=100, dropout=0.0).fit(X, y_partial, A)
    assert np.mean(clf.predict(X, A) == y) >= 0.9
    np.testing.assert_allclose(clf.predict_proba(X, A).sum(axis=1), 1.0, atol=1e-12)
    assert clone(clf).get_params()["hidden"] == 16
