import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import log_expit

from rgrec.errors import CheckpointError
from rgrec.graph import build_graph, merge_interactions
from rgrec.rules import Rule, RuleSet, enumerate_paths
from rgrec.weights import (
    FeatureMatrix,
    PretrainConfig,
    extract_features,
    pretrain_grad,
    pretrain_loss,
    pretrain_weights,
    rule_checksum,
)


def _seven():
    kg = build_graph([("a", "p", "b"), ("b", "q", "c"), ("a", "q", "x"), ("a", "r", "d"), ("d", "q", "c"),
                      ("e", "p", "x")])
    g = merge_interactions(kg, [("u", "a")])
    P = g.predicate_id
    rules = RuleSet((Rule((g.interacts, P("p"), P("q"))), Rule((g.interacts, P("q"))),
                     Rule((g.interacts, P("r"), P("q")))))
    return g, rules


def test_feature_row_against_path_oracle():
    g, rules = _seven()
    assert g.n_entities == 7
    u, c = g.user("u"), g.entity_id("c")
    fm = extract_features(g, np.array([u]), np.array([c]), np.array([1]), rules)
    assert fm.X.tolist() == [[1, 0, 1]]
    paths = enumerate_paths(g, u, c, 3, exclude=(u, g.interacts, c))
    assert [int(r.body in paths) for r in rules] == [1, 0, 1]


def test_unconnected_pair_is_all_zero():
    g, rules = _seven()
    fm = extract_features(g, np.array([g.user("u")]), np.array([g.entity_id("e")]), np.array([0]), rules)
    assert fm.X.tolist() == [[0, 0, 0]] and fm.shape == (1, 3)


def test_zero_features_do_not_move_weights():
    X = np.zeros((40, 5), np.uint8)
    y = np.array([0, 1] * 20, np.int8)
    assert pretrain_loss(np.zeros(5), X, y, 1e-4) == 0.25
    w = pretrain_weights(FeatureMatrix(X, y), PretrainConfig(lr=0.01, max_epochs=20))
    assert np.linalg.norm(w.W) < 1e-12
    assert w.final_loss == 0.25


def _predictive(seed, n=400, L=6, col=2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n).astype(np.int8)
    X = (rng.random((n, L)) < 0.4).astype(np.uint8)
    X[:, col] = y
    return X, y


def _logistic_oracle(X, y):
    X = X.astype(float)
    s = 2.0 * y - 1.0
    nll = lambda w: -np.sum(log_expit(s * (X @ w))) + 1e-2 * w @ w
    return minimize(nll, np.zeros(X.shape[1]), method="BFGS").x


@pytest.mark.parametrize("seed", range(3))
def test_predictive_column_gets_largest_weight(seed):
    X, y = _predictive(seed)
    w = pretrain_weights(FeatureMatrix(X, y), PretrainConfig(lr=0.01, max_epochs=100)).W
    oracle = _logistic_oracle(X, y)
    assert np.argmax(oracle) == 2
    assert np.argmax(w) == 2 and w[2] > 0
    assert pretrain_loss(w, X, y, 1e-4) <= pretrain_loss(np.zeros(6), X, y, 1e-4)


def test_huge_lambda_keeps_weights_small():
    X, y = _predictive(0)
    w = pretrain_weights(FeatureMatrix(X, y), PretrainConfig(lam=1e6, lr=0.01, max_epochs=30)).W
    assert np.linalg.norm(w) < 1e-2


def test_defaults():
    cfg = PretrainConfig()
    assert (cfg.lam, cfg.lr, cfg.batch_size) == (1e-4, 1e-4, 256)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_column_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    X = (rng.random((30, 5)) < 0.5).astype(np.uint8)
    y = rng.integers(0, 2, 30)
    W = rng.normal(size=5)
    perm = rng.permutation(5)
    assert pretrain_loss(W[perm], X[:, perm], y, 0.1) == pytest.approx(pretrain_loss(W, X, y, 0.1), rel=1e-12)


def test_trained_weights_permute_with_columns():
    X, y = _predictive(4)
    perm = np.array([3, 0, 5, 1, 2, 4])
    cfg = PretrainConfig(lr=0.01, max_epochs=15)
    a = pretrain_weights(FeatureMatrix(X, y), cfg).W
    b = pretrain_weights(FeatureMatrix(X[:, perm], y), cfg).W
    assert np.allclose(b, a[perm], rtol=0, atol=1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = (rng.random((25, 4)) < 0.5).astype(float)
    y = rng.integers(0, 2, 25).astype(float)
    W = rng.normal(size=4)
    lam, eps = 0.3, 1e-6
    num = np.array([(pretrain_loss(W + eps * e, X, y, lam) - pretrain_loss(W - eps * e, X, y, lam)) / (2 * eps)
                    for e in np.eye(4)])
    ana = pretrain_grad(W, X, y, lam)
    assert np.linalg.norm(ana - num) / (np.linalg.norm(ana) + np.linalg.norm(num)) < 1e-4


def test_deterministic():
    X, y = _predictive(1)
    cfg = PretrainConfig(lr=0.01, max_epochs=10, seed=3)
    a = pretrain_weights(FeatureMatrix(X, y), cfg)
    b = pretrain_weights(FeatureMatrix(X, y), cfg)
    assert np.array_equal(a.W, b.W) and a.history == b.history


def test_empty_features_rejected():
    with pytest.raises(ValueError):
        pretrain_weights(FeatureMatrix(np.zeros((0, 3), np.uint8), np.zeros(0, np.int8)))


def test_feature_cache_roundtrip(tmp_path):
    g, rules = _seven()
    X, y = _predictive(2, n=37, L=11)
    fm = FeatureMatrix(X, y, rule_checksum(rules, g))
    fm.save(tmp_path / "f.bin")
    back = FeatureMatrix.load(tmp_path / "f.bin", expect_checksum=fm.rule_checksum)
    assert np.array_equal(back.X, X) and np.array_equal(back.labels, y)
    reordered = RuleSet((rules[1], rules[0], rules[2]))
    with pytest.raises(CheckpointError):
        FeatureMatrix.load(tmp_path / "f.bin", expect_checksum=rule_checksum(reordered, g))
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="expected"):
        FeatureMatrix.load(tmp_path / "f.bin")
