import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camal.analytic import LsmConfig, Policy
from camal.learner import (BASIS_NAMES, RAW_FEATURES, FeatureVector, RankDeficientError, TrainedModel,
                           basis_matrix, dumps, fit, fit_poly, fit_trees, load, loads, predict, save)
from camal.tuner import AnalyticEvaluator
from camal.workload import WorkloadMix, training_workloads

from conftest import MODEL_ENV


def random_rows(n, seed=0):
    """Feature rows spread over both policies and the whole mix simplex."""
    rng = np.random.default_rng(seed)
    env = MODEL_ENV
    rows = []
    for i in range(n):
        mix = rng.dirichlet(np.ones(4))
        policy = Policy.TIERING if i % 2 else Policy.LEVELING
        M_f = rng.uniform(0, 10) * env.N / 8
        M_c = rng.uniform(0, 0.3) * (env.M - M_f - env.min_buffer)
        cfg = LsmConfig(int(rng.integers(2, 40)), policy, env.M - M_f - M_c, M_f, M_c)
        rows.append(FeatureVector.from_parts(env, cfg, WorkloadMix(*mix, s=int(rng.integers(1, 64)))).values)
    return np.array(rows)


def test_feature_order_is_fixed():
    assert RAW_FEATURES[:7] == ("N", "E", "B", "T", "M_b", "M_c", "M_f")
    assert len(BASIS_NAMES) == basis_matrix(random_rows(3)).shape[1] == 15


def test_feature_vector_length_checked():
    with pytest.raises(ValueError):
        FeatureVector((1.0, 2.0))


def test_synthetic_coefficients_recovered():
    X = random_rows(200)
    beta = np.random.default_rng(1).uniform(0.5, 3, len(BASIS_NAMES))
    y = basis_matrix(X) @ beta
    m = fit_poly(X, y)
    assert np.max(np.abs(m.coef - beta) / np.abs(beta)) < 1e-6
    assert np.max(np.abs(predict(m, X) - y) / np.abs(y)) < 1e-6


def test_constant_labels_predict_constant():
    X = random_rows(60)
    m = fit_poly(X, np.full(60, 7.5))
    assert np.allclose(predict(m, random_rows(30, seed=5)), 7.5, rtol=1e-9)


def test_duplicate_sample_does_not_move_exact_fit():
    X = random_rows(80)
    y = basis_matrix(X) @ np.linspace(1, 2, len(BASIS_NAMES))
    a = fit_poly(X, y)
    b = fit_poly(np.vstack([X, X[:1]]), np.concatenate([y, y[:1]]))
    assert np.allclose(a.coef, b.coef, rtol=1e-8)


def test_duplicate_sample_reweights_noisy_fit_like_weighted_least_squares():
    X = random_rows(80)
    y = basis_matrix(X) @ np.linspace(1, 2, len(BASIS_NAMES)) + np.random.default_rng(2).normal(0, 0.5, 80)
    got = fit_poly(np.vstack([X, X[:1]]), np.concatenate([y, y[:1]])).coef
    # independent route: weighted normal equations with weight 2 on row 0
    P = basis_matrix(X)
    w = np.ones(80)
    w[0] = 2
    ref = np.linalg.solve(P.T @ (w[:, None] * P), P.T @ (w * y))
    assert np.allclose(got, ref, rtol=1e-6, atol=1e-8)


def test_too_few_samples_rejected():
    with pytest.raises(ValueError):
        fit_poly(random_rows(5), np.ones(5))


def test_rank_deficiency_names_columns():
    X = random_rows(40)
    X[:, RAW_FEATURES.index("tiering")] = 0.0  # tiering-only columns vanish
    with pytest.raises(RankDeficientError) as info:
        fit_poly(X, np.ones(40))
    assert {"v*p*T", "r*p*T", "q*L*T", "q*T*s/B", "w*L/B"} <= set(info.value.columns)
    with pytest.warns(RuntimeWarning):
        m = fit_poly(X, np.ones(40), strict=False)
    assert set(m.deficient) == set(info.value.columns)
    assert all(m.coef[BASIS_NAMES.index(c)] == 0 for c in m.deficient)


def test_zero_coefficients_predict_zero():
    m = TrainedModel("poly", coef=np.zeros(len(BASIS_NAMES)))
    assert np.all(predict(m, random_rows(10)) == 0)


def test_zero_trees_predict_base():
    X = random_rows(20)
    y = np.arange(20.0)
    m = fit_trees(X, y, n_trees=0)
    assert np.all(predict(m, X) == y.mean())


def test_constant_labels_give_constant_leaf():
    X = random_rows(30)
    m = fit_trees(X, np.full(30, 3.0))
    assert len(m.trees[0].feature) == 1
    assert np.all(predict(m, X) == 3.0)


def test_trees_learn_identity_on_size_ratio():
    X = random_rows(300)
    y = X[:, RAW_FEATURES.index("T")]
    m = fit_trees(X, y, n_trees=200, max_depth=3)
    assert m.stage_rmse[-1] < 0.01 * (y.max() - y.min())


@given(st.integers(0, 10 ** 6), st.integers(2, 60))
def test_tree_training_loss_never_increases(seed, n):
    rng = np.random.default_rng(seed)
    X = random_rows(n, seed)
    y = rng.normal(size=n) + X[:, 3]
    rmse = fit_trees(X, y, n_trees=20, max_depth=int(rng.integers(1, 4))).stage_rmse
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(rmse, rmse[1:]))


def test_trees_need_two_samples():
    with pytest.raises(ValueError):
        fit_trees(random_rows(1), [1.0])


def test_fits_are_deterministic():
    X = random_rows(100)
    y = np.sin(X[:, 3]) + X[:, 7]
    for kind in ("poly", "trees"):
        assert dumps(fit(kind, X, y)) == dumps(fit(kind, X, y))


def test_predict_rejects_wrong_width():
    m = fit_poly(random_rows(40), np.ones(40))
    with pytest.raises(ValueError):
        predict(m, np.ones((3, 5)))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        fit("forest", random_rows(40), np.ones(40))


@pytest.mark.parametrize("kind", ["poly", "trees"])
def test_model_file_round_trip(kind, tmp_path):
    X = random_rows(120)
    y = X[:, 3] * X[:, 8] + np.exp(-X[:, 6] / X[:, 0])
    m = fit(kind, X, y, label="io")
    save(m, tmp_path / "m.txt")
    back = load(tmp_path / "m.txt")
    probe = random_rows(1000, seed=11)
    assert np.array_equal(predict(m, probe), predict(back, probe))
    assert back.label == "io" and back.n_samples == 120
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0] == "camal-model 1" and text[1] == f"kind {kind}"


def test_model_file_rejects_other_feature_order():
    text = dumps(fit_poly(random_rows(40), np.ones(40)))
    bad = "\n".join("features 000000000000" if ln.startswith("features") else ln for ln in text.splitlines())
    with pytest.raises(ValueError):
        loads(bad)


def test_poly_on_analytic_samples_fits_exactly():
    # the analytic cost lies in the basis span when the filter exponent matches
    ev = AnalyticEvaluator(MODEL_ENV)
    rows = random_rows(150, seed=4)
    samples = []
    for i, x in enumerate(rows):
        cfg = LsmConfig(int(x[3]), Policy.TIERING if x[12] else Policy.LEVELING, x[4], x[6], x[5])
        samples.append(ev(i, WorkloadMix(*x[7:11], s=int(x[11])), cfg))
    m = fit_poly(samples, label="io")
    y = np.array([s.io_per_op for s in samples])
    assert np.max(np.abs(predict(m, samples) - y) / y) < 1e-6


def test_training_workloads_are_valid_inputs():
    ev = AnalyticEvaluator(MODEL_ENV)
    cfg = LsmConfig(10, Policy.LEVELING, 4 * 2 ** 20, 12 * 2 ** 20, 0)
    samples = [ev(i, m, cfg) for i, m in enumerate(training_workloads())]
    assert predict(fit_trees(samples, label="io"), samples).shape == (len(samples),)
