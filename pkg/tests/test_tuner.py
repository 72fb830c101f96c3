import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camal.analytic import (Environment, LsmConfig, Policy, best_analytic_config, combined_cost, continuous_root,
                            theoretical_opt_memory, theoretical_opt_T)
from camal.engine import DeviceModel
from camal.learner import fit_poly
from camal.samples import SampleStore
from camal.tuner import (AnalyticEvaluator, EngineEvaluator, TunerConfig, T_neighborhood, bpk_neighborhood,
                         decoupled_al, kl_divergence, model_argmin, robust_tune, sample_kl_ball,
                         trust_region, tune_with_extrapolation)
from camal.workload import WorkloadMix, training_workloads

from conftest import MODEL_ENV, TEST_ENV
from oracles import exhaustive_opt

MB_ = 1 << 20
IO = TunerConfig(label_kind="io")
WORKLOADS = training_workloads()


def cost_of(env, mix, cfg):
    return float(combined_cost(env, mix, cfg.policy, cfg.T, cfg.M_b, cfg.M_f))


@pytest.fixture(scope="module")
def oracle_run():
    ev = AnalyticEvaluator(MODEL_ENV)
    return decoupled_al(WORKLOADS, MODEL_ENV, IO, ev), ev


def test_config_validation():
    for bad in (dict(h=-1), dict(T_step=0), dict(bpk_step=0), dict(label_kind="x"), dict(model_kind="nn"),
                dict(rho=-0.1), dict(cache_fractions=(1.0,)), dict(samples_per_stage=0)):
        with pytest.raises(ValueError):
            TunerConfig(**bad)


def test_zero_budget_returns_analytic_optimum():
    ev = AnalyticEvaluator(MODEL_ENV)
    res = decoupled_al(WORKLOADS[:4], MODEL_ENV, TunerConfig(h=0), ev)
    assert ev.calls == 0 and len(res.store) == 0
    for i, mix in enumerate(WORKLOADS[:4]):
        cfg = res.configs[i]
        assert cfg == best_analytic_config(MODEL_ENV, mix)
        assert cfg.M_c == 0
        assert cfg.T == theoretical_opt_T(MODEL_ENV, mix, cfg.policy)


def test_oracle_tuning_reaches_exhaustive_optimum(oracle_run):
    res, _ = oracle_run
    for i, mix in enumerate(WORKLOADS):
        opt, _ = exhaustive_opt(MODEL_ENV, mix)
        assert cost_of(MODEL_ENV, mix, res.configs[i]) <= opt * (1 + 1e-6)


def test_ten_calls_per_workload_per_policy():
    ev = AnalyticEvaluator(MODEL_ENV)
    res = decoupled_al(WORKLOADS[:1], MODEL_ENV, IO, ev)
    assert res.requests == {(0, "leveling"): 10, (0, "tiering"): 10}
    # repeated configs are answered from the sample store
    assert all(n <= 10 for n in res.evaluations.values()) and ev.calls == sum(res.evaluations.values())
    assert ev.calls == len(res.store)


def test_calls_are_additive_across_stages(oracle_run):
    res, ev = oracle_run
    assert max(res.requests.values()) <= 3 + 3 + 4
    assert sum(res.evaluations.values()) == ev.calls == len(res.store)


@pytest.mark.parametrize("h", [1, 4, 7, 13])
def test_budget_caps_requests(h):
    res = decoupled_al(WORKLOADS[:3], MODEL_ENV, TunerConfig(h=h, label_kind="io"), AnalyticEvaluator(MODEL_ENV))
    per_workload = {}
    for (w, _), n in res.requests.items():
        per_workload[w] = per_workload.get(w, 0) + n
    assert all(n <= h for n in per_workload.values())
    assert set(res.configs) == {0, 1, 2}


@pytest.mark.parametrize("B", [4, 16, 64])
@pytest.mark.parametrize("w", range(len(WORKLOADS)))
def test_stage_one_brackets_interior_root(w, B):
    mix = WORKLOADS[w]
    env = Environment(N=1_000_000, E=4096 // B, M=16 * MB_, min_buffer=MB_ // 4)
    root = continuous_root(mix, B)
    pts = T_neighborhood(theoretical_opt_T(env, mix, Policy.LEVELING), 2, env.T_lim)
    if root is not None and 2 < root < env.T_lim:
        assert min(pts) <= root <= max(pts)


def test_neighborhoods_stay_in_range():
    assert T_neighborhood(2, 2, 100) == [2, 4, 6]
    assert T_neighborhood(99, 2, 100) == [96, 98, 100]
    assert T_neighborhood(10, 2, 100) == [8, 10, 12]
    env = MODEL_ENV
    nb = bpk_neighborhood(env, 5 * env.N / 8, 2.0)
    assert np.allclose(np.array(nb) * 8 / env.N, [3, 5, 7])
    assert min(bpk_neighborhood(env, 0.0, 2.0)) == 0.0


def test_incumbent_prediction_never_increases(oracle_run):
    res, _ = oracle_run
    for hist in res.history.values():
        assert all(b <= a * (1 + 1e-9) for a, b in zip(hist, hist[1:]))


def test_tuning_is_deterministic():
    runs = [decoupled_al(WORKLOADS[:5], MODEL_ENV, IO, AnalyticEvaluator(MODEL_ENV)) for _ in range(2)]
    assert runs[0].configs == runs[1].configs
    assert [s.row() for s in runs[0].store] == [s.row() for s in runs[1].store]


def test_engine_evaluator_is_deterministic():
    ev = EngineEvaluator(TEST_ENV, ops=2000, device=DeviceModel(wall_clock=False))
    cfg = LsmConfig(6, Policy.LEVELING, 16 * 1024, TEST_ENV.M - 16 * 1024, 0)
    a, b = ev(3, WORKLOADS[3], cfg, 1), ev(3, WORKLOADS[3], cfg, 1)
    assert a.row() == b.row() and a.ops == 2000


def test_failing_evaluator_falls_back_to_analytic():
    def broken(*_):
        raise RuntimeError("device error")

    res = decoupled_al(WORKLOADS[:2], MODEL_ENV, IO, broken)
    assert res.failures == 40 and len(res.store) == 0
    for i, mix in enumerate(WORKLOADS[:2]):
        cfg = res.configs[i]
        T = theoretical_opt_T(MODEL_ENV, mix, cfg.policy)
        assert (cfg.T, cfg.M_b, cfg.M_f, cfg.M_c) == (T, *theoretical_opt_memory(MODEL_ENV, mix, T, cfg.policy), 0)


def test_intermittent_failures_are_skipped():
    ev = AnalyticEvaluator(MODEL_ENV)
    count = {"n": 0}

    def flaky(wid, mix, cfg, seed=0):
        count["n"] += 1
        if count["n"] % 4 == 0:
            raise RuntimeError("timeout")
        return ev(wid, mix, cfg, seed)

    res = decoupled_al(WORKLOADS[:3], MODEL_ENV, IO, flaky)
    assert res.failures > 0 and len(res.store) == count["n"] - res.failures
    assert set(res.configs) == {0, 1, 2}


def test_sample_store_rejects_duplicates_and_round_trips(tmp_path, oracle_run):
    res, _ = oracle_run
    store = res.store
    n = len(store)
    assert not store.append(store.samples[0]) and len(store) == n
    store.to_csv(tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == ("workload_id,v,r,q,w,s,policy,T,Mb_bytes,Mf_bytes,Mc_bytes,N,E,B,blocks_read,"
                      "blocks_written,mean_latency_ns,p90_latency_ns,io_per_op,seed")
    back = SampleStore.from_csv(tmp_path / "s.csv", min_buffer=MODEL_ENV.min_buffer)
    assert [s.row() for s in back] == [s.row() for s in store]


def test_resumed_store_needs_no_new_calls(oracle_run):
    res, _ = oracle_run
    ev = AnalyticEvaluator(MODEL_ENV)
    again = decoupled_al(WORKLOADS, MODEL_ENV, IO, ev, store=SampleStore(res.store))
    assert ev.calls == 0 and again.configs == res.configs


# -- extrapolation -----------------------------------------------------------------

def test_unit_scale_matches_plain_tuning():
    a = decoupled_al(WORKLOADS[:4], MODEL_ENV, IO, AnalyticEvaluator(MODEL_ENV))
    b = tune_with_extrapolation(WORKLOADS[:4], MODEL_ENV, 1, IO, AnalyticEvaluator(MODEL_ENV))
    assert a.configs == b.configs


def test_extrapolated_configs_near_full_scale_optimum():
    small = Environment(N=100_000, E=1024, M=1.6 * MB_, min_buffer=0.1 * MB_)
    ev = AnalyticEvaluator(small)
    res = tune_with_extrapolation(WORKLOADS, small, 10, IO, ev)
    big = small.scaled(10)
    for i, mix in enumerate(WORKLOADS):
        opt, _ = exhaustive_opt(big, mix)
        assert cost_of(big, mix, res.configs[i]) <= 1.05 * opt
        assert res.configs[i].total_memory == pytest.approx(big.M)


def test_call_count_independent_of_scale():
    small = Environment(N=100_000, E=1024, M=1.6 * MB_, min_buffer=0.1 * MB_)
    counts = []
    for k in (1, 10):
        ev = AnalyticEvaluator(small)
        tune_with_extrapolation(WORKLOADS[:5], small, k, IO, ev)
        counts.append(ev.calls)
    assert counts[0] == counts[1]


# -- robust tuning -----------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_model(oracle_run):
    res, _ = oracle_run
    return fit_poly(res.store.samples, label="io", strict=False)


@pytest.mark.parametrize("w", [0, 4, 9, 14])
def test_trusted_argmin_stays_in_sampling_neighborhood(oracle_model, w):
    mix = WORKLOADS[w]
    for policy in Policy:
        (T_lo, T_hi), (f_lo, f_hi) = trust_region(MODEL_ENV, mix, policy)
        cfg = model_argmin(oracle_model, MODEL_ENV, [mix], policies=(policy,), trust=(2, 2.0))
        assert T_lo <= cfg.T <= T_hi
        assert f_lo - 1e-6 <= cfg.M_f <= f_hi + 1e-6
        capped = model_argmin(oracle_model, MODEL_ENV, [mix], policies=(policy,), T_max=3)
        assert capped.T <= 3


def test_untrusted_tuning_still_reaches_oracle_optimum():
    cfg = TunerConfig(label_kind="io", trust_region=False)
    res = decoupled_al(WORKLOADS[:5], MODEL_ENV, cfg, AnalyticEvaluator(MODEL_ENV))
    for i, mix in enumerate(WORKLOADS[:5]):
        opt, _ = exhaustive_opt(MODEL_ENV, mix)
        assert cost_of(MODEL_ENV, mix, res.configs[i]) <= opt * (1 + 1e-6)


def test_zero_radius_equals_nominal_argmin(oracle_model):
    mix = WORKLOADS[7]
    assert robust_tune(mix, 0.0, 20, oracle_model, MODEL_ENV) == model_argmin(oracle_model, MODEL_ENV, [mix])


def test_single_draw_is_argmin_under_that_draw(oracle_model):
    mix = WORKLOADS[4]
    drawn = sample_kl_ball(mix, 0.2, 1, seed=3)
    assert robust_tune(mix, 0.2, 1, oracle_model, MODEL_ENV, seed=3) == model_argmin(oracle_model, MODEL_ENV, drawn)


@pytest.mark.parametrize("w", range(len(WORKLOADS)))
def test_robust_config_has_no_worse_mean_over_the_draws(oracle_model, w):
    mix = WORKLOADS[w]
    drawn = sample_kl_ball(mix, 0.2, 20, seed=w)
    robust = robust_tune(mix, 0.2, 20, oracle_model, MODEL_ENV, seed=w)
    nominal = model_argmin(oracle_model, MODEL_ENV, [mix])
    mean = lambda cfg: np.mean([cost_of(MODEL_ENV, m, cfg) for m in drawn])
    assert mean(robust) <= mean(nominal) * (1 + 1e-6)


@given(st.sampled_from(WORKLOADS), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_draws_stay_inside_the_ball(mix, rho, seed):
    for m in sample_kl_ball(mix, rho, 5, seed):
        assert kl_divergence(m.fractions, mix.fractions) <= rho + 1e-12
        assert m.fractions.sum() == pytest.approx(1.0)
        assert np.all(m.fractions[mix.fractions == 0] == 0)


def test_infeasible_radius_reported():
    with pytest.raises(ValueError, match="admits no draws"):
        sample_kl_ball(WorkloadMix(0.25, 0.25, 0.25, 0.25), 0.1, 5, max_attempts=0)
    with pytest.raises(ValueError):
        sample_kl_ball(WORKLOADS[0], 0.1, 0)
    with pytest.raises(ValueError):
        sample_kl_ball(WORKLOADS[0], -1.0, 5)
