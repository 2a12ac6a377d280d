import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from learnrule import analysis as A
from learnrule import model as M
from learnrule.inference import FitConfig, FittedModel, chance_model, fit
from learnrule.rules import RuleParams
from learnrule.simulate import SimConfig, simulate_pool

REINFORCE = A.GroundTruthModel(RuleParams(learning_rate=0.1))


@pytest.fixture(scope="module")
def pool():
    return simulate_pool(SimConfig(n_animals=12, T=300, rule=RuleParams(learning_rate=0.1), master_seed=3))


@pytest.fixture(scope="module")
def dnn(pool):
    return fit([a.session for a in pool], M.DNNGLM, FitConfig(epochs=20, seed=0))


def by(rows, outcome=None, w=None):
    return [r for r in rows if (outcome is None or r["outcome"] == outcome) and (w is None or r["w_stim"] == w)]


def test_ground_truth_slices():
    rows = A.update_slices(REINFORCE)
    assert len(rows) == 16 * 6 * 2
    assert all(r["dw_stim"] == 0 and r["dw_bias"] == 0 for r in by(rows, "incorrect"))
    at0 = {r["stimulus"]: abs(r["dw_stim"]) for r in by(rows, "correct", 0.0)}
    at3 = {r["stimulus"]: abs(r["dw_stim"]) for r in by(rows, "correct", 3.0)}
    assert all(at3[s] < at0[s] for s in at0)


def test_parametric_slice_cardinality():
    m = FittedModel(M.REINFORCE_PARAM, {"alpha": np.array(0.1), "baseline": np.array(0.0)}, FitConfig())
    rows = A.update_slices(m)
    assert len(rows) == len(A.DEFAULT_STIMULI) * len(A.DEFAULT_W_LEVELS) * 2
    # b = 0 reproduces the closed-form rule with a learned bias
    gt = A.update_slices(A.GroundTruthModel(RuleParams(learning_rate=0.1), fix_bias=False))
    assert A.slice_rmse(rows, gt) < 1e-15


def test_slices_bit_identical(dnn):
    a = A.update_slices(dnn)
    b = A.update_slices(dnn)
    assert a == b


def test_rnn_slices_use_history_average(pool):
    rnn = fit([a.session for a in pool], M.RNNGLM, FitConfig(epochs=2, seed=0))
    grid = A.SliceGrid(n_histories=10, w_levels=(0.0,))
    assert A.update_slices(rnn, grid) == A.update_slices(rnn, grid)


def test_slice_grid_validation():
    with pytest.raises(Exception):
        A.SliceGrid(stimuli=())
    with pytest.raises(Exception):
        A.SliceGrid(w_levels=(float("inf"),))


def test_recovery_rmse_self_is_zero(pool):
    res = A.recovery_rmse(REINFORCE, pool)
    assert res["rmse"] == 0 and res["log10_rmse"] == float("-inf")


def test_recovery_rmse_zero_model(pool):
    zero = FittedModel(M.REINFORCE_PARAM, {"alpha": np.array(0.0), "baseline": np.array(0.0)}, FitConfig())
    res = A.recovery_rmse(zero, pool)
    dw = np.concatenate([a.dw for a in pool])
    assert res["rmse"] == pytest.approx(np.sqrt(np.mean(dw**2)), rel=1e-12)


def test_recovery_needs_latents(pool):
    class Bare:
        session = pool[0].session
        w = None

    with pytest.raises(A.MissingLatentsError):
        A.recovery_rmse(REINFORCE, [Bare()])


def test_history_gap_contracts(dnn):
    with pytest.raises(M.UnsupportedModelError):
        A.history_gap(dnn, A.HistoryCondition(k=3))
    gap = A.history_gap(A.MarkovAdapter(dnn), A.HistoryCondition(k=3))
    assert np.all(gap == 0)


@given(st.integers(0, 30))
def test_history_gap_k0_is_zero(offset):
    et = A.GroundTruthModel(RuleParams("etrace_reinforce", 0.1))
    assert np.all(A.history_gap(et, A.HistoryCondition(k=0, offset=offset, n_draws=5)) == 0)


def test_ground_truth_etrace_gap_positive():
    et = A.GroundTruthModel(RuleParams("etrace_reinforce", 0.1))
    assert np.mean(A.history_gap(et, A.HistoryCondition(k=3))) > 0


def test_ttest_hand_example():
    res = A.paired_ttest([1, 2, 3, 4], [0, 0, 0, 0])
    # textbook: mean 2.5, sd sqrt(5/3), t = 2.5 / (sd / 2)
    assert res["t"] == pytest.approx(2.5 / (math.sqrt(5 / 3) / 2), rel=1e-12)
    assert res["t"] == pytest.approx(3.872983, abs=1e-6)
    assert res["p"] == pytest.approx(0.030466, abs=1e-6)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.integers(0, 1000))
def test_ttest_matches_scipy_and_is_antisymmetric(a, seed):
    a = np.array(a)
    b = a + np.random.default_rng(seed).normal(size=len(a))
    res = A.paired_ttest(a, b)
    ref = stats.ttest_rel(a, b)
    assert res["t"] == pytest.approx(ref.statistic, rel=1e-9)
    assert res["p"] == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-15)
    swapped = A.paired_ttest(b, a)
    assert swapped["t"] == pytest.approx(-res["t"], rel=1e-12) and swapped["p"] == res["p"]
    assert 0 <= res["p"] <= 1


def test_ttest_degenerate():
    res = A.paired_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert res["degenerate"] and res["p"] == 1.0


def test_crossval_animals(pool):
    sessions = [a.session for a in pool]
    cfg = FitConfig(epochs=3)
    rep = A.crossval_animals(sessions, [M.REINFORCE_PARAM, "chance"], K=3, seeds=(0, 1), config=cfg)
    assert len(rep.tests) == 1
    assert set(rep.per_animal["chance"]) == {s.animal_id for s in sessions}
    for s in sessions:
        assert rep.per_animal["chance"][s.animal_id] == len(s) * math.log(0.5)
    again = A.crossval_animals(sessions, [M.REINFORCE_PARAM, "chance"], K=3, seeds=(0, 1), config=cfg)
    assert again.to_dict() == rep.to_dict()
    twin = A.crossval_animals(sessions, ["chance", "chance"], K=3, config=cfg)
    assert twin.tests[0]["p"] == 1.0
    with pytest.raises(Exception):
        A.crossval_animals(sessions, ["chance"], K=13)


def test_fold_assignment_balanced():
    f = A.fold_assignment(23, 5, seed=1)
    assert sorted(np.bincount(f).tolist()) == [4, 4, 5, 5, 5]
    assert f.tolist() == A.fold_assignment(23, 5, seed=1).tolist()


def test_crossval_future(pool):
    sessions = [a.session for a in pool]
    rep = A.crossval_future(sessions, ["chance"], split_trial=100, horizon=150)
    assert rep.totals["chance"]["seeds_then_animals"] == pytest.approx(12 * 150 * math.log(0.5), rel=1e-14)
    for v in rep.per_animal["chance"].values():
        assert v == 150 * math.log(0.5)
    empty = A.crossval_future(sessions, ["chance"], split_trial=100, horizon=0)
    assert empty.degenerate
    with pytest.raises(Exception):
        A.crossval_future(sessions, ["chance"], split_trial=250, horizon=100)


def test_future_consistent_across_horizons():
    """Per-trial LL drifts with ongoing learning, so compare against the generating weights at each horizon."""
    # bias learning on, so the parametric family contains the generating rule
    pool = simulate_pool(SimConfig(n_animals=20, T=1300, rule=RuleParams(learning_rate=0.05), learn_bias=True,
                                   master_seed=8))
    sessions = [a.session for a in pool]
    m = fit([s.head(300) for s in sessions], M.REINFORCE_PARAM, FitConfig(epochs=300, lr=5e-3))
    frozen = FittedModel(M.REINFORCE_PARAM, {"alpha": np.array(0.0), "baseline": np.array(0.0)}, m.config,
                         dict(m.w0_table))
    gaps = []
    for h in (200, 500, 1000):
        fitted = A.future_log_likelihood(m, sessions, 300, h)["total"] / (20 * h)
        still = A.future_log_likelihood(frozen, sessions, 300, h)["total"] / (20 * h)
        oracle = []
        for a in pool:
            logit = a.w[300 : 300 + h, 0] * a.session.stimulus[300 : 300 + h] + a.w[300 : 300 + h, 1]
            y = a.session.choice[300 : 300 + h]
            oracle.append(-np.sum(y * np.logaddexp(0, -logit) + (1 - y) * np.logaddexp(0, logit)))
        oracle = np.sum(oracle) / (20 * h)
        assert oracle >= fitted > max(still, math.log(0.5))
        gaps.append(oracle - fitted)
    assert max(gaps) - min(gaps) < 0.02


def test_se_scaling_clamp_and_repeatability():
    res = A.se_scaling_check(n_values=(2, 4, 8), repetitions=50, w0=3.0, w1=3.0)
    assert res["clamped"] > 0 and all(np.isfinite(res["se"]))
    a = A.se_scaling_check(repetitions=200, seed=1)
    b = A.se_scaling_check(repetitions=400, seed=2)
    assert abs(a["slope"] - b["slope"]) < 3 * math.hypot(a["slope_se"], b["slope_se"])


def test_se_scaling_mle_matches_optimizer():
    """Closed-form logit MLE agrees with a numerical maximizer of the Bernoulli likelihood."""
    from scipy.optimize import minimize_scalar

    rng = np.random.default_rng(0)
    x = rng.choice([-1.0, 1.0], size=300)
    y = (rng.random(300) < 1 / (1 + np.exp(-0.8 * x))).astype(float)
    frac = np.mean(y == (x > 0))
    closed = math.log(frac / (1 - frac))
    nll = lambda w: np.sum(np.logaddexp(0, -(2 * y - 1) * w * x))
    assert closed == pytest.approx(minimize_scalar(nll).x, abs=1e-5)


def test_report_to_dict_p_values(pool):
    rep = A.report_from_models({"chance": chance_model(), "also": chance_model()}, [a.session for a in pool])
    d = rep.to_dict()
    assert all(0 <= t["p"] <= 1 for t in d["tests"]) and d["format_version"] == 1
