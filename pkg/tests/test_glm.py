import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learnrule.glm import (
    ContractError,
    SessionRecord,
    TrialRecord,
    build_covariates,
    choice_probability,
    reward_of,
    trial_log_likelihood,
)

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("s, expected", [(0.5, [0.5, 1]), (-2, [-2, 1]), (0, [0, 1])])
def test_build_covariates(s, expected):
    z = int(s > 0)
    assert build_covariates(TrialRecord(s, z, 1, z, 0)).tolist() == expected
    assert build_covariates(s).tolist() == expected


def test_choice_probability_examples():
    assert choice_probability([0, 0], [1, 1]) == 0.5
    assert choice_probability([3, 0], [1, 1]) == pytest.approx(1 / (1 + math.exp(-3)), abs=1e-15)
    assert choice_probability([3, 0], [1, 1]) == pytest.approx(0.9525741268224334, abs=1e-15)
    assert choice_probability([2, -2], [1, 1]) == 0.5


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        choice_probability([1, 2, 3], [1, 1])
    with pytest.raises(ContractError):
        trial_log_likelihood([1.0], [1, 1], 1)


def test_log_likelihood_examples():
    assert trial_log_likelihood([0, 0], [0.7, 1], 1) == pytest.approx(-math.log(2), abs=1e-15)
    # log sigmoid(3) from math.log1p as an independent evaluator
    assert trial_log_likelihood([3, 0], [1, 1], 1) == pytest.approx(-math.log1p(math.exp(-3)), abs=1e-15)
    assert trial_log_likelihood([3, 0], [1, 1], 1) == pytest.approx(-0.048587351573741958, abs=1e-12)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2))
def test_log_likelihood_pair_identity(a, b, s):
    w, x = [a, b], [s, 1.0]
    p = choice_probability(w, x)
    both = trial_log_likelihood(w, x, 1) + trial_log_likelihood(w, x, 0)
    assert both == pytest.approx(math.log(p) + math.log1p(-p), rel=1e-9, abs=1e-12)


@given(finite, finite, st.floats(-2, 2))
def test_symmetry(a, b, s):
    x = [s, 1.0]
    assert choice_probability([-a, -b], x) == pytest.approx(1 - choice_probability([a, b], x), abs=1e-12)


@given(st.floats(0.01, 10), finite)
def test_monotone_in_stimulus(w_stim, bias):
    s = np.linspace(-2, 2, 17)
    p = [choice_probability([w_stim, bias], [v, 1]) for v in s]
    assert np.all(np.diff(p) >= 0)


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.integers(0, 1))
def test_stability_and_upper_bound(a, b, y):
    ll = trial_log_likelihood([a, b], [1.0, 1.0], y)
    assert math.isfinite(ll) and ll <= 0
    p = choice_probability([a, b], [1.0, 1.0])
    assert 0 < p < 1


def test_zero_logit_is_log_half():
    assert trial_log_likelihood([1.0, -0.5], [0.5, 1.0], 0) == pytest.approx(math.log(0.5), abs=1e-15)


def test_clamp_leaves_moderate_logits_untouched():
    for a in np.linspace(-5, 5, 11):
        assert choice_probability([a, 0], [1, 1]) == 1 / (1 + math.exp(-a)) or math.isclose(
            choice_probability([a, 0], [1, 1]), 1 / (1 + math.exp(-a)), rel_tol=1e-15
        )


@pytest.mark.parametrize("y, z, r", [(1, 1, 1), (0, 1, 0), (0, 0, 1), (1, 0, 0)])
def test_reward_of(y, z, r):
    assert reward_of(y, z) == r


def test_trial_record_invariants():
    TrialRecord(0.0, 1, 0, 0, 0)  # zero stimulus: label recorded by the generator
    with pytest.raises(ContractError):
        TrialRecord(0.5, 1, 1, 0, 0)  # label must match the stimulus sign
    with pytest.raises(ContractError):
        TrialRecord(0.5, 0, 1, 1, 0)  # reward inconsistent
    with pytest.raises(ContractError):
        TrialRecord(0.5, 2, 0, 1, 0)


def test_session_record():
    trials = [TrialRecord(s, 1, int(s > 0), int(s > 0), i) for i, s in enumerate([-1, 1, 0.5])]
    sess = SessionRecord.from_trials("a", trials)
    assert len(sess) == 3 and sess.trials() == trials
    assert sess.head(2).stimulus.tolist() == [-1, 1]
    with pytest.raises(ContractError):
        SessionRecord.from_trials("a", [trials[1]])  # index must start at 0
    with pytest.raises(ContractError):
        SessionRecord("a", [], [], [], [])
