from dataclasses import replace

import numpy as np
import pytest

from learnrule.rules import RuleParams
from learnrule.simulate import (
    ConfigError,
    SimConfig,
    animal_seed,
    calibrated_alpha,
    latents_table,
    simulate_animal,
    simulate_pool,
)


def small(**kw):
    return SimConfig(**{"n_animals": 3, "T": 200, "rule": RuleParams(learning_rate=0.1), **kw})


def test_determinism():
    cfg = small()
    a = simulate_animal(cfg, animal_seed(4, 2))
    b = simulate_animal(cfg, animal_seed(4, 2))
    for col in ("stimulus", "choice", "reward", "label"):
        assert getattr(a.session, col).tobytes() == getattr(b.session, col).tobytes()
    assert a.w.tobytes() == b.w.tobytes()


def test_grid_and_rewards():
    pool = simulate_pool(small(n_animals=5))
    grid = set(small().stimulus_grid().tolist())
    for a in pool:
        s = a.session
        assert np.all(np.abs(s.stimulus) >= 0.25)
        assert set(s.stimulus.tolist()) <= grid
        assert np.array_equal(s.reward, (s.choice == s.label).astype(int))
        assert np.array_equal(s.label, (s.stimulus > 0).astype(int))


def test_include_zero_labels_recorded():
    pool = simulate_pool(small(include_zero=True, T=400))
    zeros = np.concatenate([a.session.label[a.session.stimulus == 0] for a in pool])
    assert len(zeros) > 0 and set(zeros.tolist()) <= {0, 1}


def test_bad_grid():
    with pytest.raises(ConfigError):
        SimConfig(grid_step=0.3)
    with pytest.raises(ConfigError):
        SimConfig(mixture=((RuleParams(), 0.3), (RuleParams(), 0.3)))


def test_pool_ids_and_trajectories_distinct():
    pool = simulate_pool(small())
    assert len({a.animal_id for a in pool}) == 3
    assert len({a.session.choice.tobytes() for a in pool}) == 3


def test_master_seeds_do_not_collide():
    a = simulate_pool(small(master_seed=0))
    b = simulate_pool(small(master_seed=1))
    assert all(x.session.choice.tobytes() != y.session.choice.tobytes() for x, y in zip(a, b))


def test_order_independence():
    cfg = small(n_animals=4)
    pool = simulate_pool(cfg)
    alone = simulate_animal(cfg, animal_seed(cfg.master_seed, 3), animal_id="x")
    assert alone.session.choice.tobytes() == pool[3].session.choice.tobytes()


def test_latent_recurrence_and_fixed_bias():
    for a in simulate_pool(small()):
        np.testing.assert_allclose(a.w[1:], a.w[:-1] + a.dw, atol=1e-12)
        assert np.all(a.dw[:, 1] == 0) and a.fixed_bias
        assert np.all(a.dw[a.session.reward == 0] == 0)


def test_max_likelihood_bias_replay():
    cfg = small(rule=RuleParams("max_likelihood", 0.1), learn_bias=True)
    a = simulate_pool(cfg)[0]
    x = np.stack([a.session.stimulus, np.ones(len(a.session))], 1)
    p_right = 1 / (1 + np.exp(-np.sum(a.w[:-1] * x, 1)))
    z = a.session.label
    p_z = np.where(z == 1, p_right, 1 - p_right)
    np.testing.assert_allclose(a.dw[:, 1], 0.1 * (2 * z - 1) * (1 - p_z), atol=1e-12)


def test_noise_bookkeeping():
    quiet = simulate_pool(small(n_animals=2))
    noisy = simulate_pool(small(n_animals=2, update_noise_sigma=1.0, learn_bias=True))
    assert any(q.session.choice.tobytes() != n.session.choice.tobytes() for q, n in zip(quiet, noisy))
    for n in noisy:
        assert np.std(n.noise[:, 0]) == pytest.approx(0.1, rel=0.15)
        x = np.stack([n.session.stimulus, np.ones(len(n.session))], 1)
        p_right = 1 / (1 + np.exp(-np.sum(n.w[:-1] * x, 1)))
        y = n.session.choice
        p_y = np.where(y == 1, p_right, 1 - p_right)
        clean = 0.1 * n.session.reward[:, None] * ((2 * y - 1) * (1 - p_y))[:, None] * x
        np.testing.assert_allclose(n.dw - clean, n.noise, atol=1e-12)


def test_mixture_assignment_counts():
    for n in (7, 8):
        cfg = small(n_animals=n, mixture=((RuleParams(learning_rate=0.2), 0.5), (RuleParams(learning_rate=0.1), 0.5)))
        rates = [r.learning_rate for r in cfg.rule_assignment()]
        assert rates.count(0.2) == (n + 1) // 2 and rates.count(0.1) == n // 2


def test_calibration_hits_target():
    cfg = SimConfig(n_animals=100, T=500)
    alpha = calibrated_alpha(replace(cfg, n_animals=20))
    pool = simulate_pool(replace(cfg, rule=cfg.rule.with_rate(alpha), master_seed=7))
    med = np.median([a.w[-1, 0] for a in pool])
    assert 2.5 <= med <= 3.5


def test_latents_table_shape():
    pool = simulate_pool(small())
    tab = latents_table(pool)
    assert len(tab["animal_id"]) == 600
    assert np.array_equal(tab["w_stim"][:200], pool[0].w[:-1, 0])
