"""Synthetic recovery studies: simulate a pool, fit a model, score it against the latents.

These drivers fix the conventions shared by the acceptance checks and the
command-line examples: REINFORCE learners start at w_stim = -2 with a fixed
bias drawn from {-1, 0, 1}, and the learning rate is calibrated so the
median terminal stimulus weight reaches 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from learnrule import analysis as A
from learnrule.inference import FitConfig, FittedModel, fit
from learnrule.rules import RuleParams
from learnrule.simulate import SimConfig, calibrated_alpha, simulate_pool

# recovery fits use a slightly larger step than the optimizer default
RECOVERY_FIT = FitConfig(epochs=2000, lr=2e-3, w0_lr=1e-2, patience=50)


def base_sim(kind="reinforce", T=500, w0_stim=-2.0, **kw) -> SimConfig:
    """Calibrated simulator config for one rule kind."""
    learn_bias = kind == "etrace_reinforce" or kw.pop("learn_bias", False)
    cfg = SimConfig(T=T, w0_stim=w0_stim, rule=RuleParams(kind=kind), learn_bias=learn_bias, **kw)
    alpha = calibrated_alpha(replace(cfg, n_animals=20, master_seed=0, update_noise_sigma=0.0))
    return replace(cfg, rule=cfg.rule.with_rate(alpha))


@dataclass
class RecoveryRun:
    sim: SimConfig
    kind: str
    fit_config: FitConfig
    model: FittedModel
    animals: list
    rmse: dict
    extras: dict = field(default_factory=dict)


def recovery_run(sim: SimConfig, kind="DNNGLM", config: Optional[FitConfig] = None) -> RecoveryRun:
    config = config or RECOVERY_FIT
    animals = simulate_pool(sim)
    model = fit([a.session for a in animals], kind, config)
    return RecoveryRun(sim, kind, config, model, animals, A.recovery_rmse(model, animals))


def learned_w0(model: FittedModel, animals) -> dict:
    return {a.animal_id: np.asarray(model.initial_weights(a.session)) for a in animals}


def offset_run(base: RecoveryRun, offset: float, config: Optional[FitConfig] = None) -> RecoveryRun:
    """Refit with w0 frozen at the base run's learned w0 plus ``offset`` on the stimulus weight.

    ``offset = 0`` gives the matched control with the same frozen-w0 setup.
    """
    config = config or base.fit_config
    w0 = {k: (v + np.array([offset] + [0.0] * (len(v) - 1))).tolist() for k, v in learned_w0(base.model, base.animals).items()}
    cfg = FitConfig(**{**config.to_dict(), "w0_mode": "fixed_value", "w0_value": w0})
    model = fit([a.session for a in base.animals], base.kind, cfg)
    return RecoveryRun(base.sim, base.kind, cfg, model, base.animals, A.recovery_rmse(model, base.animals),
                       {"offset": offset})
