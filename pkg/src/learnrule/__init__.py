"""Learning-rule inference for binary-choice behavior.

A Bernoulli GLM policy whose weights evolve trial by trial; the per-trial
weight update is either a closed-form rule (REINFORCE and friends) or a
small feedforward/recurrent network fitted by backpropagation through the
whole weight recurrence.
"""

from learnrule.glm import (
    SessionRecord,
    TrialRecord,
    build_covariates,
    choice_probability,
    reward_of,
    trial_log_likelihood,
)

__version__ = "0.1.0"

__all__ = [
    "SessionRecord",
    "TrialRecord",
    "build_covariates",
    "choice_probability",
    "reward_of",
    "trial_log_likelihood",
]
