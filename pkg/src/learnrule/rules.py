"""Closed-form ground-truth learning rules.

All three rules are policy-gradient style updates on the GLM weights:

* REINFORCE: dw = alpha * r * eps_y * (1 - p_y) * x
* maximum likelihood: dw = alpha * eps_z * (1 - p_z) * x  (ignores choice and reward)
* eligibility-trace REINFORCE: the REINFORCE factor summed over the current and
  the previous S trials, gated by a history-dependent reward.

eps is +1 for a rightward choice/label and -1 for leftward; p_y is the policy
probability of the choice actually taken.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from learnrule.glm import ContractError, choice_probability

RULE_KINDS = ("reinforce", "max_likelihood", "etrace_reinforce")
MARKOVIAN_KINDS = ("reinforce", "max_likelihood")


@dataclass(frozen=True)
class RuleParams:
    kind: str = "reinforce"
    learning_rate: float = 0.1
    window: int = 10
    reward_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ContractError(f"unknown rule kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.window < 1:
            raise ContractError("window must be >= 1")
        if not 0 < self.reward_threshold <= 1:
            raise ContractError("reward_threshold must lie in (0, 1]")

    @property
    def markovian(self) -> bool:
        return self.kind in MARKOVIAN_KINDS

    def with_rate(self, alpha: float) -> "RuleParams":
        return RuleParams(self.kind, alpha, self.window, self.reward_threshold)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "window": self.window,
            "reward_threshold": self.reward_threshold,
        }


@dataclass
class TrialContext:
    """Current-trial variables plus an optional ring of past (x, y, p_y)."""

    w: np.ndarray
    x: np.ndarray
    y: int
    r: int
    history: deque = field(default_factory=deque)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.w.shape != self.x.shape:
            raise ContractError("w and x must have the same shape")

    @property
    def p_y(self) -> float:
        return taken_choice_probability(self.w, self.x, self.y)


def choice_sign(y) -> float:
    return 1.0 if y == 1 else -1.0


def taken_choice_probability(w, x, y) -> float:
    p_right = choice_probability(w, x)
    return p_right if y == 1 else 1.0 - p_right


def policy_gradient_term(x, y, p_y) -> np.ndarray:
    """eps_y * (1 - p_y) * x, the gradient of log p(y | x, w) w.r.t. w."""
    return choice_sign(y) * (1.0 - p_y) * np.asarray(x, dtype=np.float64)


def reinforce_update(ctx: TrialContext, alpha: float) -> np.ndarray:
    return alpha * ctx.r * policy_gradient_term(ctx.x, ctx.y, ctx.p_y)


def max_likelihood_update(ctx: TrialContext, label: int, alpha: float) -> np.ndarray:
    p_z = taken_choice_probability(ctx.w, ctx.x, label)
    return alpha * policy_gradient_term(ctx.x, label, p_z)


def etrace_reinforce_update(ctx: TrialContext, alpha: float, window: int) -> np.ndarray:
    """Eligibility-trace REINFORCE.

    ``ctx.history`` holds past (x, y, p_y) tuples, oldest first; only the most
    recent ``window`` are used. Trials before the session start contribute
    nothing. ``ctx.r`` is the (already history-dependent) reward gate.
    """
    total = policy_gradient_term(ctx.x, ctx.y, ctx.p_y)
    past = list(ctx.history)[-window:] if window > 0 else []
    for x, y, p_y in past:
        total = total + policy_gradient_term(x, y, p_y)
    return alpha * ctx.r * total


def etrace_reward(recent_corrects, threshold: float = 0.5) -> int:
    """1 when at least ``threshold`` of the recent trials were correct."""
    recent = np.asarray(recent_corrects)
    if recent.size == 0:
        raise ContractError("recent_corrects must be nonempty")
    return int(recent.mean() >= threshold)


def rule_update(rule: RuleParams, ctx: TrialContext, label: int) -> np.ndarray:
    """Dispatch one update; for the etrace rule ``ctx.r`` must already be gated."""
    if rule.kind == "reinforce":
        return reinforce_update(ctx, rule.learning_rate)
    if rule.kind == "max_likelihood":
        return max_likelihood_update(ctx, label, rule.learning_rate)
    return etrace_reinforce_update(ctx, rule.learning_rate, rule.window)


def batch_rule_updates(
    rule: RuleParams,
    w: np.ndarray,
    stimulus: np.ndarray,
    choice: np.ndarray,
    label: np.ndarray,
    fix_bias: Optional[bool] = None,
) -> np.ndarray:
    """Rule updates for given weight sequences (teacher forced).

    Arrays are (n, T) except ``w`` which is (n, T, 2). Weights are taken as
    given rather than rolled forward, so this evaluates the update function on
    visited or synthetic tuples. Rewards are recomputed from choice and label.
    """
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(stimulus, dtype=np.float64)
    y = np.asarray(choice)
    z = np.asarray(label)
    x = np.stack([s, np.ones_like(s)], axis=-1)
    logit = np.clip(w[..., 0] * s + w[..., 1], -30.0, 30.0)
    # same operation order as the simulator, so replaying a Markovian rule is exact
    p_right = 1.0 / (1.0 + np.exp(-logit))
    if fix_bias is None:
        fix_bias = rule.markovian
    alpha = rule.learning_rate
    correct = (y == z).astype(np.float64)

    if rule.kind == "max_likelihood":
        eps = np.where(z == 1, 1.0, -1.0)
        p_taken = np.where(z == 1, p_right, 1.0 - p_right)
        dw = (alpha * eps * (1.0 - p_taken))[..., None] * x
    else:
        eps = np.where(y == 1, 1.0, -1.0)
        p_taken = np.where(y == 1, p_right, 1.0 - p_right)
        g = (eps * (1.0 - p_taken))[..., None] * x
        if rule.kind == "reinforce":
            dw = (alpha * correct * eps * (1.0 - p_taken))[..., None] * x
        else:
            S = rule.window
            csum = np.cumsum(g, axis=-2)
            lagged = np.zeros_like(csum)
            lagged[..., S + 1 :, :] = csum[..., : -(S + 1), :]
            trace = csum - lagged
            # fraction correct over the current trial and up to S-1 before it
            ccs = np.cumsum(correct, axis=-1)
            clag = np.zeros_like(ccs)
            clag[..., S:] = ccs[..., :-S]
            count = np.minimum(np.arange(1, s.shape[-1] + 1), S)
            gate = ((ccs - clag) / count >= rule.reward_threshold).astype(np.float64)
            dw = alpha * gate[..., None] * trace
    if fix_bias:
        dw = dw.copy()
        dw[..., 1] = 0.0
    return dw
