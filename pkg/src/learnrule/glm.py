"""Bernoulli GLM decision policy.

p(right | x, w) = sigmoid(w . x) with x = [stimulus, 1].  Everything here is
float64 and side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOGIT_CLAMP = 30.0


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


@dataclass(frozen=True)
class TrialRecord:
    stimulus: float
    choice: int
    reward: int
    label: int
    trial_index: int

    def __post_init__(self):
        for name in ("choice", "reward", "label"):
            if getattr(self, name) not in (0, 1):
                raise ContractError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        if self.trial_index < 0:
            raise ContractError("trial_index must be nonnegative")
        if self.stimulus != 0 and self.label != int(self.stimulus > 0):
            raise ContractError(
                f"label {self.label} inconsistent with stimulus {self.stimulus}"
            )
        if self.reward != reward_of(self.choice, self.label):
            raise ContractError("reward must equal 1[choice == label]")


@dataclass
class SessionRecord:
    """Ordered trials of one animal, stored column-wise."""

    animal_id: str
    stimulus: np.ndarray
    choice: np.ndarray
    reward: np.ndarray
    label: np.ndarray
    seed: int | None = None
    source: str = "simulated"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stimulus = np.asarray(self.stimulus, dtype=np.float64)
        self.choice = np.asarray(self.choice, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        n = len(self.stimulus)
        if n == 0:
            raise ContractError(f"session {self.animal_id!r} has no trials")
        if not (len(self.choice) == len(self.reward) == len(self.label) == n):
            raise ContractError("trial columns have different lengths")
        if self.source not in ("simulated", "ingested"):
            raise ContractError(f"unknown source {self.source!r}")

    def __len__(self):
        return len(self.stimulus)

    @property
    def trial_index(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @classmethod
    def from_trials(cls, animal_id: str, trials: Sequence[TrialRecord], **kw) -> "SessionRecord":
        for i, tr in enumerate(trials):
            if tr.trial_index != i:
                raise ContractError(
                    f"trial_index must run 0..n-1; trial {i} has index {tr.trial_index}"
                )
        return cls(
            animal_id,
            np.array([t.stimulus for t in trials], dtype=np.float64),
            np.array([t.choice for t in trials]),
            np.array([t.reward for t in trials]),
            np.array([t.label for t in trials]),
            **kw,
        )

    def trials(self) -> list[TrialRecord]:
        return [
            TrialRecord(float(s), int(y), int(r), int(z), i)
            for i, (s, y, r, z) in enumerate(
                zip(self.stimulus, self.choice, self.reward, self.label)
            )
        ]

    def head(self, n: int) -> "SessionRecord":
        return self.slice(0, n)

    def slice(self, start: int, stop: int) -> "SessionRecord":
        return SessionRecord(
            self.animal_id,
            self.stimulus[start:stop],
            self.choice[start:stop],
            self.reward[start:stop],
            self.label[start:stop],
            seed=self.seed,
            source=self.source,
            meta=dict(self.meta),
        )


def build_covariates(trial) -> np.ndarray:
    """[stimulus, 1] for a TrialRecord or a bare stimulus value."""
    s = trial.stimulus if isinstance(trial, TrialRecord) else trial
    return np.array([float(s), 1.0])


def covariate_matrix(stimulus) -> np.ndarray:
    """Stack covariates for an array of stimuli; shape (..., 2)."""
    s = np.asarray(stimulus, dtype=np.float64)
    return np.stack([s, np.ones_like(s)], axis=-1)


def _check_dims(w, x):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape[-1] != x.shape[-1]:
        raise ContractError(f"weight dim {w.shape[-1]} != covariate dim {x.shape[-1]}")
    return w, x


def clamped_logit(w, x, bound: float = LOGIT_CLAMP):
    w, x = _check_dims(w, x)
    return np.clip(np.sum(w * x, axis=-1), -bound, bound)


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out if out.ndim else float(out)


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow."""
    a = np.asarray(a, dtype=np.float64)
    return -np.logaddexp(0.0, -a)


def choice_probability(w, x, bound: float = LOGIT_CLAMP):
    """Probability of a rightward choice, strictly inside (0, 1)."""
    return sigmoid(clamped_logit(w, x, bound))


def trial_log_likelihood(w, x, y, bound: float = LOGIT_CLAMP):
    """Bernoulli log-likelihood of choice y under weights w."""
    a = clamped_logit(w, x, bound)
    y = np.asarray(y, dtype=np.float64)
    out = y * log_sigmoid(a) + (1.0 - y) * log_sigmoid(-a)
    return out if np.ndim(out) else float(out)


def reward_of(choice, label) -> int:
    if choice not in (0, 1) or label not in (0, 1):
        raise ContractError("choice and label must be binary")
    return int(choice == label)
