"""Synthetic animal pools driven by a ground-truth learning rule.

Per trial: draw a stimulus from the grid, sample a choice from the GLM,
reward correct choices, then apply the rule (plus optional Gaussian update
noise) to advance the weights.

Seeding: animal ``i`` of a pool draws from ``PCG64(SeedSequence([master_seed, i]))``
(counter-based, so pools can be generated in any order or in parallel). Each animal
draws its random numbers in fixed blocks (stimulus indices, zero-stimulus
label coins, choice uniforms, noise normals, each of length T) so its session
depends only on its own seed, config, and rule.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from learnrule.glm import ContractError, SessionRecord
from learnrule.rules import RuleParams


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_animals: int = 100
    T: int = 500
    grid_min: float = -2.0
    grid_max: float = 2.0
    grid_step: float = 0.25
    include_zero: bool = False
    # a number, or the string "uniform" for U[-2, 2] per animal
    w0_stim: Union[float, str] = -2.0
    bias_set: tuple = (-1.0, 0.0, 1.0)
    rule: RuleParams = field(default_factory=RuleParams)
    # optional population mixture: ((RuleParams, weight), ...)
    mixture: Optional[tuple] = None
    # noise std as a fraction of the animal's learning rate
    update_noise_sigma: float = 0.0
    learn_bias: bool = False
    master_seed: int = 0

    def __post_init__(self):
        if self.n_animals < 1:
            raise ConfigError("n_animals must be positive")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.update_noise_sigma < 0:
            raise ConfigError("update_noise_sigma must be nonnegative")
        if isinstance(self.w0_stim, str) and self.w0_stim != "uniform":
            raise ConfigError(f"w0_stim must be a number or 'uniform', got {self.w0_stim!r}")
        if not self.bias_set:
            raise ConfigError("bias_set must be nonempty")
        self.stimulus_grid()
        if self.mixture is not None:
            weights = [w for _, w in self.mixture]
            if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ConfigError("mixture weights must be nonnegative and sum to 1")

    def stimulus_grid(self) -> np.ndarray:
        span = self.grid_max - self.grid_min
        if self.grid_step <= 0 or span <= 0:
            raise ConfigError("grid needs grid_max > grid_min and a positive step")
        n = span / self.grid_step
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"step {self.grid_step} does not divide [{self.grid_min}, {self.grid_max}]")
        grid = self.grid_min + self.grid_step * np.arange(int(round(n)) + 1)
        grid = np.round(grid, 12)
        if not self.include_zero:
            grid = grid[grid != 0]
        return grid

    def rule_assignment(self) -> list[RuleParams]:
        """Stratified, deterministic rule per animal index."""
        if self.mixture is None:
            return [self.rule] * self.n_animals
        weights = np.array([w for _, w in self.mixture], dtype=np.float64)
        counts = np.floor(weights * self.n_animals).astype(int)
        remainder = weights * self.n_animals - counts
        for k in np.argsort(-remainder, kind="stable")[: self.n_animals - counts.sum()]:
            counts[k] += 1
        out = []
        for (rule, _), c in zip(self.mixture, counts):
            out.extend([rule] * int(c))
        return out


@dataclass
class SimulatedAnimal:
    session: SessionRecord
    rule: RuleParams
    w: np.ndarray  # (T + 1, 2), includes w0
    dw: np.ndarray  # (T, 2), includes injected noise
    noise: np.ndarray  # (T, 2), the injected noise component
    fixed_bias: bool

    @property
    def animal_id(self) -> str:
        return self.session.animal_id


def animal_seed(master_seed: int, index: int) -> tuple:
    return (int(master_seed), int(index))


def animal_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def simulate_animal(
    config: SimConfig,
    seed,
    rule: Optional[RuleParams] = None,
    animal_id: Optional[str] = None,
) -> SimulatedAnimal:
    """Run one animal. ``seed`` is an int or a (master_seed, index) pair fed to SeedSequence."""
    rule = rule or config.rule
    rng = animal_rng(seed)
    T = config.T
    grid = config.stimulus_grid()

    w0_stim = rng.uniform(-2.0, 2.0) if config.w0_stim == "uniform" else float(config.w0_stim)
    bias = float(config.bias_set[rng.integers(len(config.bias_set))])
    stim = grid[rng.integers(len(grid), size=T)]
    coins = rng.integers(2, size=T)
    u = rng.random(T)
    normals = rng.standard_normal((T, 2))

    label = np.where(stim > 0, 1, 0)
    zero = stim == 0
    label[zero] = coins[zero]

    fixed_bias = rule.markovian and not config.learn_bias
    alpha = rule.learning_rate
    noise = normals * (config.update_noise_sigma * alpha)
    if fixed_bias:
        noise[:, 1] = 0.0

    W = np.empty((T + 1, 2))
    DW = np.empty((T, 2))
    choice = np.empty(T, dtype=np.int64)
    ws, wb = w0_stim, bias
    W[0] = ws, wb
    kind = rule.kind
    S = rule.window
    past = deque(maxlen=S)  # (s, y, p_y) of earlier trials
    recent = deque(maxlen=S)  # correctness incl. the current trial

    for t in range(T):
        s = float(stim[t])
        a = ws * s + wb
        a = 30.0 if a > 30.0 else (-30.0 if a < -30.0 else a)
        p_right = 1.0 / (1.0 + float(np.exp(-a)))  # np.exp: bitwise equal to the batched replay
        y = 1 if u[t] < p_right else 0
        z = int(label[t])
        correct = 1 if y == z else 0
        choice[t] = y
        p_y = p_right if y == 1 else 1.0 - p_right
        eps = 1.0 if y == 1 else -1.0

        if kind == "reinforce":
            coef = alpha * correct * eps * (1.0 - p_y)
            ds, db = coef * s, coef
        elif kind == "max_likelihood":
            p_z = p_right if z == 1 else 1.0 - p_right
            coef = alpha * (1.0 if z == 1 else -1.0) * (1.0 - p_z)
            ds, db = coef * s, coef
        else:
            recent.append(correct)
            gate = 1.0 if sum(recent) / len(recent) >= rule.reward_threshold else 0.0
            g = eps * (1.0 - p_y)
            ts, tb = g * s, g
            for ps, py, ppy in past:
                gp = (1.0 if py == 1 else -1.0) * (1.0 - ppy)
                ts += gp * ps
                tb += gp
            past.append((s, y, p_y))
            ds, db = alpha * gate * ts, alpha * gate * tb

        if fixed_bias:
            db = 0.0
        ds += noise[t, 0]
        db += noise[t, 1]
        DW[t] = ds, db
        ws += ds
        wb += db
        W[t + 1] = ws, wb

    reward = (choice == label).astype(np.int64)
    entropy = [int(v) for v in seed] if isinstance(seed, (tuple, list)) else [int(seed)]
    session = SessionRecord(
        animal_id or "sim" + "_".join(map(str, entropy)),
        stim.astype(np.float64),
        choice,
        reward,
        label,
        seed=entropy[0],
        source="simulated",
        meta={"seed_entropy": entropy, "rule": rule.to_dict(), "fixed_bias": fixed_bias, "etrace_counts_current_trial": True},
    )
    return SimulatedAnimal(session, rule, W, DW, noise, fixed_bias)


def simulate_pool(config: SimConfig) -> list[SimulatedAnimal]:
    rules = config.rule_assignment()
    width = len(str(config.n_animals - 1))
    return [
        simulate_animal(
            config,
            animal_seed(config.master_seed, i),
            rule=rules[i],
            animal_id=f"a{i:0{width}d}",
        )
        for i in range(config.n_animals)
    ]


def calibrate_alpha(
    config: SimConfig,
    target: float = 3.0,
    n_pilot: int = 20,
    tol: float = 0.1,
    lo: float = 1e-4,
    hi: float = 5.0,
    max_iter: int = 60,
) -> float:
    """Learning rate at which the median terminal stimulus weight hits ``target``.

    Bisection in log space over pilot pools of ``n_pilot`` animals. Stops once
    the pilot median is within ``tol`` of ``target``.
    """
    pilot = replace(config, n_animals=n_pilot, mixture=None, update_noise_sigma=0.0)

    def median_terminal(alpha):
        animals = simulate_pool(replace(pilot, rule=pilot.rule.with_rate(alpha)))
        return float(np.median([a.w[-1, 0] for a in animals]))

    a_lo, a_hi = lo, hi
    if median_terminal(a_hi) < target:
        raise ConfigError(f"even alpha={hi} does not reach w_stim={target}")
    alpha = math.sqrt(a_lo * a_hi)
    for _ in range(max_iter):
        alpha = math.sqrt(a_lo * a_hi)
        m = median_terminal(alpha)
        if abs(m - target) <= tol:
            return alpha
        if m < target:
            a_lo = alpha
        else:
            a_hi = alpha
    return alpha


@lru_cache(maxsize=None)
def _calibrated(config: SimConfig, target: float) -> float:
    return calibrate_alpha(config, target=target)


def calibrated_alpha(config: SimConfig, target: float = 3.0) -> float:
    """Memoized :func:`calibrate_alpha`."""
    return _calibrated(config, target)


def latents_table(animals: Sequence[SimulatedAnimal]) -> dict:
    """Column arrays for the latent sidecar (one row per trial)."""
    ids, idx, ws, wb, ds, db = [], [], [], [], [], []
    for a in animals:
        T = len(a.session)
        ids.extend([a.animal_id] * T)
        idx.extend(range(T))
        ws.append(a.w[:-1, 0])
        wb.append(a.w[:-1, 1])
        ds.append(a.dw[:, 0])
        db.append(a.dw[:, 1])
    return {
        "animal_id": ids,
        "trial_index": np.array(idx, dtype=np.int64),
        "w_stim": np.concatenate(ws),
        "w_bias": np.concatenate(wb),
        "dw_stim": np.concatenate(ds),
        "dw_bias": np.concatenate(db),
    }
