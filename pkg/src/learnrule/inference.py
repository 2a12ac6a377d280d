"""Fitting learning-rule models to choice data and rolling them forward.

``fit`` unrolls every training session from its starting weights, scores the
animal's actual choices under the evolving GLM, and trains the update model
(and optionally the starting weights) with Adam on the mean per-trial
cross-entropy. The animal's real choices and rewards drive the inputs at every
trial; the model never samples its own behavior.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from learnrule import model as M
from learnrule import nets
from learnrule.glm import ContractError, SessionRecord

log = logging.getLogger(__name__)

W0_MODES = ("trainable", "fixed_psychometric", "fixed_zero", "fixed_value")


class UnderdeterminedError(ContractError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


def estimate_initial_weights(trials, k: int = 100) -> np.ndarray:
    """Psychometric estimate of [w_stim, w_bias] from the first ``k`` trials.

    Empirical p(right | s) per stimulus value, add-one smoothed on both
    outcomes, mapped through the logit and regressed on [s, 1] by least
    squares weighted by the trial count at each stimulus.
    """
    if isinstance(trials, SessionRecord):
        s = trials.stimulus[:k]
        y = trials.choice[:k]
    else:
        trials = list(trials)[:k]
        s = np.array([t.stimulus for t in trials], dtype=np.float64)
        y = np.array([t.choice for t in trials], dtype=np.float64)
    if len(s) < 10:
        raise UnderdeterminedError(f"need at least 10 trials, got {len(s)}")
    levels, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    if len(levels) < 2:
        raise UnderdeterminedError("need at least two distinct stimulus values")
    rights = np.bincount(inverse, weights=y, minlength=len(levels))
    p = (rights + 1.0) / (counts + 2.0)
    target = np.log(p) - np.log1p(-p)
    A = np.stack([levels, np.ones_like(levels)], axis=1)
    sw = np.sqrt(counts)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], target * sw, rcond=None)
    return coef


@dataclass
class FitConfig:
    epochs: int = 2000
    lr: float = 1e-3
    w0_lr: float = 1e-2
    seed: int = 0
    w0_mode: str = "trainable"
    w0_value: Optional[list] = None
    # added to the psychometric estimate (trainable / fixed_psychometric modes)
    w0_offset: Optional[list] = None
    w0_sharing: str = "per_animal"
    psychometric_trials: int = 100
    clip_norm: Optional[float] = 5.0
    patience: int = 50
    val_fraction: float = 0.1
    batch_size: Optional[int] = None
    hidden: int = nets.HIDDEN

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.w0_mode not in W0_MODES:
            raise ContractError(f"w0_mode must be one of {W0_MODES}")
        if self.w0_sharing not in ("per_animal", "shared"):
            raise ContractError("w0_sharing must be 'per_animal' or 'shared'")
        if self.w0_mode == "fixed_value" and self.w0_value is None:
            raise ContractError("fixed_value mode needs w0_value")
        if not 0 <= self.val_fraction < 1:
            raise ContractError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FittedModel:
    kind: str
    params: dict
    config: FitConfig
    w0_table: dict = field(default_factory=dict)
    shared_w0: Optional[np.ndarray] = None
    norm: Optional[dict] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return M.glm_dim(self.kind)

    def initial_weights(self, session) -> np.ndarray:
        """w0 for a session: learned value if the animal was fitted, else the configured rule."""
        if self.shared_w0 is not None:
            return self.shared_w0.copy()
        aid = getattr(session, "animal_id", None)
        if aid in self.w0_table:
            return np.array(self.w0_table[aid], dtype=np.float64)
        return default_w0(self.config, session, self.d)

    def batch(self, sessions, T=None) -> M.Batch:
        return M.make_batch(self.kind, sessions, norm=self.norm, T=T)

    @property
    def recurrent(self) -> bool:
        return self.kind == M.RNNGLM

    def teacher_forced(self, W, stimulus, choice, reward) -> np.ndarray:
        """Updates at supplied weights W (n, T, d) for given trial sequences."""
        batch = M.batch_from_arrays(self.kind, stimulus, choice, reward, norm=self.norm)
        return M.teacher_forced_updates(self.kind, self.params, W, batch)


def default_w0(config: FitConfig, session, d: int) -> np.ndarray:
    w0 = np.zeros(d)
    mode = config.w0_mode
    if mode == "fixed_zero":
        return w0
    if mode == "fixed_value":
        v = config.w0_value
        if isinstance(v, dict):
            v = v[session.animal_id]
        v = np.asarray(v, dtype=np.float64)
        w0[: len(v)] = v
        return w0
    try:
        w0[:2] = estimate_initial_weights(session, config.psychometric_trials)
    except UnderdeterminedError:
        warnings.warn(f"psychometric init failed for {getattr(session, 'animal_id', '?')}; using 0")
    if config.w0_offset is not None:
        off = np.asarray(config.w0_offset, dtype=np.float64)
        w0[: len(off)] += off
    return w0


def chance_model() -> FittedModel:
    """w fixed at 0 for every trial: each choice has probability 1/2."""
    return FittedModel(
        M.REINFORCE_PARAM,
        {"alpha": np.array(0.0), "baseline": np.array(0.0)},
        FitConfig(epochs=1, w0_mode="fixed_zero"),
    )


def split_validation(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(fraction * n)) if n >= 5 else 0
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _project(kind, params):
    if kind == M.REINFORCE_PARAM_NONNEG:
        params["baseline"] = np.minimum(params["baseline"], 0.0)
    return params


def session_loss(model: FittedModel, sessions, T=None) -> float:
    """Summed cross-entropy of ``sessions`` along the model's own trajectories."""
    batch = model.batch(sessions, T)
    w0 = np.stack([model.initial_weights(s) for s in sessions])
    return M.forward(model.kind, model.params, batch, w0, record=False).loss


def fit(dataset: Sequence[SessionRecord], kind: str, config: Optional[FitConfig] = None) -> FittedModel:
    config = config or FitConfig()
    M.check_kind(kind)
    sessions = []
    for s in dataset:
        if len(s) == 0:
            warnings.warn(f"skipping empty session {s.animal_id}")
            continue
        sessions.append(s)
    if not sessions:
        raise ContractError("dataset has no nonempty sessions")
    rng = np.random.default_rng(config.seed)
    d = M.glm_dim(kind)
    train_idx, val_idx = split_validation(len(sessions), config.val_fraction, rng)
    train = [sessions[i] for i in train_idx]
    val = [sessions[i] for i in val_idx]

    norm = None
    if kind == M.DNNGLM_HISTORY:
        norm = M.history_norm(
            [(s.stimulus[None], s.choice[None], s.reward[None], np.ones((1, len(s)))) for s in train]
        )
    model = FittedModel(kind, {}, config, norm=norm)
    params = M.init_params(kind, rng, config.hidden)

    batch = model.batch(train)
    init_w0 = np.stack([default_w0(config, s, d) for s in train])
    trainable_w0 = config.w0_mode == "trainable"
    if config.w0_sharing == "shared":
        init_w0 = init_w0.mean(axis=0, keepdims=True)
    if trainable_w0:
        params["w0"] = init_w0.copy()
    fixed_w0 = init_w0

    val_batch = model.batch(val) if val else None
    val_w0 = np.stack([default_w0(config, s, d) for s in val]) if val else None
    val_opt = nets.AdamState(lr=config.w0_lr)

    opt = nets.AdamState(lr=config.lr, group_lr={"w0": config.w0_lr})
    n_trials = batch.n_trials
    losses, val_lls = [], []
    best_ll, best_params, best_epoch = -math.inf, None, None
    bad = 0
    t0 = time.time()

    def current_w0(p):
        w0 = p["w0"] if trainable_w0 else fixed_w0
        return np.broadcast_to(w0, (batch.n, d))

    for epoch in range(config.epochs):
        if config.batch_size is None or config.batch_size >= batch.n:
            chunks = [np.arange(batch.n)]
        else:
            perm = rng.permutation(batch.n)
            chunks = [perm[i : i + config.batch_size] for i in range(0, batch.n, config.batch_size)]
        epoch_loss = 0.0
        for idx in chunks:
            sub = batch if len(idx) == batch.n else _subset(batch, idx)
            net = {k: v for k, v in params.items() if k != "w0"}
            w0 = current_w0(params)[idx]
            tape = M.forward(kind, net, sub, w0)
            if not np.isfinite(tape.loss):
                raise NumericalAbort(
                    f"non-finite training loss at epoch {epoch}",
                    {"epoch": epoch, "train_loss": losses},
                )
            grads = M.backward(tape)
            gw0 = grads.pop("w0")
            if trainable_w0:
                full = np.zeros((batch.n, d))
                full[idx] = gw0
                grads["w0"] = full.sum(axis=0, keepdims=True) if config.w0_sharing == "shared" else full
            scale = 1.0 / max(sub.n_trials, 1)
            grads = {k: g * scale for k, g in grads.items()}
            grads = nets.clip_by_global_norm(grads, config.clip_norm)
            params = _project(kind, nets.adam_step(opt, params, grads))
            epoch_loss += tape.loss
        losses.append(epoch_loss / n_trials)

        if val_batch is None:
            continue
        # score held-out animals; their starting weights (not the rule) are
        # tuned alongside, mirroring how training animals are treated
        net = {k: v for k, v in params.items() if k != "w0"}
        vw0 = np.broadcast_to(val_w0, (val_batch.n, d))
        vtape = M.forward(kind, net, val_batch, vw0, record=trainable_w0)
        vl = -vtape.loss
        if not np.isfinite(vl):
            vl = -math.inf
        val_lls.append(vl / val_batch.n_trials)
        if vl > best_ll:
            best_ll, best_epoch, bad = vl, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
            best_val_w0 = np.array(val_w0, copy=True)
        else:
            bad += 1
            if bad >= config.patience:
                break
        if trainable_w0 and np.isfinite(vl):
            gv = M.backward(vtape)["w0"] / val_batch.n_trials
            if config.w0_sharing == "shared":
                gv = gv.sum(axis=0, keepdims=True)
            val_w0 = nets.adam_step(val_opt, {"w0": val_w0}, {"w0": gv})["w0"]

    final = best_params if best_params is not None else params
    diagnostics = {
        "train_loss": losses,
        "val_ll": val_lls,
        "epochs_run": len(losses),
        "best_epoch": best_epoch if best_params is not None else len(losses) - 1,
        "n_train": len(train),
        "n_val": len(val),
        "val_ids": [s.animal_id for s in val],
        "wall_time": time.time() - t0,
    }
    w0_final = final.get("w0", fixed_w0)
    final = {k: v for k, v in final.items() if k != "w0"}
    model.params = final
    model.diagnostics = diagnostics
    if config.w0_sharing == "shared":
        model.shared_w0 = np.asarray(w0_final[0], dtype=np.float64).copy()
    else:
        model.w0_table = {s.animal_id: np.asarray(w0_final[i]).copy() for i, s in enumerate(train)}
        for i, s in enumerate(val):
            v = best_val_w0 if best_params is not None else val_w0
            model.w0_table[s.animal_id] = np.asarray(np.broadcast_to(v, (len(val), d))[i]).copy()
    log.info("fit %s: %d epochs, best %d", kind, len(losses), diagnostics["best_epoch"])
    return model


def _subset(batch: M.Batch, idx) -> M.Batch:
    return M.Batch(
        [batch.animal_ids[i] for i in idx],
        batch.stimulus[idx],
        batch.choice[idx],
        batch.reward[idx],
        batch.mask[idx],
        batch.X[idx],
        batch.feats[idx],
    )


def predict_weight_trajectory(model: FittedModel, session) -> np.ndarray:
    """Weights w_0..w_T rolled forward on the session's real stimuli, choices, rewards."""
    batch = model.batch([session])
    w0 = model.initial_weights(session)[None]
    return M.forward(model.kind, model.params, batch, w0, record=False).W[0]


def heldout_log_likelihood(model: FittedModel, sessions) -> dict:
    """Choice log-likelihood along predicted trajectories, per animal and in total."""
    sessions = list(sessions)
    per_animal = {}
    n_trials = {}
    if sessions:
        batch = model.batch(sessions)
        w0 = np.stack([model.initial_weights(s) for s in sessions])
        tape = M.forward(model.kind, model.params, batch, w0, record=False)
        terms = M.bce_terms(tape.logits, batch.choice)
        for i, s in enumerate(sessions):
            L = int(batch.mask[i].sum())
            per_animal[s.animal_id] = -math.fsum(terms[i, :L])
            n_trials[s.animal_id] = L
    total = math.fsum(per_animal.values())
    count = sum(n_trials.values())
    return {
        "per_animal": per_animal,
        "n_trials": n_trials,
        "total": total,
        "per_trial": total / count if count else float("nan"),
    }
