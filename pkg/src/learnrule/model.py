"""Update-function models and the unrolled weight recurrence.

A model maps per-trial inputs to a weight change dw_t; the GLM weights then
follow w_{t+1} = w_t + dw_t from a starting point w0. ``forward`` unrolls a
batch of sessions trial by trial (animals in the leading dimension) and
records a :class:`Tape`; ``backward`` returns exact gradients of the summed
binary cross-entropy with respect to every model parameter and to w0,
including all paths through later weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from learnrule.glm import LOGIT_CLAMP
from learnrule import nets

DNNGLM = "DNNGLM"
RNNGLM = "RNNGLM"
DNNGLM_HISTORY = "DNNGLM_HISTORY"
REINFORCE_PARAM = "REINFORCE_PARAM"
REINFORCE_PARAM_NONNEG = "REINFORCE_PARAM_NONNEG"
REINFORCE_HISTORY = "REINFORCE_HISTORY"

MODEL_KINDS = (
    DNNGLM,
    RNNGLM,
    DNNGLM_HISTORY,
    REINFORCE_PARAM,
    REINFORCE_PARAM_NONNEG,
    REINFORCE_HISTORY,
)
NETWORK_KINDS = (DNNGLM, RNNGLM, DNNGLM_HISTORY)
HISTORY_KINDS = (DNNGLM_HISTORY, REINFORCE_HISTORY)
PARAMETRIC_KINDS = (REINFORCE_PARAM, REINFORCE_PARAM_NONNEG, REINFORCE_HISTORY)

BASE_FEATURES = 3  # stimulus, choice, reward
HISTORY_FEATURES = 3  # previous stimulus, choice, reward


class UnsupportedModelError(ValueError):
    pass


def check_kind(kind: str) -> str:
    if kind not in MODEL_KINDS:
        raise UnsupportedModelError(f"unknown model kind {kind!r}")
    return kind


def glm_dim(kind: str) -> int:
    """GLM covariate width: [s, 1] or, for history kinds, [s, 1, previous choice]."""
    return 3 if kind in HISTORY_KINDS else 2


def n_features(kind: str) -> int:
    if kind == DNNGLM_HISTORY:
        return BASE_FEATURES + HISTORY_FEATURES
    return BASE_FEATURES


def init_params(kind: str, rng: np.random.Generator, hidden: int = nets.HIDDEN) -> dict:
    check_kind(kind)
    d = glm_dim(kind)
    if kind in PARAMETRIC_KINDS:
        return {"alpha": np.array(0.01), "baseline": np.array(0.0)}
    n_in = n_features(kind) + d
    if kind == RNNGLM:
        params = nets.gru_init(rng, n_in, hidden)
        params.update(nets.mlp_init(rng, hidden, d, (hidden, hidden)))
        return params
    return nets.mlp_init(rng, n_in, d, (hidden, hidden))


# -- data batches --------------------------------------------------------------


@dataclass
class Batch:
    """Padded, column-stacked sessions; shapes (n, T[, k])."""

    animal_ids: list
    stimulus: np.ndarray
    choice: np.ndarray
    reward: np.ndarray
    mask: np.ndarray
    X: np.ndarray
    feats: np.ndarray

    @property
    def n(self) -> int:
        return self.stimulus.shape[0]

    @property
    def T(self) -> int:
        return self.stimulus.shape[1]

    @property
    def n_trials(self) -> int:
        return int(self.mask.sum())


def previous_trial(arr: np.ndarray) -> np.ndarray:
    prev = np.zeros_like(arr)
    prev[:, 1:] = arr[:, :-1]
    return prev


def history_raw(stimulus, choice, reward) -> np.ndarray:
    return np.stack(
        [previous_trial(stimulus), previous_trial(choice), previous_trial(reward)], axis=-1
    )


def make_batch(
    kind: str,
    sessions: Sequence,
    norm: Optional[dict] = None,
    T: Optional[int] = None,
) -> Batch:
    """Stack sessions (anything with stimulus/choice/reward arrays) into a padded batch."""
    n = len(sessions)
    T = T or max(len(s.stimulus) for s in sessions)
    S = np.zeros((n, T))
    Y = np.zeros((n, T))
    R = np.zeros((n, T))
    M = np.zeros((n, T))
    for i, sess in enumerate(sessions):
        L = min(len(sess.stimulus), T)
        S[i, :L] = sess.stimulus[:L]
        Y[i, :L] = sess.choice[:L]
        R[i, :L] = sess.reward[:L]
        M[i, :L] = 1.0
    ids = [getattr(s, "animal_id", str(i)) for i, s in enumerate(sessions)]
    return batch_from_arrays(kind, S, Y, R, M, norm=norm, animal_ids=ids)


def batch_from_arrays(kind, S, Y, R, M=None, norm=None, animal_ids=None) -> Batch:
    S = np.asarray(S, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    M = np.ones_like(S) if M is None else np.asarray(M, dtype=np.float64)
    if kind in HISTORY_KINDS:
        X = np.stack([S, np.ones_like(S), previous_trial(2.0 * Y - 1.0) * (previous_trial(M))], axis=-1)
    else:
        X = np.stack([S, np.ones_like(S)], axis=-1)
    feats = np.stack([S, Y, R], axis=-1)
    if kind == DNNGLM_HISTORY:
        norm = norm or history_norm([(S, Y, R, M)])
        hist = (history_raw(S, Y, R) - norm["mean"]) / norm["std"]
        feats = np.concatenate([feats, hist], axis=-1)
    ids = animal_ids if animal_ids is not None else [str(i) for i in range(S.shape[0])]
    return Batch(list(ids), S, Y, R, M, X, feats)


def history_norm(blocks) -> dict:
    """Per-feature mean/std of previous-trial inputs over valid trials."""
    vals = []
    for S, Y, R, M in blocks:
        h = history_raw(np.asarray(S, float), np.asarray(Y, float), np.asarray(R, float))
        vals.append(h[np.asarray(M) > 0])
    v = np.concatenate(vals, axis=0)
    std = v.std(axis=0)
    std[std == 0] = 1.0
    return {"mean": v.mean(axis=0), "std": std}


# -- per-trial update functions ----------------------------------------------------


def _param_update(params, kind, w, x, y, r):
    """dw = alpha (r - b) eps_y (1 - p_y) x, plus the pieces its gradient needs."""
    a_raw = np.sum(w * x, axis=-1)
    a = np.clip(a_raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    eps = 2.0 * y - 1.0
    q = nets._sigmoid(-eps * a)  # 1 - p_y
    alpha = params["alpha"]
    b = params["baseline"]
    g = (eps * q)[:, None] * x
    dw = (alpha * (r - b))[:, None] * g
    return dw, (x, y, r, eps, q, g, np.abs(a_raw) < LOGIT_CLAMP)


def _param_update_backward(params, cache, d_dw, grads):
    x, y, r, eps, q, g, live = cache
    alpha = params["alpha"]
    b = params["baseline"]
    gdot = np.sum(d_dw * g, axis=-1)
    grads["alpha"] += np.sum(gdot * (r - b))
    grads["baseline"] += -alpha * np.sum(gdot)
    # d g / d w = -p_y (1 - p_y) x x^T
    coef = -alpha * (r - b) * (1.0 - q) * q * live
    return (coef * np.sum(d_dw * x, axis=-1))[:, None] * x


class Stepper:
    """Advances one trial of the update function for a batch.

    ``step`` returns (dw, cache); ``back`` maps d(dw) to d(w) while
    accumulating parameter gradients and carrying any recurrent state.
    """

    def __init__(self, kind: str, params: dict, n: int):
        self.kind = kind
        self.params = params
        self.d = glm_dim(kind)
        if kind == RNNGLM:
            hidden = params["gru.Uz"].shape[0]
            self.h = np.zeros((n, hidden))
            self.dh_next = np.zeros((n, hidden))

    def step(self, w, x, feats):
        kind = self.kind
        if kind in PARAMETRIC_KINDS:
            return _param_update(self.params, kind, w, x, feats[:, 1], feats[:, 2])
        u = np.concatenate([feats, w], axis=-1)
        if kind == RNNGLM:
            h, gcache = nets.gru_step(self.params, self.h, u)
            self.h = h
            dw, acts = nets.mlp_forward(self.params, h)
            return dw, (gcache, acts)
        dw, acts = nets.mlp_forward(self.params, u)
        return dw, acts

    def back(self, cache, d_dw, grads):
        kind = self.kind
        if kind in PARAMETRIC_KINDS:
            return _param_update_backward(self.params, cache, d_dw, grads)
        if kind == RNNGLM:
            gcache, acts = cache
            dh = nets.mlp_backward(self.params, acts, d_dw, grads) + self.dh_next
            dh_prev, du = nets.gru_step_backward(self.params, gcache, dh, grads)
            self.dh_next = dh_prev
            return du[:, -self.d :]
        du = nets.mlp_backward(self.params, cache, d_dw, grads)
        return du[:, -self.d :]


# -- whole-session unroll ----------------------------------------------------------


@dataclass
class Tape:
    kind: str
    params: dict
    batch: Batch
    W: np.ndarray  # (n, T + 1, d)
    DW: np.ndarray  # (n, T, d)
    logits: np.ndarray  # clamped, (n, T)
    caches: list
    loss: float
    complete: bool = True

    def replay_loss(self) -> float:
        return float(np.sum(bce_terms(self.logits, self.batch.choice) * self.batch.mask))


def bce_terms(logits, y):
    return y * np.logaddexp(0.0, -logits) + (1.0 - y) * np.logaddexp(0.0, logits)


def forward(kind: str, params: dict, batch: Batch, w0: np.ndarray, record: bool = True) -> Tape:
    """Unroll the recurrence; loss is the summed BCE over unmasked trials."""
    n, T, d = batch.n, batch.T, glm_dim(kind)
    w0 = np.broadcast_to(np.asarray(w0, dtype=np.float64), (n, d))
    stepper = Stepper(kind, params, n)
    W = np.empty((n, T + 1, d))
    DW = np.empty((n, T, d))
    W[:, 0] = w0
    w = W[:, 0].copy()
    caches = []
    for t in range(T):
        x = batch.X[:, t]
        dw, cache = stepper.step(w, x, batch.feats[:, t])
        if record:
            caches.append(cache)
        DW[:, t] = dw
        w = w + dw
        W[:, t + 1] = w
    logits = np.clip(np.sum(W[:, :-1] * batch.X, axis=-1), -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = float(np.sum(bce_terms(logits, batch.choice) * batch.mask))
    return Tape(kind, params, batch, W, DW, logits, caches, loss, complete=record)


class IncompleteTapeError(RuntimeError):
    pass


def backward(tape: Tape) -> dict:
    """Exact gradient of ``tape.loss`` w.r.t. every parameter and ``w0`` (shape (n, d))."""
    if not tape.complete or len(tape.caches) != tape.batch.T:
        raise IncompleteTapeError("tape was recorded without caches or is truncated")
    batch = tape.batch
    n, T = batch.n, batch.T
    grads = {k: np.zeros_like(v, dtype=np.float64) for k, v in tape.params.items()}
    stepper = Stepper(tape.kind, tape.params, n)
    raw = np.sum(tape.W[:, :-1] * batch.X, axis=-1)
    live = (np.abs(raw) < LOGIT_CLAMP).astype(np.float64)
    p = nets._sigmoid(tape.logits)
    dlogit = (p - batch.choice) * batch.mask * live
    gw = np.zeros((n, glm_dim(tape.kind)))
    for t in range(T - 1, -1, -1):
        # w_{t+1} = w_t + dw_t, so d(dw_t) = d(w_{t+1})
        gw = gw + stepper.back(tape.caches[t], gw, grads)
        gw = gw + dlogit[:, t, None] * batch.X[:, t]
    grads["w0"] = gw
    return grads


def loss_and_grad(kind, params, batch, w0):
    tape = forward(kind, params, batch, w0)
    return tape.loss, backward(tape)


def teacher_forced_updates(kind: str, params: dict, W: np.ndarray, batch: Batch) -> np.ndarray:
    """dw_t evaluated at supplied weights W[:, t] instead of the model's own trajectory.

    Recurrent state still integrates the supplied sequence in order.
    """
    n, T = batch.n, batch.T
    stepper = Stepper(kind, params, n)
    out = np.empty((n, T, glm_dim(kind)))
    for t in range(T):
        out[:, t], _ = stepper.step(W[:, t], batch.X[:, t], batch.feats[:, t])
    return out
