"""Small differentiable building blocks with hand-written reverse mode.

Parameters live in flat ``dict[str, ndarray]`` mappings so the optimizer,
serialization, and gradient checks can treat every model uniformly. All
forward functions take a batch in the leading dimension and return a cache
that the matching backward function consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN = 32
OUTPUT_INIT_SCALE = 0.01


class ShapeError(ValueError):
    pass


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def uniform_fan_in(rng, fan_in, shape, scale=1.0):
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- feedforward -----------------------------------------------------------


def mlp_init(rng, n_in, n_out, hidden=(HIDDEN, HIDDEN), prefix="mlp."):
    """Uniform +-1/sqrt(fan_in) init; the output head is shrunk so early updates are near 0."""
    sizes = [n_in, *hidden, n_out]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        scale = OUTPUT_INIT_SCALE if i == len(sizes) - 1 else 1.0
        params[f"{prefix}W{i}"] = uniform_fan_in(rng, a, (a, b), scale)
        params[f"{prefix}b{i}"] = uniform_fan_in(rng, a, (b,), scale)
    return params


def mlp_layers(params, prefix="mlp."):
    n = 0
    while f"{prefix}W{n + 1}" in params:
        n += 1
    return n


def mlp_forward(params, u, prefix="mlp."):
    """affine -> tanh -> ... -> affine (linear head)."""
    n = mlp_layers(params, prefix)
    W1 = params[f"{prefix}W1"]
    if u.shape[-1] != W1.shape[0]:
        raise ShapeError(f"mlp expects input width {W1.shape[0]}, got {u.shape[-1]}")
    acts = [u]
    h = u
    for i in range(1, n):
        h = np.tanh(h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"])
        acts.append(h)
    out = h @ params[f"{prefix}W{n}"] + params[f"{prefix}b{n}"]
    return out, acts


def mlp_backward(params, acts, dout, grads, prefix="mlp."):
    """Accumulate parameter gradients into ``grads``; return d(input)."""
    n = len(acts)
    g = dout
    for i in range(n, 0, -1):
        a = acts[i - 1]
        grads[f"{prefix}W{i}"] += a.T @ g
        grads[f"{prefix}b{i}"] += g.sum(axis=0)
        g = g @ params[f"{prefix}W{i}"].T
        if i > 1:
            g = g * (1.0 - a * a)
    return g


# -- gated recurrent cell ----------------------------------------------------
#
# z = sigmoid(u Wz + h Uz + bz)            update gate
# r = sigmoid(u Wr + h Ur + br)            reset gate
# n = tanh(u Wn + (r * h) Un + bn)         candidate
# h' = (1 - z) * h + z * n


def gru_init(rng, n_in, hidden=HIDDEN, prefix="gru."):
    params = {}
    fan = n_in + hidden
    for g in "zrn":
        params[f"{prefix}W{g}"] = uniform_fan_in(rng, fan, (n_in, hidden))
        params[f"{prefix}U{g}"] = uniform_fan_in(rng, fan, (hidden, hidden))
        params[f"{prefix}b{g}"] = uniform_fan_in(rng, fan, (hidden,))
    return params


def gru_step(params, h_prev, u, prefix="gru."):
    Wz = params[f"{prefix}Wz"]
    if u.shape[-1] != Wz.shape[0] or h_prev.shape[-1] != Wz.shape[1]:
        raise ShapeError("gru input or state width mismatch")
    z = _sigmoid(u @ Wz + h_prev @ params[f"{prefix}Uz"] + params[f"{prefix}bz"])
    r = _sigmoid(u @ params[f"{prefix}Wr"] + h_prev @ params[f"{prefix}Ur"] + params[f"{prefix}br"])
    rh = r * h_prev
    n = np.tanh(u @ params[f"{prefix}Wn"] + rh @ params[f"{prefix}Un"] + params[f"{prefix}bn"])
    h = h_prev + z * (n - h_prev)
    return h, (u, h_prev, z, r, rh, n)


def gru_step_backward(params, cache, dh, grads, prefix="gru."):
    """Return (d h_prev, d u); parameter gradients are accumulated."""
    u, h_prev, z, r, rh, n = cache
    dz = dh * (n - h_prev)
    dn = dh * z
    dh_prev = dh * (1.0 - z)

    dan = dn * (1.0 - n * n)
    grads[f"{prefix}Wn"] += u.T @ dan
    grads[f"{prefix}Un"] += rh.T @ dan
    grads[f"{prefix}bn"] += dan.sum(axis=0)
    drh = dan @ params[f"{prefix}Un"].T
    dh_prev += drh * r
    dr = drh * h_prev
    du = dan @ params[f"{prefix}Wn"].T

    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    for g, da in (("z", daz), ("r", dar)):
        grads[f"{prefix}W{g}"] += u.T @ da
        grads[f"{prefix}U{g}"] += h_prev.T @ da
        grads[f"{prefix}b{g}"] += da.sum(axis=0)
        dh_prev += da @ params[f"{prefix}U{g}"].T
        du += da @ params[f"{prefix}W{g}"].T
    return dh_prev, du


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    # per-parameter learning-rate overrides, keyed like the parameter dict
    group_lr: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = state.group_lr.get(k, state.lr)
        new[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
