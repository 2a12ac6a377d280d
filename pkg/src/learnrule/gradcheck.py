"""Central finite-difference checks of the unrolled-recurrence gradients."""

from __future__ import annotations

import numpy as np

from learnrule import model as M


def relative_error(a, b, floor=1e-5):
    """|a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from dominating."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_instance(kind, rng, n=2, T=20, head_scale=30.0, hidden=8):
    """Random parameters, session and w0 for a gradient check.

    The output head is scaled up from its small default so that updates
    (and therefore the recurrent path) carry real weight in the loss.
    """
    params = M.init_params(kind, rng, hidden)
    for k in params:
        if k.startswith("mlp.") and k.endswith(("3",)):
            params[k] = params[k] * head_scale
    if kind in M.PARAMETRIC_KINDS:
        params = {"alpha": np.array(rng.uniform(0.05, 0.5)), "baseline": np.array(rng.uniform(-0.5, 0.5))}
    S = rng.choice(np.arange(-2, 2.01, 0.25), size=(n, T))
    Y = rng.integers(2, size=(n, T)).astype(float)
    R = rng.integers(2, size=(n, T)).astype(float)
    norm = None
    if kind == M.DNNGLM_HISTORY:
        norm = M.history_norm([(S, Y, R, np.ones((n, T)))])
    batch = M.batch_from_arrays(kind, S, Y, R, norm=norm)
    w0 = rng.normal(scale=1.0, size=(n, M.glm_dim(kind)))
    return params, batch, w0


def check_gradients(kind, params, batch, w0, rng, h=1e-5, n_coords=4, floor=1e-5):
    """Max relative error between backprop and central differences.

    Every w0 entry is checked plus ``n_coords`` random coordinates of each
    parameter block (all of them when the block is smaller).
    """
    loss, grads = M.loss_and_grad(kind, params, batch, w0)
    worst = 0.0
    targets = dict(params, w0=np.array(w0, dtype=np.float64))
    for name, arr in targets.items():
        flat = arr.reshape(-1)
        k = flat.size if name == "w0" else min(n_coords, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = M.forward(kind, params, batch, targets["w0"], record=False).loss
            flat[i] = old - h
            dn = M.forward(kind, params, batch, targets["w0"], record=False).loss
            flat[i] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, float(relative_error(g[i], fd, floor)))
    return worst
