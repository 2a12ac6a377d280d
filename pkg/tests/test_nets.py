import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learnrule import nets


def reference_mlp(params, u):
    """Straight-line evaluator written without the layer loop."""
    out = []
    for row in u:
        h1 = [np.tanh(sum(row[i] * params["mlp.W1"][i, j] for i in range(len(row))) + params["mlp.b1"][j])
              for j in range(params["mlp.W1"].shape[1])]
        h2 = [np.tanh(sum(h1[i] * params["mlp.W2"][i, j] for i in range(len(h1))) + params["mlp.b2"][j])
              for j in range(params["mlp.W2"].shape[1])]
        out.append([sum(h2[i] * params["mlp.W3"][i, j] for i in range(len(h2))) + params["mlp.b3"][j]
                    for j in range(params["mlp.W3"].shape[1])])
    return np.array(out)


def test_mlp_zero_params():
    p = {k: np.zeros_like(v) for k, v in nets.mlp_init(np.random.default_rng(0), 5, 2).items()}
    out, _ = nets.mlp_forward(p, np.ones((3, 5)))
    assert np.all(out == 0)


def test_mlp_linear_head(rng):
    p = nets.mlp_init(rng, 5, 2, (8, 8))
    u = rng.normal(size=(4, 5))
    a, _ = nets.mlp_forward(p, u)
    p2 = dict(p, **{"mlp.W3": 2 * p["mlp.W3"]})
    b, _ = nets.mlp_forward(p2, u)
    np.testing.assert_allclose(b - p["mlp.b3"], 2 * (a - p["mlp.b3"]), atol=1e-15)


def test_mlp_matches_reference(rng):
    p = nets.mlp_init(rng, 5, 2, (6, 7), )
    p = {k: v * 50 for k, v in p.items()}
    u = rng.normal(size=(3, 5))
    out, _ = nets.mlp_forward(p, u)
    np.testing.assert_allclose(out, reference_mlp(p, u), atol=1e-12)


def test_mlp_shape_error(rng):
    with pytest.raises(nets.ShapeError):
        nets.mlp_forward(nets.mlp_init(rng, 5, 2), np.ones((1, 4)))


def test_gru_zero_params():
    p = {k: np.zeros_like(v) for k, v in nets.gru_init(np.random.default_rng(0), 3, 4).items()}
    h, _ = nets.gru_step(p, np.zeros((1, 4)), np.ones((1, 3)))
    assert np.all(h == 0)
    v = np.array([[1.0, -2.0, 0.5, 3.0]])
    h, _ = nets.gru_step(p, v, np.ones((1, 3)))
    np.testing.assert_allclose(h, 0.5 * v)


@given(st.integers(0, 10_000), st.floats(0.1, 5))
def test_gru_convex_bound(seed, scale):
    rng = np.random.default_rng(seed)
    p = {k: v * scale for k, v in nets.gru_init(rng, 3, 4).items()}
    h_prev = rng.normal(size=(2, 4)) * 3
    h, (_, _, _, _, _, n) = nets.gru_step(p, h_prev, rng.normal(size=(2, 3)))
    lo = np.minimum(h_prev, n) - 1e-12
    hi = np.maximum(h_prev, n) + 1e-12
    assert np.all((h >= lo) & (h <= hi))
    bound = np.maximum(np.abs(h_prev), 1.0)
    assert np.all(np.abs(h) <= bound + 1e-12)


def _fd_check(f, params, grads, rng, n_coords=30, h=1e-6):
    for k, v in params.items():
        flat = v.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = f()
            flat[idx] = old - h
            dn = f()
            flat[idx] = old
            fd = (up - dn) / (2 * h)
            g = grads[k].reshape(-1)[idx]
            assert abs(fd - g) <= 1e-6 * max(1.0, abs(g)), (k, idx, fd, g)


def test_mlp_backward_fd(rng):
    p = nets.mlp_init(rng, 5, 2, (6, 6), )
    p = {k: v * 3 for k, v in p.items()}
    u = rng.normal(size=(4, 5))
    c = rng.normal(size=(4, 2))

    def f():
        return float(np.sum(nets.mlp_forward(p, u)[0] * c))

    out, acts = nets.mlp_forward(p, u)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    du = nets.mlp_backward(p, acts, c, grads)
    _fd_check(f, p, grads, rng)
    _fd_check(f, {"u": u}, {"u": du}, rng)


def test_gru_backward_fd(rng):
    p = nets.gru_init(rng, 3, 5)
    u = rng.normal(size=(2, 3))
    h0 = rng.normal(size=(2, 5))
    c = rng.normal(size=(2, 5))

    def f():
        return float(np.sum(nets.gru_step(p, h0, u)[0] * c))

    _, cache = nets.gru_step(p, h0, u)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh, du = nets.gru_step_backward(p, cache, c, grads)
    _fd_check(f, p, grads, rng)
    _fd_check(f, {"u": u, "h": h0}, {"u": du, "h": dh}, rng)


def test_adam_zero_grad():
    st_ = nets.AdamState()
    p = {"a": np.array([1.0, 2.0])}
    new = nets.adam_step(st_, p, {"a": np.zeros(2)})
    assert new["a"].tolist() == [1.0, 2.0] and st_.step == 1


def test_adam_first_step():
    st_ = nets.AdamState(lr=1e-3)
    new = nets.adam_step(st_, {"a": np.array(0.0)}, {"a": np.array(1.0)})
    # m_hat = 1, v_hat = 1 at t = 1
    assert float(new["a"]) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert float(new["a"]) == pytest.approx(-9.99999e-4, abs=1e-9)


def test_adam_identical_blocks(rng):
    st_ = nets.AdamState()
    g = rng.normal(size=3)
    p = {"a": np.ones(3), "b": np.ones(3)}
    for _ in range(5):
        p = nets.adam_step(st_, p, {"a": g, "b": g.copy()})
    assert p["a"].tobytes() == p["b"].tobytes()


def test_adam_group_lr():
    st_ = nets.AdamState(lr=1e-3, group_lr={"b": 1e-2})
    new = nets.adam_step(st_, {"a": np.array(0.0), "b": np.array(0.0)}, {"a": np.array(1.0), "b": np.array(1.0)})
    assert float(new["b"]) == pytest.approx(10 * float(new["a"]))


def test_clip():
    g = {"a": np.array([3.0, 4.0])}
    assert nets.global_norm(nets.clip_by_global_norm(g, 1.0)) == pytest.approx(1.0)
    assert nets.clip_by_global_norm(g, 10.0) is g
