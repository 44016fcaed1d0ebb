import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clmdetour import kernels
from clmdetour import numerics as nx


def ln_oracle(x, g, b, eps):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[idx] = [(r - mu) / math.sqrt(var + eps) * gi + bi for r, gi, bi in zip(row, g, b)]
    return out


def gelu_oracle(u):
    c = math.sqrt(2 / math.pi)
    return np.vectorize(lambda v: 0.5 * v * (1 + math.tanh(c * (v + 0.044715 * v ** 3))))(u)


def test_layer_norm_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 7))
    g, b = rng.normal(size=7), rng.normal(size=7)
    y, _ = nx.layer_norm(x, g, b, 1e-5)
    np.testing.assert_allclose(y, ln_oracle(x, g, b, 1e-5), rtol=1e-12, atol=1e-12)


def test_layer_norm_rejects_bad_input():
    with pytest.raises(ValueError):
        nx.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))
    with pytest.raises(ValueError):
        nx.layer_norm(np.ones((2, 3)), np.ones(3), np.zeros(3), eps=0.0)
    with pytest.raises(nx.NonFiniteError):
        nx.layer_norm(np.array([[1.0, np.nan, 2.0]]), np.ones(3), np.zeros(3))


def test_gelu_matches_scalar_oracle():
    u = np.linspace(-6, 6, 97)
    g, _ = nx.gelu(u)
    np.testing.assert_allclose(g, gelu_oracle(u), rtol=1e-13, atol=1e-15)


def test_softmax_rows_sum_to_one_and_causal_zeros():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(2, 3, 6, 6)) * 5
    p = nx.attention_softmax(s.copy(), causal=True)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-12)
    iu = np.triu_indices(6, 1)
    assert np.all(p[..., iu[0], iu[1]] == 0.0)
    # oracle: scalar softmax over the visible prefix
    for i in range(6):
        row = s[0, 0, i, : i + 1]
        e = np.exp(row - row.max())
        np.testing.assert_allclose(p[0, 0, i, : i + 1], e / e.sum(), rtol=1e-12)


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = np.zeros((5, 512))
    loss, _ = nx.cross_entropy(logits, np.arange(5), np.ones(5, bool))
    assert loss == pytest.approx(math.log(512), abs=1e-12)


def test_cross_entropy_matches_scalar_oracle_and_masks_rows():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(6, 9)) * 3
    tgt = rng.integers(0, 9, 6)
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    loss, grad = nx.cross_entropy(logits, tgt, mask)
    ref = np.mean([math.log(sum(math.exp(v) for v in logits[i])) - logits[i, tgt[i]] for i in np.flatnonzero(mask)])
    assert loss == pytest.approx(ref, rel=1e-12)
    assert np.all(grad[~mask] == 0.0)


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="empty"):
        nx.cross_entropy(np.zeros((3, 4)), np.zeros(3, int), np.zeros(3, bool))
    with pytest.raises(ValueError, match="outside"):
        nx.cross_entropy(np.zeros((3, 4)), np.array([0, 4, 1]), np.ones(3, bool))
    # out-of-range targets at unsupervised rows are ignored
    nx.cross_entropy(np.zeros((3, 4)), np.array([0, -1, 1]), np.array([1, 0, 1], bool))


# -- gradient checks over randomized shapes --------------------------------


def _shapes(seed):
    rng = np.random.default_rng(seed)
    return int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 9))


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradients(seed):
    B, L, d = _shapes(seed)
    rng = np.random.default_rng(100 + seed)
    params = {"x": rng.normal(size=(B, L, d)), "g": rng.normal(size=d), "b": rng.normal(size=d)}
    R = rng.normal(size=(B, L, d))

    def fn(p):
        y, c = nx.layer_norm(p["x"], p["g"], p["b"])
        dx, dg, db = nx.layer_norm_backward(R, c)
        return float(np.sum(y * R)), {"x": dx, "g": dg, "b": db}

    assert nx.grad_check(fn, params) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_gelu_gradients(seed):
    B, L, d = _shapes(seed)
    rng = np.random.default_rng(200 + seed)
    params = {"u": rng.normal(size=(B, L, d)) * 2}
    R = rng.normal(size=(B, L, d))

    def fn(p):
        g, c = nx.gelu(p["u"])
        return float(np.sum(g * R)), {"u": nx.gelu_backward(R, c)}

    assert nx.grad_check(fn, params) < 1e-5


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("causal", [True, False])
def test_softmax_gradients(seed, causal):
    B, L, _ = _shapes(seed)
    rng = np.random.default_rng(300 + seed)
    params = {"s": rng.normal(size=(B, 2, L, L))}
    R = rng.normal(size=(B, 2, L, L))

    def fn(p):
        pr = nx.attention_softmax(p["s"].copy(), causal)
        return float(np.sum(pr * R)), {"s": nx.attention_softmax_backward(pr, R, causal)}

    assert nx.grad_check(fn, params) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradients(seed):
    B, L, V = _shapes(seed)
    rng = np.random.default_rng(400 + seed)
    n = B * L
    params = {"z": rng.normal(size=(n, V + 2))}
    tgt = rng.integers(0, V + 2, n)
    mask = rng.random(n) < 0.7
    mask[0] = True

    def fn(p):
        return nx.cross_entropy(p["z"], tgt, mask)[0], {"z": nx.cross_entropy(p["z"], tgt, mask)[1]}

    assert nx.grad_check(fn, params) < 1e-5


def test_grad_check_flags_wrong_gradient():
    params = {"w": np.array([1.0, 2.0, 3.0])}

    def fn(p):
        return float(np.sum(p["w"] ** 2)), {"w": 2.1 * p["w"]}

    assert nx.grad_check(fn, params) > 1e-2


def test_grad_check_argument_errors():
    params = {"w": np.ones(2)}
    with pytest.raises(ValueError):
        nx.grad_check(lambda p: (0.0, {"w": np.zeros(2)}), params, eps=1e-2)
    calls = iter(range(100))
    with pytest.raises(ValueError, match="deterministic"):
        nx.grad_check(lambda p: (float(next(calls)), {"w": np.zeros(2)}), params)


# -- numba and numpy kernels agree -----------------------------------------

arrays = st.tuples(st.integers(1, 5), st.integers(2, 12), st.integers(0, 2**31 - 1))


@given(arrays, st.booleans())
def test_backends_agree(shape, causal):
    n, L, seed = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n * L, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    s = rng.normal(size=(n, L, L)) * 4
    dp = rng.normal(size=(n, L, L))
    out = {}
    for name in ("numpy", "numba"):
        with kernels.backend(name):
            y, c = nx.layer_norm(x, g, b)
            dx = nx.layer_norm_backward(x, c)[0]
            gl, gc = nx.gelu(x)
            dg = nx.gelu_backward(x, gc)
            p = nx.attention_softmax(s.copy(), causal)
            ds = nx.attention_softmax_backward(p, dp, causal)
            out[name] = (y, dx, gl, dg, p, ds)
    for a, b_ in zip(out["numpy"], out["numba"]):
        np.testing.assert_allclose(a, b_, rtol=1e-10, atol=1e-12)


def test_backend_rejects_unknown_name():
    with pytest.raises(ValueError):
        with kernels.backend("cuda"):
            pass
