import zlib

import numpy as np
import pytest

from fewshot_gmm import diffable as D
from fewshot_gmm.diffable import Array, finite_diff_check, gradients
from fewshot_gmm.errors import NumericError


def P(data):
    return Array(np.array(data, dtype=np.float64), requires_grad=True)


def _mask(shape, rng):
    m = np.zeros(shape)
    m[..., rng.random(shape[-1]) < 0.3] = -np.inf
    m[..., 0] = 0.0
    return m


# Each case builds fresh parameters from an rng and returns (params, f).
def _case(name, rng):
    if name == "add":
        a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(4,)))
        return [a, b], lambda: D.reduce_sum(D.mul(D.add(a, b), D.add(a, b)))
    if name == "sub":
        a, b = P(rng.normal(size=(2, 3, 1))), P(rng.normal(size=(3, 5)))
        return [a, b], lambda: D.reduce_sum(D.exp(D.sub(a, b)))
    if name == "mul":
        a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(1, 4)))
        return [a, b], lambda: D.reduce_sum(D.mul(D.mul(a, b), a))
    if name == "scalar":
        a = P(rng.normal(size=(5,)))
        return [a], lambda: D.reduce_sum(D.mul(D.add(D.scale(a, 2.5), 1.0), a))
    if name == "exp":
        a = P(rng.normal(size=(4, 3)))
        return [a], lambda: D.reduce_sum(D.exp(a))
    if name == "log":
        a = P(rng.uniform(0.5, 2.0, size=(4, 3)))
        return [a], lambda: D.reduce_sum(D.mul(D.log(a), a))
    if name == "sqrt":
        a = P(rng.uniform(0.5, 2.0, size=(6,)))
        return [a], lambda: D.reduce_sum(D.mul(D.sqrt(a), a))
    if name == "matmul":
        a, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(4, 5)))
        return [a, b], lambda: D.reduce_sum(D.exp(D.scale(D.matmul(a, b), 0.3)))
    if name == "matmul_batched":
        a, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(2, 4, 3)))
        return [a, b], lambda: D.reduce_sum(D.gelu(D.matmul(a, b)))
    if name == "softmax_masked":
        a = P(rng.normal(size=(2, 3, 6)))
        m = _mask((2, 1, 6), rng)
        w = rng.normal(size=(2, 3, 6))
        return [a], lambda: D.reduce_sum(D.mul(D.softmax_masked(a, m), w))
    if name == "rms_norm":
        a, g = P(rng.normal(size=(3, 5))), P(rng.normal(size=(5,)))
        w = rng.normal(size=(3, 5))
        return [a, g], lambda: D.reduce_sum(D.mul(D.rms_norm(a, g), w))
    if name == "gelu":
        a = P(rng.normal(size=(4, 4)) * 2)
        return [a], lambda: D.reduce_sum(D.gelu(a))
    if name == "embedding":
        t = P(rng.normal(size=(7, 3)))
        ids = rng.integers(0, 7, size=(2, 5))
        w = rng.normal(size=(2, 5, 3))
        return [t], lambda: D.reduce_sum(D.mul(D.exp(D.embedding(t, ids)), w))
    if name == "concat":
        a, b = P(rng.normal(size=(2, 3))), P(rng.normal(size=(2, 2)))
        w = rng.normal(size=(2, 5))
        return [a, b], lambda: D.reduce_sum(D.exp(D.mul(D.concat([a, b], axis=1), w)))
    if name == "slice":
        a = P(rng.normal(size=(3, 6)))
        return [a], lambda: D.reduce_sum(D.exp(D.slice_axis(a, 1, 1, 4)))
    if name == "reduce_sum":
        a = P(rng.normal(size=(3, 4, 2)))
        return [a], lambda: D.reduce_sum(D.exp(D.reduce_sum(a, axis=1)))
    if name == "reduce_mean":
        a = P(rng.normal(size=(3, 4)))
        return [a], lambda: D.reduce_sum(D.exp(D.reduce_mean(a, axis=0, keepdims=True)))
    if name == "broadcast":
        a = P(rng.normal(size=(1, 4)))
        w = rng.normal(size=(3, 4))
        return [a], lambda: D.reduce_sum(D.exp(D.mul(D.broadcast_to(a, (3, 4)), w)))
    if name == "reshape_transpose":
        a = P(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(4, 2, 3))
        return [a], lambda: D.reduce_sum(D.exp(D.mul(D.transpose(a, (2, 0, 1)), w)))
    if name == "clip_min":
        a = P(rng.choice([-1, 1], size=(8,)) * rng.uniform(0.2, 1.0, size=8))
        return [a], lambda: D.reduce_sum(D.mul(D.clip_min(a, 0.1), a))
    if name == "gmm_nll":
        X = rng.normal(size=(2, 9, 3))
        mu, sg = P(rng.normal(size=(2, 2, 3))), P(rng.uniform(0.5, 1.5, size=(2, 2, 3)))
        lw = np.log([1 / 3, 2 / 3])
        return [mu, sg], lambda: D.reduce_sum(D.gmm_nll(X, mu, sg, lw))
    raise KeyError(name)


KERNELS = ["add", "sub", "mul", "scalar", "exp", "log", "sqrt", "matmul", "matmul_batched",
           "softmax_masked", "rms_norm", "gelu", "embedding", "concat", "slice", "reduce_sum",
           "reduce_mean", "broadcast", "reshape_transpose", "clip_min", "gmm_nll"]


@pytest.mark.parametrize("name", KERNELS)
def test_kernel_gradients_ten_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        params, f = _case(name, rng)
        assert finite_diff_check(f, params) < 1e-6


def test_rms_norm_constant_vector():
    for c in (2.5, -0.7):
        y = D.rms_norm(Array(np.full(6, c)), Array(np.ones(6)))
        np.testing.assert_allclose(y.data, np.sign(c), rtol=1e-7)


def test_softmax_mask_semantics():
    x = np.array([[1.0, 2.0, 3.0, 0.5]])
    m = np.array([[0.0, -np.inf, 0.0, 0.0]])
    y = D.softmax_masked(Array(x), m).data
    assert y[0, 1] == 0.0
    keep = np.exp(x[0, [0, 2, 3]])
    np.testing.assert_allclose(y[0, [0, 2, 3]], keep / keep.sum())


def test_softmax_masked_positions_get_zero_gradient():
    a = P(np.random.default_rng(0).normal(size=(3, 5)))
    m = np.array([0.0, -np.inf, 0.0, -np.inf, 0.0])
    w = np.random.default_rng(1).normal(size=(3, 5))
    (g,) = gradients(D.reduce_sum(D.mul(D.softmax_masked(a, m), w)), [a])
    assert np.all(g[:, [1, 3]] == 0.0)


def test_softmax_mask_shape_mismatch():
    with pytest.raises(ValueError):
        D.softmax_masked(Array(np.zeros((2, 4))), np.zeros(3))


def test_matmul_identity_and_mismatch():
    x = Array(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(D.matmul(x, Array(np.eye(4))).data, x.data)
    with pytest.raises(ValueError):
        D.matmul(x, Array(np.eye(3)))


def test_simple_gradients():
    x = P([1.0, -2.0, 3.5])
    (g,) = gradients(D.reduce_sum(x), [x])
    assert g.tolist() == [1.0, 1.0, 1.0]
    (g,) = gradients(D.scale(D.reduce_sum(D.mul(x, x)), 0.5), [x])
    np.testing.assert_allclose(g, x.data)


def test_non_scalar_loss_rejected():
    x = P([1.0, 2.0])
    with pytest.raises(ValueError):
        gradients(D.mul(x, x))


def test_finite_diff_examples():
    x = P([3.0])
    f = lambda: D.reduce_sum(D.mul(x, x))
    (g,) = gradients(f(), [x])
    assert g[0] == pytest.approx(6.0, abs=1e-9)
    assert finite_diff_check(f, [x]) < 1e-9
    c = P([1.0, 2.0])
    assert finite_diff_check(lambda: D.reduce_sum(Array(np.ones(2))) + D.scale(D.reduce_sum(c), 0.0), [c]) == 0.0


def test_finite_diff_gmm_nll_means():
    from fewshot_gmm.gmm import SphericalGmm, nll
    rng = np.random.default_rng(5)
    X = rng.normal(size=(1, 12, 2))
    mu = P(rng.normal(size=(1, 3, 2)))
    sg = Array(np.full((1, 3, 2), 0.8))
    lw = np.log(np.arange(1, 4) / 6)
    f = lambda: D.reduce_sum(D.gmm_nll(X, mu, sg, lw))
    assert finite_diff_check(f, [mu]) < 1e-6
    assert f().item() == pytest.approx(nll(SphericalGmm(mu.data[0], sg.data[0]), X[0]), rel=1e-12)


def test_random_five_node_graph():
    rng = np.random.default_rng(11)
    a, b = P(rng.normal(size=(3, 3))), P(rng.normal(size=(3,)))
    f = lambda: D.reduce_sum(D.exp(D.scale(D.matmul(D.gelu(a), D.reshape(D.add(b, 1.0), (3, 1))), 0.2)))
    assert finite_diff_check(f, [a, b]) < 1e-6


def test_gmm_nll_matches_primitive_composition():
    """The fused kernel agrees with a log-sum-exp built from elementary ops."""
    rng = np.random.default_rng(2)
    B, N, J, T = 2, 6, 3, 4
    X = rng.normal(size=(B, N, T))
    mu, sg = P(rng.normal(size=(B, J, T))), P(rng.uniform(0.4, 1.4, size=(B, J, T)))
    lw = np.log(np.arange(1, J + 1) / (J * (J + 1) / 2))

    def composed():
        x = Array(X[:, :, None, :])
        z = D.mul(D.sub(x, D.reshape(mu, (B, 1, J, T))), D.reshape(D.exp(D.scale(D.log(sg), -1.0)), (B, 1, J, T)))
        quad = D.scale(D.reduce_sum(D.mul(z, z), axis=3), -0.5)
        logdet = D.reshape(D.reduce_sum(D.log(sg), axis=2), (B, 1, J))
        lp = D.add(D.sub(quad, logdet), lw - 0.5 * T * np.log(2 * np.pi))
        top = lp.data.max(axis=2, keepdims=True)
        lse = D.add(D.log(D.reduce_sum(D.exp(D.sub(lp, top)), axis=2)), top[..., 0])
        return D.scale(D.reduce_sum(lse, axis=1), -1.0)

    fused = D.gmm_nll(X, mu, sg, lw)
    np.testing.assert_allclose(fused.data, composed().data, rtol=1e-12)
    g1 = gradients(D.reduce_sum(fused), [mu, sg])
    g2 = gradients(D.reduce_sum(composed()), [mu, sg])
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_nan_guard():
    with pytest.raises(NumericError):
        D.log(Array(np.array([-1.0])))


def test_no_grad_builds_no_graph():
    x = P([1.0])
    with D.no_grad():
        y = D.mul(x, x)
    assert y.parents == () and not y.requires_grad


def test_forward_determinism():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 5))
    y1 = D.softmax_masked(D.matmul(Array(a), Array(w)), None).data
    y2 = D.softmax_masked(D.matmul(Array(a), Array(w)), None).data
    assert y1.tobytes() == y2.tobytes()


def test_float32_storage_kept():
    a = Array(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = D.gelu(D.matmul(a, a))
    assert y.dtype == np.float32
    (g,) = gradients(D.reduce_sum(y), [a])
    assert g.dtype == np.float32
