"""Per-primitive gradient checks and tape semantics.

Each op is checked against central finite differences computed by a
local helper (no shared code with the library's gradcheck harness), in
float64 at step 1e-6 unless the op needs a gentler point.
"""

import numpy as np
import pytest

from taskadapt import autodiff as ad
from taskadapt.autodiff import Tensor


def numeric_grad(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued fn at x, entry by entry."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * step)
    return g


def check_unary(op, x, step=1e-6, tol=1e-6):
    t = Tensor(x.copy(), requires_grad=True)
    y = ad.reduce_sum(ad.mul(op(t), ad.as_tensor(np.cos(np.arange(op(t).data.size))
                                                 .reshape(op(t).shape))))
    y.backward()
    ref = numeric_grad(
        lambda a: float((op(Tensor(a)).data
                         * np.cos(np.arange(op(Tensor(a)).data.size)).reshape(op(Tensor(a)).shape)).sum()),
        x.copy(), step)
    np.testing.assert_allclose(t.grad, ref, rtol=tol, atol=tol)


@pytest.mark.parametrize("opname", ["exp", "log", "sqrt", "tanh", "gelu",
                                    "square", "neg", "absolute"])
def test_unary_gradients(opname, rng):
    x = rng.uniform(0.3, 2.0, size=(3, 4))  # positive domain suits log/sqrt
    if opname in ("tanh", "gelu", "square", "neg"):
        x = rng.standard_normal((3, 4))
    check_unary(getattr(ad, opname), x)


@pytest.mark.parametrize("opname", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(opname, rng):
    op = getattr(ad, opname)
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    ad.reduce_sum(ad.mul(op(a, b), ad.as_tensor(w))).backward()
    ga = numeric_grad(lambda x: float((op(Tensor(x), Tensor(b.data)).data * w).sum()),
                      a.data.copy())
    gb = numeric_grad(lambda x: float((op(Tensor(a.data), Tensor(x)).data * w).sum()),
                      b.data.copy())
    np.testing.assert_allclose(a.grad, ga, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.grad, gb, rtol=1e-6, atol=1e-8)


def test_matmul_batched_gradient(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w = rng.standard_normal((2, 3, 5))
    ad.reduce_sum(ad.mul(ad.matmul(a, b), ad.as_tensor(w))).backward()
    ga = numeric_grad(lambda x: float(((Tensor(x).data @ b.data) * w).sum()), a.data.copy())
    gb = numeric_grad(lambda x: float(((a.data @ x) * w).sum()), b.data.copy())
    np.testing.assert_allclose(a.grad, ga, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(b.grad, gb, rtol=1e-5, atol=1e-8)


def test_affine_equals_matmul_plus_bias(rng):
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    seed = rng.standard_normal((2, 5, 6))

    fused = ad.affine(x, w, b)
    np.testing.assert_array_equal(fused.data, x.data @ w.data + b.data)
    ad.reduce_sum(ad.mul(fused, ad.as_tensor(seed))).backward()
    gx, gw, gb = x.grad, w.grad, b.grad

    x2 = Tensor(x.data.copy(), requires_grad=True)
    w2 = Tensor(w.data.copy(), requires_grad=True)
    b2 = Tensor(b.data.copy(), requires_grad=True)
    ad.reduce_sum(ad.mul(ad.add(ad.matmul(x2, w2), b2), ad.as_tensor(seed))).backward()
    np.testing.assert_allclose(gx, x2.grad, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gw, w2.grad, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb, b2.grad, rtol=1e-12, atol=1e-12)


def test_softmax_rows_and_gradient(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    y = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
    w = rng.standard_normal((3, 5))
    ad.reduce_sum(ad.mul(y, ad.as_tensor(w))).backward()

    def f(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

    np.testing.assert_allclose(x.grad, numeric_grad(f, x.data.copy()), rtol=1e-5, atol=1e-9)


def test_logsumexp_matches_scipy_and_gradient(rng):
    from scipy.special import logsumexp as sp_lse
    x = Tensor(rng.standard_normal((4, 6)) * 3, requires_grad=True)
    y = ad.logsumexp(x, axis=-1)
    np.testing.assert_allclose(y.data, sp_lse(x.data, axis=-1), rtol=1e-12)
    ad.reduce_sum(y).backward()
    np.testing.assert_allclose(
        x.grad, numeric_grad(lambda a: float(sp_lse(a, axis=-1).sum()), x.data.copy()),
        rtol=1e-5, atol=1e-9)


def test_standardize_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    ad.reduce_sum(ad.mul(ad.standardize(x), ad.as_tensor(w))).backward()

    def f(a):
        mu = a.mean(axis=-1, keepdims=True)
        sd = np.maximum(a.std(axis=-1, keepdims=True), 1e-6)
        return float(((a - mu) / sd * w).sum())

    np.testing.assert_allclose(x.grad, numeric_grad(f, x.data.copy()), rtol=1e-5, atol=1e-8)


def test_reduce_ops_and_keepdims(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    ad.reduce_sum(ad.mul(ad.reduce_mean(x, axis=1, keepdims=True), 3.0)).backward()
    np.testing.assert_allclose(x.grad, np.full(x.shape, 3.0 / 3), rtol=1e-12)


def test_shape_ops_round_trip_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
    z = ad.roll(y, 2, axis=1)
    w = rng.standard_normal(z.shape)
    ad.reduce_sum(ad.mul(z, ad.as_tensor(w))).backward()
    expect = np.roll(w, -2, axis=1).T.reshape(2, 3, 4)
    np.testing.assert_array_equal(x.grad, expect)


def test_concat_splits_gradient(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = rng.standard_normal((2, 8))
    ad.reduce_sum(ad.mul(ad.concat([a, b], axis=1), ad.as_tensor(w))).backward()
    np.testing.assert_array_equal(a.grad, w[:, :3])
    np.testing.assert_array_equal(b.grad, w[:, 3:])


def test_take_classes_gradient(rng):
    logits = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=(2, 3))
    ad.reduce_sum(ad.take_classes(logits, labels)).backward()
    expect = np.zeros((2, 3, 5))
    for i in range(2):
        for j in range(3):
            expect[i, j, labels[i, j]] = 1.0
    np.testing.assert_array_equal(logits.grad, expect)


def test_take_rows_gradient(rng):
    table = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    index = np.array([2, 2, 5, 0])
    ad.reduce_sum(ad.take_rows(table, index)).backward()
    expect = np.zeros((7, 3))
    for i in index:
        expect[i] += 1.0
    np.testing.assert_array_equal(table.grad, expect)


def test_clip_min_gradient_mask():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    ad.reduce_sum(ad.clip_min(x, 0.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_diamond_reuse_accumulates(rng):
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ad.mul(x, x)          # x reused: dy/dx = 2x
    z = ad.add(y, ad.mul(x, 2.0))
    z.backward()
    assert x.grad == pytest.approx(2 * 3.0 + 2.0)


def test_stop_grad_blocks_flow():
    x = Tensor(np.array(2.0), requires_grad=True)
    ad.mul(ad.stop_grad(x), x).backward()
    assert x.grad == pytest.approx(2.0)  # only the live branch contributes


def test_no_grad_suppresses_tape():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad and y._parents == ()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


def test_float64_graph_keeps_float64_gradients():
    x = Tensor(np.ones((2, 2), dtype=np.float64), requires_grad=True)
    ad.reduce_sum(ad.gelu(x)).backward()
    assert x.grad.dtype == np.float64
