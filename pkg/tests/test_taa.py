"""Task-adapted attention: FiLM logit shifts and head decomposition."""

import numpy as np
import pytest

from taskadapt import autodiff as ad
from taskadapt.errors import DimensionMismatch
from taskadapt.layers import ParamStore
from taskadapt.taa import (FilmGenerator, LogitModulator, MultiHeadTAA,
                           film_modulate, self_attention,
                           task_adapted_attention)
from taskadapt.verify import attention_oracle, film_oracle

F64 = np.float64


def randomize_film(store, rng, scale=0.5):
    """Wake the generators up: fresh ones emit g=1, b=0 for any input."""
    for name, t in store.items():
        if ".g2." in name or ".b2." in name:
            t.data = (rng.standard_normal(t.data.shape) * scale).astype(t.data.dtype)


def make_module(rng, hw=4, channels=8, heads=2, n_tasks=3, **kw):
    store = ParamStore()
    mod = MultiHeadTAA(store, "attn", hw, channels, heads, n_tasks, rng,
                       dtype=F64, **kw)
    return store, mod


# -- plain self-attention ----------------------------------------------


def test_single_token_returns_value():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((1, 5))
    out = self_attention(rng.standard_normal((1, 5)), rng.standard_normal((1, 5)), v)
    np.testing.assert_allclose(out.data, v, atol=1e-12)


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((6, 4))
    k = np.tile(rng.standard_normal(4), (6, 1))
    v = rng.standard_normal((6, 4))
    out = self_attention(q, k, v)
    for row in out.data:
        np.testing.assert_allclose(row, v.mean(axis=0), atol=1e-12)


def test_self_attention_matches_oracle():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((5, 7)) for _ in range(3))
    out = self_attention(q, k, v)
    np.testing.assert_allclose(out.data, attention_oracle(q, k, v), atol=1e-12)


def test_self_attention_shape_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(DimensionMismatch):
        self_attention(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)),
                       rng.standard_normal((3, 4)))


# -- FiLM generators and the modulated logit matrix --------------------


def test_fresh_generator_emits_identity_modulation():
    rng = np.random.default_rng(4)
    store = ParamStore()
    gen = FilmGenerator(store, "film", n_tasks=2, n_in=2, out_dim=5, rng=rng,
                        dtype=F64)
    for omega in ([1.0, 0.0], [0.25, 0.75]):
        np.testing.assert_allclose(gen.gamma(omega, 0).data, 1.0, atol=1e-12)
        np.testing.assert_allclose(gen.beta(omega, 1).data, 0.0, atol=1e-12)


def test_fresh_modulator_passes_a_through():
    rng = np.random.default_rng(5)
    store = ParamStore()
    mod = LogitModulator(store, "mod", hw=4, n_tasks=3, rng=rng, dtype=F64)
    out = film_modulate([0.2, 0.3, 0.5], mod, task=1)
    np.testing.assert_allclose(out.data, mod.a.data, atol=1e-12)


def test_modulator_matches_entrywise_oracle():
    rng = np.random.default_rng(6)
    store = ParamStore()
    mod = LogitModulator(store, "mod", hw=5, n_tasks=3, rng=rng, dtype=F64)
    randomize_film(store, rng)
    omega = np.array([0.6, 0.1, 0.3])
    g = mod.film.gamma(omega, 2).data
    b = mod.film.beta(omega, 2).data
    out = film_modulate(omega, mod, task=2)
    np.testing.assert_allclose(out.data, film_oracle(mod.a.data, g, b), atol=1e-12)


# -- reduction to self-attention ---------------------------------------


def test_zero_modulation_reduces_to_self_attention_100_fixtures():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        hw = int(rng.integers(1, 7))
        c = int(rng.choice([2, 4, 8]))
        store = ParamStore()
        mod = LogitModulator(store, "mod", hw=hw, n_tasks=3, rng=rng, dtype=F64)
        mod.a.data = np.zeros_like(mod.a.data)
        for t in range(3):  # arbitrary gamma branch; A is zero so it cannot act
            store[f"mod.film.t{t}.g2.w"].data = rng.standard_normal((16, hw))
            store[f"mod.film.t{t}.g2.b"].data = rng.standard_normal(hw)
        q, k, v = (rng.standard_normal((hw, c)) for _ in range(3))
        omega = rng.dirichlet(np.ones(3))
        adapted = task_adapted_attention(q, k, v, omega, mod, task=int(rng.integers(3)))
        plain = self_attention(q, k, v)
        np.testing.assert_allclose(adapted.data, plain.data, atol=1e-6)


def test_row_constant_shift_leaves_attention_unchanged():
    # g == 0 kills A; the beta branch adds the same value to every logit
    # in a row, which softmax ignores.
    rng = np.random.default_rng(7)
    for seed in range(20):
        r = np.random.default_rng(seed)
        store = ParamStore()
        mod = LogitModulator(store, "mod", hw=4, n_tasks=2, rng=r, dtype=F64)
        for t in range(2):
            store[f"mod.film.t{t}.g2.b"].data = np.zeros(4)
            store[f"mod.film.t{t}.b2.w"].data = r.standard_normal((16, 4))
            store[f"mod.film.t{t}.b2.b"].data = r.standard_normal(4)
        q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
        omega = rng.dirichlet(np.ones(2))
        adapted = task_adapted_attention(q, k, v, omega, mod, task=0)
        plain = self_attention(q, k, v)
        np.testing.assert_allclose(adapted.data, plain.data, atol=1e-9)


# -- multi-head module -------------------------------------------------


def test_single_head_module_matches_functional_form():
    rng = np.random.default_rng(8)
    store, mha = make_module(rng, hw=5, channels=6, heads=1)
    randomize_film(store, rng)
    x = ad.as_tensor(rng.standard_normal((2, 5, 6)))
    omega = np.array([0.5, 0.2, 0.3])
    out = mha(x, omega, task=1)
    for b in range(2):
        xi = ad.as_tensor(x.data[b])
        manual = task_adapted_attention(mha.wq(xi), mha.wk(xi), mha.wv(xi),
                                        omega, mha.modulator, 1)
        manual = mha.wo(manual)
        np.testing.assert_allclose(out.data[b], manual.data, atol=1e-10)


def test_two_head_decomposition_against_oracle():
    rng = np.random.default_rng(9)
    store, mha = make_module(rng, hw=4, channels=8, heads=2)
    randomize_film(store, rng)
    x = rng.standard_normal((1, 4, 8))
    omega = np.array([0.1, 0.6, 0.3])
    out = mha(ad.as_tensor(x), omega, task=0)

    with ad.no_grad():
        q = (x[0] @ mha.wq.w.data) + mha.wq.b.data
        k = (x[0] @ mha.wk.w.data) + mha.wk.b.data
        v = (x[0] @ mha.wv.w.data) + mha.wv.b.data
        a_prime = mha.modulator.a_prime(omega, 0).data
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * (h + 1))
        heads.append(attention_oracle(q[:, sl], k[:, sl], v[:, sl], a_prime))
    manual = np.concatenate(heads, axis=1) @ mha.wo.w.data + mha.wo.b.data
    np.testing.assert_allclose(out.data[0], manual, atol=1e-6)


def test_plain_mode_matches_per_head_oracle():
    rng = np.random.default_rng(10)
    store, mha = make_module(rng, hw=4, channels=8, heads=2, use_taa=False)
    assert mha.modulator is None
    x = rng.standard_normal((1, 4, 8))
    out = mha(ad.as_tensor(x), omega_t=None, task=0)
    with ad.no_grad():
        q = (x[0] @ mha.wq.w.data) + mha.wq.b.data
        k = (x[0] @ mha.wk.w.data) + mha.wk.b.data
        v = (x[0] @ mha.wv.w.data) + mha.wv.b.data
    heads = [attention_oracle(q[:, 4 * h:4 * h + 4], k[:, 4 * h:4 * h + 4],
                              v[:, 4 * h:4 * h + 4]) for h in range(2)]
    manual = np.concatenate(heads, axis=1) @ mha.wo.w.data + mha.wo.b.data
    np.testing.assert_allclose(out.data[0], manual, atol=1e-10)


def test_distinct_affinity_columns_change_output():
    rng = np.random.default_rng(11)
    store, mha = make_module(rng)
    randomize_film(store, rng, scale=2.0)
    mha.modulator.a.data = rng.standard_normal((4, 4))  # visible logit matrix
    x = ad.as_tensor(rng.standard_normal((1, 4, 8)))
    a = mha(x, np.array([1.0, 0.0, 0.0]), task=0).data
    b = mha(x, np.array([0.0, 0.0, 1.0]), task=0).data
    c = mha(x, np.array([1.0, 0.0, 0.0]), task=2).data
    assert np.abs(a - b).max() > 1e-6  # omega sensitivity
    assert np.abs(a - c).max() > 1e-6  # per-task generators


def test_attention_logits_shape_and_modulation():
    rng = np.random.default_rng(12)
    store, mha = make_module(rng)
    x = ad.as_tensor(rng.standard_normal((2, 4, 8)))
    logits = mha.attention_logits(x, np.array([0.2, 0.3, 0.5]), task=1)
    assert logits.shape == (2, 2, 4, 4)
    # fresh init: modulation adds exactly A to every head
    store2 = ParamStore()
    plain = MultiHeadTAA(store2, "attn", 4, 8, 2, 3, np.random.default_rng(12),
                         use_taa=False, dtype=F64)
    bare = plain.attention_logits(x, None, task=1)
    np.testing.assert_allclose(logits.data - bare.data,
                               np.broadcast_to(mha.modulator.a.data, (2, 2, 4, 4)),
                               atol=1e-12)


def test_head_divisibility_enforced():
    with pytest.raises(DimensionMismatch):
        make_module(np.random.default_rng(0), channels=6, heads=4)


def test_token_shape_enforced():
    rng = np.random.default_rng(13)
    store, mha = make_module(rng)
    with pytest.raises(DimensionMismatch):
        mha(ad.as_tensor(rng.standard_normal((1, 5, 8))), np.ones(3) / 3, 0)


def test_float32_default_path_runs():
    rng = np.random.default_rng(14)
    store = ParamStore()
    mha = MultiHeadTAA(store, "attn", 4, 8, 2, 3, rng)
    out = mha(ad.as_tensor(rng.standard_normal((2, 4, 8)).astype(np.float32)),
              np.ones(3) / 3, task=0)
    assert out.data.dtype == np.float32 and np.isfinite(out.data).all()
