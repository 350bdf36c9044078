"""Affinity updates: cosine similarities, mirror descent, outer steps."""

import logging

import numpy as np
import pytest

from taskadapt.affinity import (AffinityMatrix, SimilarityMatrix, TaskGradient,
                                TroaState, compute_similarity_matrix,
                                cosine_similarity, load_affinity_csv,
                                mirror_descent_update, save_affinity_csv,
                                troa_step)
from taskadapt.errors import DimensionMismatch, ZeroGradient
from taskadapt.verify import mirror_descent_oracle


# -- cosine similarity -------------------------------------------------


def test_cosine_identical_vectors():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)


def test_cosine_antiparallel():
    assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0)


def test_cosine_zero_norm_raises():
    with pytest.raises(ZeroGradient):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_length_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


# -- similarity matrix -------------------------------------------------


def test_similarity_identical_gradients():
    g = [TaskGradient(0, [1.0, 2.0]), TaskGradient(1, [1.0, 2.0])]
    np.testing.assert_allclose(compute_similarity_matrix(g).values, np.ones((2, 2)))


def test_similarity_orthogonal_pair():
    g = [TaskGradient(0, [1.0, 0.0]), TaskGradient(1, [0.0, 1.0])]
    np.testing.assert_allclose(compute_similarity_matrix(g).values, np.eye(2))


def test_similarity_matches_brute_force(rng):
    vecs = rng.standard_normal((3, 8))
    sim = compute_similarity_matrix([TaskGradient(i, v) for i, v in enumerate(vecs)])
    for t in range(3):
        for n in range(3):
            direct = float(np.dot(vecs[t], vecs[n])
                           / (np.linalg.norm(vecs[t]) * np.linalg.norm(vecs[n])))
            assert sim.values[t, n] == pytest.approx(direct, abs=1e-12)


def test_similarity_symmetric_with_unit_diagonal(rng):
    vecs = rng.standard_normal((4, 16))
    sim = compute_similarity_matrix([TaskGradient(i, v) for i, v in enumerate(vecs)])
    np.testing.assert_allclose(sim.values, sim.values.T, atol=1e-6)
    np.testing.assert_allclose(np.diag(sim.values), 1.0, atol=1e-12)


def test_similarity_zero_gradient_warns_and_substitutes(caplog):
    g = [TaskGradient(0, [1.0, 0.0]), TaskGradient(1, [0.0, 0.0])]
    with caplog.at_level(logging.WARNING, logger="taskadapt.affinity"):
        sim = compute_similarity_matrix(g)
    assert sim.values[0, 1] == 0.0 and sim.values[1, 0] == 0.0
    assert any("zero gradient" in r.getMessage() for r in caplog.records)


def test_similarity_length_mismatch():
    g = [TaskGradient(0, [1.0, 0.0]), TaskGradient(1, [1.0, 0.0, 0.0])]
    with pytest.raises(DimensionMismatch):
        compute_similarity_matrix(g)


# -- mirror descent ----------------------------------------------------


def test_mirror_descent_equal_similarities_fixed_point():
    for c in (-3.0, 0.0, 0.7):
        out = mirror_descent_update([0.5, 0.5], [c, c], kappa=1.0)
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-12)


def test_mirror_descent_zero_similarities_identity():
    out = mirror_descent_update([0.2, 0.8], [0.0, 0.0], kappa=1.0)
    np.testing.assert_allclose(out, [0.2, 0.8], atol=1e-12)


def test_mirror_descent_pinned_value():
    out = mirror_descent_update([0.5, 0.5], [1.0, 0.0], kappa=1.0,
                                sign="paper_negative")
    e = np.exp(-1.0)
    np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert out[0] == pytest.approx(0.26894, abs=1e-5)
    assert out[1] == pytest.approx(0.73106, abs=1e-5)


def test_mirror_descent_positive_sign_flips_direction():
    neg = mirror_descent_update([0.5, 0.5], [1.0, 0.0], 1.0, "paper_negative")
    pos = mirror_descent_update([0.5, 0.5], [1.0, 0.0], 1.0, "positive")
    assert neg[0] < 0.5 < pos[0]
    np.testing.assert_allclose(pos, neg[::-1], atol=1e-12)


def test_mirror_descent_simplex_property_1000_cases():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        omega = rng.dirichlet(np.ones(n))
        sim = rng.uniform(-1, 1, size=n)
        kappa = float(rng.uniform(0.1, 5.0))
        sign = "paper_negative" if rng.random() < 0.5 else "positive"
        out = mirror_descent_update(omega, sim, kappa, sign)
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-6


def test_mirror_descent_matches_oracle_1e10():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        omega = rng.dirichlet(np.ones(n))
        sim = rng.uniform(-1, 1, size=n)
        kappa = float(rng.uniform(0.1, 5.0))
        sign = "paper_negative" if rng.random() < 0.5 else "positive"
        out = mirror_descent_update(omega, sim, kappa, sign)
        ref = mirror_descent_oracle(omega, sim, kappa, sign)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_mirror_descent_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        omega = rng.dirichlet(np.ones(n))
        sim = rng.uniform(-1, 1, size=n)
        c = float(rng.uniform(-10, 10))
        a = mirror_descent_update(omega, sim, 1.3)
        b = mirror_descent_update(omega, sim + c, 1.3)
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_mirror_descent_extreme_inputs_stay_finite():
    out = mirror_descent_update([1e-300, 1.0 - 1e-300], [1.0, -1.0], kappa=500.0)
    assert np.isfinite(out).all()
    assert out.sum() == pytest.approx(1.0, abs=1e-6)


def test_mirror_descent_rejects_bad_args():
    with pytest.raises(ValueError):
        mirror_descent_update([0.5, 0.5], [0.0, 0.0], kappa=-1.0)
    with pytest.raises(ValueError):
        mirror_descent_update([0.5, 0.5], [0.0, 0.0], 1.0, sign="sideways")
    with pytest.raises(DimensionMismatch):
        mirror_descent_update([0.5, 0.5], [0.0, 0.0, 0.0], 1.0)


# -- affinity matrix ---------------------------------------------------


def test_uniform_initialization():
    aff = AffinityMatrix.uniform(4)
    np.testing.assert_allclose(aff.matrix, 0.25)
    assert aff.step_count == 0
    aff.validate()


def test_column_view_is_a_copy():
    aff = AffinityMatrix.uniform(3)
    col = aff.column(1)
    col[0] = 99.0
    assert aff.matrix[0, 1] == pytest.approx(1 / 3)


def test_validate_rejects_bad_matrices():
    with pytest.raises(DimensionMismatch):
        AffinityMatrix(np.ones((2, 3)) / 2).validate()
    with pytest.raises(ValueError):
        AffinityMatrix(np.array([[1.5, 0.5], [-0.5, 0.5]])).validate()
    with pytest.raises(ValueError):
        AffinityMatrix(np.full((2, 2), 0.3)).validate()


# -- troa_step ---------------------------------------------------------


class SyntheticProvider:
    """Fixed per-task gradients; counts inner_step invocations."""

    def __init__(self, vectors):
        self.vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
        self.inner_calls = []

    def inner_step(self, weights, steps):
        self.inner_calls.append((np.asarray(weights).copy(), steps))

    def task_gradients(self):
        return [TaskGradient(i, v) for i, v in enumerate(self.vectors)]


def test_troa_step_symmetry_stays_uniform():
    provider = SyntheticProvider([[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]])
    state = TroaState(AffinityMatrix.uniform(2))
    snap, state = troa_step(state, provider)
    np.testing.assert_allclose(snap.matrix, 0.5, atol=1e-6)
    assert snap.step_count == 1


def test_troa_step_matches_oracle_composition(rng):
    vecs = rng.standard_normal((3, 8))
    provider = SyntheticProvider(vecs)
    start = AffinityMatrix.uniform(3)
    state = TroaState(AffinityMatrix(start.matrix.copy()), kappa=1.7,
                      sign_convention="paper_negative")
    snap, _ = troa_step(state, provider)

    sim = compute_similarity_matrix([TaskGradient(i, v) for i, v in enumerate(vecs)])
    for t in range(3):
        expect = mirror_descent_oracle(start.matrix[:, t], sim.values[t, :], 1.7,
                                       "paper_negative")
        np.testing.assert_allclose(snap.matrix[:, t], expect, rtol=1e-10)


def test_troa_step_columns_on_simplex(rng):
    provider = SyntheticProvider(rng.standard_normal((4, 12)))
    state = TroaState(AffinityMatrix.uniform(4), kappa=2.0)
    for _ in range(5):
        snap, state = troa_step(state, provider)
        snap.validate(tol=1e-6)


def test_troa_step_produces_asymmetric_affinity():
    # three gradients with distinct pairwise cosines
    vecs = [np.array([1.0, 0.0, 0.0]),
            np.array([0.9, 0.1, 0.0]),
            np.array([0.0, 1.0, 1.0])]
    provider = SyntheticProvider(vecs)
    state = TroaState(AffinityMatrix(np.array([[0.6, 0.2, 0.2],
                                               [0.2, 0.6, 0.2],
                                               [0.2, 0.2, 0.6]])))
    snap, _ = troa_step(state, provider)
    assert np.abs(snap.matrix - snap.matrix.T).max() > 1e-3


def test_troa_step_inner_weights_are_row_means():
    provider = SyntheticProvider([[1.0, 0.0], [0.0, 1.0]])
    m = np.array([[0.7, 0.4], [0.3, 0.6]])
    state = TroaState(AffinityMatrix(m), inner_steps=3)
    troa_step(state, provider)
    (weights, steps), = provider.inner_calls
    np.testing.assert_allclose(weights, m.mean(axis=1))
    assert steps == 3


def test_troa_step_snapshot_immutable():
    provider = SyntheticProvider([[1.0, 0.0], [0.0, 1.0]])
    state = TroaState(AffinityMatrix.uniform(2))
    old = state.affinity
    snap, state = troa_step(state, provider)
    np.testing.assert_allclose(old.matrix, 0.5)  # original untouched
    assert snap is state.affinity and snap is not old


def test_troa_state_validation():
    with pytest.raises(ValueError):
        TroaState(AffinityMatrix.uniform(2), kappa=0.0)
    with pytest.raises(ValueError):
        TroaState(AffinityMatrix.uniform(2), inner_steps=0)
    with pytest.raises(ValueError):
        TroaState(AffinityMatrix.uniform(2), sign_convention="upside_down")


# -- persistence -------------------------------------------------------


def test_affinity_csv_round_trip(tmp_path, rng):
    m = rng.dirichlet(np.ones(4), size=4).T
    path = tmp_path / "affinity.csv"
    save_affinity_csv(AffinityMatrix(m), path)
    back = load_affinity_csv(path)
    np.testing.assert_allclose(back, m, rtol=1e-8)  # 9 significant digits
    text = path.read_text().strip().splitlines()
    assert len(text) == 4 and all(len(row.split(",")) == 4 for row in text)
