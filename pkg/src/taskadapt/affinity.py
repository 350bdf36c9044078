"""Gradient-based task affinities: cosine similarities and mirror descent.

The affinity matrix holds one weight column per target task; column t
weighs how strongly each inductive task n should influence task t. An
update step (a) optionally runs a few optimizer steps on a weighted sum
of the task losses, (b) measures pairwise cosine similarity between the
per-task gradients at the shared adapter-input representation, and
(c) applies a multiplicative-weights (mirror-descent) update to every
column, keeping it on the probability simplex.

The exponent sign is configurable: ``paper_negative`` applies
``exp(-kappa * sim)`` (down-weighting similar tasks, the formula as
printed), ``positive`` the opposite. Both are exposed because the
printed sign conflicts with the reported diagonal-dominant affinities;
no intent is guessed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DimensionMismatch, ZeroGradient

log = logging.getLogger(__name__)

SIGN_CONVENTIONS = ("paper_negative", "positive")


@dataclass
class TaskGradient:
    """Flat gradient of one task's loss w.r.t. the shared representation."""

    task_id: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (N, N), entries in [-1, 1]


@dataclass
class AffinityMatrix:
    """N x N task-affinity weights; every column lies on the simplex."""

    matrix: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)

    @classmethod
    def uniform(cls, n_tasks: int) -> "AffinityMatrix":
        return cls(np.full((n_tasks, n_tasks), 1.0 / n_tasks), step_count=0)

    @property
    def n_tasks(self) -> int:
        return self.matrix.shape[0]

    def column(self, t: int) -> np.ndarray:
        """The weight vector omega_t for target task t."""
        return self.matrix[:, t].copy()

    def validate(self, tol: float = 1e-6) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"affinity matrix must be square, got {m.shape}")
        if (m < -tol).any():
            raise ValueError("affinity entries must be nonnegative")
        sums = m.sum(axis=0)
        if np.abs(sums - 1.0).max() > tol:
            raise ValueError(f"affinity columns must sum to 1, got {sums}")


class TroaProvider(Protocol):
    """What a TROA step needs from the surrounding trainer."""

    def inner_step(self, weights: np.ndarray, steps: int) -> None:
        """Run ``steps`` optimizer updates on sum_n weights[n] * loss_n."""

    def task_gradients(self) -> list[TaskGradient]:
        """Per-task loss gradients w.r.t. the shared representation."""


@dataclass
class TroaState:
    """Mutable affinity-update state owned by a single trainer thread."""

    affinity: AffinityMatrix
    kappa: float = 1.0
    sign_convention: str = "paper_negative"
    inner_steps: int = 1

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.sign_convention not in SIGN_CONVENTIONS:
            raise ValueError(f"sign_convention must be one of {SIGN_CONVENTIONS}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two flat vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatch(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroGradient("gradient norm below 1e-12; cosine undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def compute_similarity_matrix(grads: list[TaskGradient]) -> SimilarityMatrix:
    """Pairwise gradient cosines; zero-norm gradients contribute 0 with a warning."""
    n = len(grads)
    if n < 2:
        raise ValueError("need at least two task gradients")
    lengths = {g.vector.size for g in grads}
    if len(lengths) != 1:
        raise DimensionMismatch(f"gradient lengths differ across tasks: {sorted(lengths)}")
    values = np.zeros((n, n), dtype=np.float64)
    for t in range(n):
        for m in range(t, n):
            try:
                s = cosine_similarity(grads[t].vector, grads[m].vector)
            except ZeroGradient:
                log.warning("zero gradient for task pair (%d, %d); similarity set to 0",
                            grads[t].task_id, grads[m].task_id)
                s = 0.0
            values[t, m] = s
            values[m, t] = s
    return SimilarityMatrix(values)


def mirror_descent_update(omega_t: np.ndarray, sim_t: np.ndarray,
                          kappa: float, sign: str = "paper_negative") -> np.ndarray:
    """One multiplicative-weights step for a single affinity column.

    Component n of the result is proportional to
    ``omega_t[n] * exp(s * kappa * sim_t[n])`` with s = -1 for
    ``paper_negative`` and s = +1 for ``positive``, renormalized to the
    simplex. Computed in log-space so extreme similarities stay finite.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if sign not in SIGN_CONVENTIONS:
        raise ValueError(f"unknown sign convention: {sign}")
    omega_t = np.asarray(omega_t, dtype=np.float64).reshape(-1)
    sim_t = np.asarray(sim_t, dtype=np.float64).reshape(-1)
    if omega_t.shape != sim_t.shape:
        raise DimensionMismatch(f"omega/sim lengths differ: {omega_t.shape} vs {sim_t.shape}")
    s = -1.0 if sign == "paper_negative" else 1.0
    with np.errstate(divide="ignore"):
        logits = np.log(omega_t) + s * kappa * sim_t
    shift = logits.max()
    if not np.isfinite(shift):  # every weight is zero; nothing sensible to do
        raise ValueError("mirror descent on an all-zero weight vector")
    w = np.exp(logits - shift)
    return w / w.sum()


def troa_step(state: TroaState, provider: TroaProvider) -> tuple[AffinityMatrix, TroaState]:
    """One outer affinity iteration; returns the new matrix and the state.

    The state's affinity is replaced by the returned snapshot; the old
    matrix object is never mutated, so readers holding it are safe.
    """
    n = state.affinity.n_tasks
    inner_weights = state.affinity.matrix.mean(axis=1)  # row mean over target columns
    provider.inner_step(inner_weights, state.inner_steps)
    grads = provider.task_gradients()
    if len(grads) != n:
        raise DimensionMismatch(f"provider returned {len(grads)} gradients for {n} tasks")
    sim = compute_similarity_matrix(grads)
    new = np.empty_like(state.affinity.matrix)
    for t in range(n):
        new[:, t] = mirror_descent_update(
            state.affinity.matrix[:, t], sim.values[t, :], state.kappa, state.sign_convention)
    snapshot = AffinityMatrix(new, step_count=state.affinity.step_count + 1)
    state.affinity = snapshot
    return snapshot, state


def save_affinity_csv(matrix: AffinityMatrix, path) -> None:
    """Row-major CSV dump with 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix.matrix:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def load_affinity_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
