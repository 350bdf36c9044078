"""Task-Adapted Attention: self-attention with FiLM-modulated logit shifts.

Plain attention maps tokens through ``softmax(q k^T / sqrt(c)) v``. The
task-adapted variant adds a learnable hw x hw matrix ``A`` to the
pre-softmax logits after modulating it row-wise by per-task FiLM
generators driven by the task's affinity column: ``A' = A o (g 1^T) +
b 1^T``. ``A`` is shared across heads and tasks; only the generators are
per-task. At initialization the generators output g=1, b=0, so training
starts from (almost) unmodulated attention, and zeroing them recovers
self-attention exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch
from .layers import DTYPE, Linear, ParamStore, normal_init


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return ad.transpose(x, axes)


def self_attention(q, k, v) -> Tensor:
    """Single-head scaled dot-product attention on (..., hw, c) matrices."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionMismatch(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    c = q.shape[-1]
    logits = ad.mul(ad.matmul(q, _swap_last(k)), 1.0 / np.sqrt(c))
    return ad.matmul(ad.softmax(logits, axis=-1), v)


class FilmGenerator:
    """Per-task two-layer affine maps from the affinity vector to hw-vectors.

    The gamma branch is initialized to emit exactly 1 (zero weights, unit
    bias) and the beta branch to emit 0, so a fresh generator leaves the
    logits unmodulated.
    """

    def __init__(self, store: ParamStore, name: str, n_tasks: int, n_in: int,
                 out_dim: int, rng: np.random.Generator, hidden: int = 16,
                 dtype=DTYPE):
        self.n_tasks = n_tasks
        self.out_dim = out_dim
        self._g1, self._g2, self._b1, self._b2 = [], [], [], []
        for t in range(n_tasks):
            self._g1.append(Linear(store, f"{name}.t{t}.g1", n_in, hidden, rng, dtype=dtype))
            g2 = Linear(store, f"{name}.t{t}.g2", hidden, out_dim, rng, zero=True, dtype=dtype)
            g2.b.data = np.ones(out_dim, dtype=dtype)
            self._g2.append(g2)
            self._b1.append(Linear(store, f"{name}.t{t}.b1", n_in, hidden, rng, dtype=dtype))
            self._b2.append(Linear(store, f"{name}.t{t}.b2", hidden, out_dim, rng, zero=True, dtype=dtype))

    def _branch(self, fc1, fc2, omega: np.ndarray) -> Tensor:
        z = ad.as_tensor(np.asarray(omega).reshape(1, -1).astype(fc1.w.dtype))
        return ad.reshape(fc2(ad.tanh(fc1(z))), (self.out_dim,))

    def gamma(self, omega_t: np.ndarray, task: int) -> Tensor:
        return self._branch(self._g1[task], self._g2[task], omega_t)

    def beta(self, omega_t: np.ndarray, task: int) -> Tensor:
        return self._branch(self._b1[task], self._b2[task], omega_t)


class LogitModulator:
    """The learnable logit matrix A plus its per-task FiLM generators."""

    def __init__(self, store: ParamStore, name: str, hw: int, n_tasks: int,
                 rng: np.random.Generator, hidden: int = 16, a_std: float = 0.02,
                 dtype=DTYPE):
        self.hw = hw
        self.a = store.add(f"{name}.A", normal_init(rng, (hw, hw), a_std, dtype))
        self.film = FilmGenerator(store, f"{name}.film", n_tasks, n_tasks, hw,
                                  rng, hidden=hidden, dtype=dtype)

    def a_prime(self, omega_t: np.ndarray, task: int) -> Tensor:
        """A' = A o (g 1^T) + b 1^T for the given task's affinity column."""
        g = self.film.gamma(omega_t, task)
        b = self.film.beta(omega_t, task)
        if g.shape[0] != self.hw:
            raise DimensionMismatch(f"generator emits {g.shape[0]} values for hw={self.hw}")
        g_col = ad.reshape(g, (self.hw, 1))
        b_col = ad.reshape(b, (self.hw, 1))
        return ad.add(ad.mul(self.a, g_col), b_col)


def film_modulate(omega_t: np.ndarray, modulator: LogitModulator, task: int) -> Tensor:
    """The modulated logit matrix A'(omega_t) as an hw x hw tensor."""
    return modulator.a_prime(omega_t, task)


def task_adapted_attention(q, k, v, omega_t, modulator: LogitModulator, task: int) -> Tensor:
    """Single-head attention over logits shifted by A'(omega_t)."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    c = q.shape[-1]
    logits = ad.mul(ad.matmul(q, _swap_last(k)), 1.0 / np.sqrt(c))
    logits = ad.add(logits, modulator.a_prime(omega_t, task))
    return ad.matmul(ad.softmax(logits, axis=-1), v)


class MultiHeadTAA:
    """Q/K/V projection, per-head (task-adapted) attention, output projection.

    ``use_taa=False`` drops the logit modulation entirely, leaving plain
    windowless multi-head self-attention with the same projections.
    """

    def __init__(self, store: ParamStore, name: str, hw: int, channels: int,
                 heads: int, n_tasks: int, rng: np.random.Generator,
                 use_taa: bool = True, film_hidden: int = 16, dtype=DTYPE):
        if channels % heads:
            raise DimensionMismatch(f"channels {channels} not divisible by heads {heads}")
        self.hw, self.channels, self.heads = hw, channels, heads
        self.head_dim = channels // heads
        self.wq = Linear(store, f"{name}.wq", channels, channels, rng, dtype=dtype)
        self.wk = Linear(store, f"{name}.wk", channels, channels, rng, dtype=dtype)
        self.wv = Linear(store, f"{name}.wv", channels, channels, rng, dtype=dtype)
        self.wo = Linear(store, f"{name}.wo", channels, channels, rng, dtype=dtype)
        self.use_taa = use_taa
        self.modulator = (LogitModulator(store, f"{name}.mod", hw, n_tasks, rng,
                                         hidden=film_hidden, dtype=dtype)
                          if use_taa else None)

    def _heads(self, x: Tensor, b: int) -> Tensor:
        x = ad.reshape(x, (b, self.hw, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def attention_logits(self, x: Tensor, omega_t, task: int) -> Tensor:
        """Pre-softmax logits (B, heads, hw, hw); exposed for visualization."""
        b = x.shape[0]
        q = self._heads(self.wq(x), b)
        k = self._heads(self.wk(x), b)
        logits = ad.mul(ad.matmul(q, _swap_last(k)), 1.0 / np.sqrt(self.head_dim))
        if self.use_taa:
            logits = ad.add(logits, self.modulator.a_prime(omega_t, task))
        return logits

    def __call__(self, x: Tensor, omega_t, task: int) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.hw or x.shape[2] != self.channels:
            raise DimensionMismatch(
                f"expected (B, {self.hw}, {self.channels}) tokens, got {x.shape}")
        b = x.shape[0]
        v = self._heads(self.wv(x), b)
        attn = ad.softmax(self.attention_logits(x, omega_t, task), axis=-1)
        out = ad.matmul(attn, v)
        out = ad.transpose(out, (0, 2, 1, 3))
        out = ad.reshape(out, (b, self.hw, self.channels))
        return self.wo(out)
