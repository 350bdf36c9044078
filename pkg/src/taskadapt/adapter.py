"""Adapter blocks: norm, task-adapted attention, FFN, TSN, bottleneck.

A block sits beside one frozen backbone layer and produces one output
per task from shared weights; only the FiLM/TSN generators are
task-indexed. Blocks chain through additive skips (backbone features +
previous block's per-task output); crossing the stage-3/stage-4
boundary the carried state goes through a fixed 2x2 token merge and a
learnable projection so grids and widths line up.

Sub-layer order, all flags on::

    u        = norm1(x)
    a_t      = x + multi_head_taa(u, omega_t)
    wtilde_t = a_t + ffn(a_t)
    y        = tsn(a_t, wtilde_t)
    out_t    = y + up(gelu(down(y)))

With ``use_tsn=False`` a standard pre-FFN layer norm replaces TSN
(``wtilde = a + ffn(norm2(a)); y = wtilde``); with ``use_bottleneck=False``
the down/up pair runs at full width (strictly more parameters); with
``use_taa=False`` the attention is plain multi-head self-attention.
The up-projection starts at zero either way, so a fresh block's
bottleneck branch contributes nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .affinity import AffinityMatrix
from .errors import DimensionMismatch
from .layers import DTYPE, LayerNorm, Linear, Mlp, ParamStore, merge_2x2
from .taa import MultiHeadTAA

log = logging.getLogger(__name__)


@dataclass
class AdapterLayerConfig:
    """Dimensions and ablation flags for one adapter block."""

    channels: int
    hw: int
    heads: int
    n_tasks: int
    bottleneck_dim: int
    ffn_hidden: int
    use_taa: bool = True
    use_tsn: bool = True
    use_bottleneck: bool = True
    film_hidden: int = 16
    tsn_hidden: int = 8

    def __post_init__(self):
        if self.use_bottleneck and self.bottleneck_dim >= self.channels:
            raise ValueError(
                f"bottleneck_dim {self.bottleneck_dim} must be below channels {self.channels}")


class TaskScaledNorm:
    """Layer norm whose scale/shift are generated from the post-FFN tokens.

    Statistics come from ``a_t`` per token over channels (std floored at
    1e-6); the per-task generators consume the channel-wise mean over
    tokens of ``wtilde_t`` and emit per-channel gamma/beta, composed with
    the frozen backbone norm's gamma'/beta'.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, n_tasks: int,
                 gamma_prime: np.ndarray, beta_prime: np.ndarray,
                 rng: np.random.Generator, hidden: int = 8, dtype=DTYPE):
        self.channels = channels
        self.n_tasks = n_tasks
        self.gamma_prime = np.asarray(gamma_prime, dtype=dtype).reshape(channels)
        self.beta_prime = np.asarray(beta_prime, dtype=dtype).reshape(channels)
        self._g1, self._g2, self._b1, self._b2 = [], [], [], []
        for t in range(n_tasks):
            self._g1.append(Linear(store, f"{name}.t{t}.g1", channels, hidden, rng, dtype=dtype))
            g2 = Linear(store, f"{name}.t{t}.g2", hidden, channels, rng, zero=True, dtype=dtype)
            g2.b.data = np.ones(channels, dtype=dtype)
            self._g2.append(g2)
            self._b1.append(Linear(store, f"{name}.t{t}.b1", channels, hidden, rng, dtype=dtype))
            self._b2.append(Linear(store, f"{name}.t{t}.b2", hidden, channels, rng, zero=True, dtype=dtype))

    def generated(self, omega_tilde: Tensor, task: int) -> tuple[Tensor, Tensor]:
        """Per-channel (gamma_t, beta_t), each shaped (B, C)."""
        pooled = ad.reduce_mean(omega_tilde, axis=1)
        gamma = self._g2[task](ad.tanh(self._g1[task](pooled)))
        beta = self._b2[task](ad.tanh(self._b1[task](pooled)))
        return gamma, beta

    def __call__(self, a_t: Tensor, omega_tilde: Tensor, task: int) -> Tensor:
        squeeze = a_t.ndim == 2
        if squeeze:
            a_t = ad.reshape(a_t, (1,) + a_t.shape)
            omega_tilde = ad.reshape(omega_tilde, (1,) + omega_tilde.shape)
        if a_t.shape != omega_tilde.shape or a_t.shape[-1] != self.channels:
            raise DimensionMismatch(
                f"tsn expects matching (B, hw, {self.channels}) inputs, "
                f"got {a_t.shape} and {omega_tilde.shape}")
        sigma = a_t.data.std(axis=-1)
        if (sigma < 1e-12).any():
            log.warning("DegenerateVariance: %d token(s) with std < 1e-12; "
                        "flooring at 1e-6", int((sigma < 1e-12).sum()))
        gamma_t, beta_t = self.generated(omega_tilde, task)
        b = a_t.shape[0]
        gamma_hat = ad.add(ad.mul(gamma_t, self.gamma_prime), self.beta_prime)
        gamma_hat = ad.reshape(gamma_hat, (b, 1, self.channels))
        beta_t = ad.reshape(beta_t, (b, 1, self.channels))
        out = ad.add(ad.mul(ad.standardize(a_t), gamma_hat), beta_t)
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out


def tsn(a_t, omega_tilde_t, params: TaskScaledNorm, task: int) -> Tensor:
    """Functional form of :class:`TaskScaledNorm` for raw arrays or tensors."""
    return params(ad.as_tensor(a_t), ad.as_tensor(omega_tilde_t), task)


class AdapterBlock:
    """One trainable adapter layer; returns a per-task list of outputs."""

    def __init__(self, store: ParamStore, name: str, cfg: AdapterLayerConfig,
                 gamma_prime: np.ndarray, beta_prime: np.ndarray,
                 rng: np.random.Generator, dtype=DTYPE):
        c = cfg.channels
        self.cfg = cfg
        self.norm1 = LayerNorm(store, f"{name}.norm1", c, dtype=dtype)
        self.attn = MultiHeadTAA(store, f"{name}.attn", cfg.hw, c, cfg.heads,
                                 cfg.n_tasks, rng, use_taa=cfg.use_taa,
                                 film_hidden=cfg.film_hidden, dtype=dtype)
        self.ffn = Mlp(store, f"{name}.ffn", c, cfg.ffn_hidden, c, rng, dtype=dtype)
        if cfg.use_tsn:
            self.tsn = TaskScaledNorm(store, f"{name}.tsn", c, cfg.n_tasks,
                                      gamma_prime, beta_prime, rng,
                                      hidden=cfg.tsn_hidden, dtype=dtype)
            self.norm2 = None
        else:
            self.tsn = None
            self.norm2 = LayerNorm(store, f"{name}.norm2", c, dtype=dtype)
        down_dim = cfg.bottleneck_dim if cfg.use_bottleneck else c
        self.down = Linear(store, f"{name}.down", c, down_dim, rng, dtype=dtype)
        self.up = Linear(store, f"{name}.up", down_dim, c, rng, zero=True, dtype=dtype)

    def forward_task(self, x: Tensor, omega_t: np.ndarray, task: int) -> Tensor:
        u = self.norm1(x)
        a_t = ad.add(x, self.attn(u, omega_t, task))
        if self.tsn is not None:
            wtilde = ad.add(a_t, self.ffn(a_t))
            y = self.tsn(a_t, wtilde, task)
        else:
            wtilde = ad.add(a_t, self.ffn(self.norm2(a_t)))
            y = wtilde
        return ad.add(y, self.up(ad.gelu(self.down(y))))

    def __call__(self, backbone_features, prev: list[Tensor] | None,
                 affinity: AffinityMatrix) -> list[Tensor]:
        feats = ad.as_tensor(backbone_features)
        if affinity.n_tasks != self.cfg.n_tasks:
            raise DimensionMismatch(
                f"affinity has {affinity.n_tasks} tasks, block built for {self.cfg.n_tasks}")
        outs = []
        for t in range(self.cfg.n_tasks):
            if prev is None:
                x = feats
            else:
                if prev[t].shape != feats.shape:
                    raise DimensionMismatch(
                        f"carried state {prev[t].shape} does not match features {feats.shape}")
                x = ad.add(feats, prev[t])
            outs.append(self.forward_task(x, affinity.column(t), t))
        return outs


def adapter_forward(backbone_features, prev, affinity, block: AdapterBlock) -> list[Tensor]:
    """Free-function form of one adapter block application."""
    return block(backbone_features, prev, affinity)


class AdapterChain:
    """Ordered adapter blocks threaded by per-task skips across placements.

    ``placements`` pairs (stage, layer) must be sorted; ``stage_dims``
    maps stage -> (h, w, channels). A single bridge (merge + projection)
    is created per stage boundary and shared across tasks, like the
    blocks themselves.
    """

    def __init__(self, store: ParamStore, name: str,
                 placements: list[tuple[int, int]],
                 stage_dims: dict[int, tuple[int, int, int]],
                 block_cfgs: list[AdapterLayerConfig],
                 norms: list[tuple[np.ndarray, np.ndarray]],
                 rng: np.random.Generator, dtype=DTYPE):
        if sorted(placements) != list(placements):
            raise ValueError("placements must be sorted by (stage, layer)")
        self.placements = list(placements)
        self.stage_dims = dict(stage_dims)
        self.blocks = []
        self.bridges: dict[int, Linear] = {}
        for i, ((stage, layer), cfg, (gp, bp)) in enumerate(zip(placements, block_cfgs, norms)):
            self.blocks.append(AdapterBlock(store, f"{name}.s{stage}l{layer}", cfg,
                                            gp, bp, rng, dtype=dtype))
            if i > 0 and placements[i - 1][0] != stage:
                prev_c = stage_dims[placements[i - 1][0]][2]
                this_c = stage_dims[stage][2]
                self.bridges[i] = Linear(store, f"{name}.bridge{placements[i - 1][0]}to{stage}",
                                         4 * prev_c, this_c, rng, std=None, dtype=dtype)

    def __call__(self, features: list[Tensor], affinity: AffinityMatrix) -> list[Tensor]:
        """``features[i]`` feeds block i; returns final per-task outputs."""
        if len(features) != len(self.blocks):
            raise DimensionMismatch(
                f"{len(features)} feature maps for {len(self.blocks)} blocks")
        prev: list[Tensor] | None = None
        for i, block in enumerate(self.blocks):
            if prev is not None and i in self.bridges:
                h, w, _ = self.stage_dims[self.placements[i - 1][0]]
                bridge = self.bridges[i]
                prev = [bridge(merge_2x2(p, h, w)) for p in prev]
            prev = block(ad.as_tensor(features[i]), prev, affinity)
        return prev


def chain_adapters(chain: AdapterChain, features: list[Tensor],
                   affinity: AffinityMatrix) -> list[Tensor]:
    """Free-function form of a full chain application."""
    return chain(features, affinity)
