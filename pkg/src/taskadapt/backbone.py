"""Frozen windowed-attention encoder with the four-stage pyramid shape.

The backbone never trains, so it runs as plain numpy entirely outside
the autodiff tape; its weights are drawn once from a seeded generator
(scaled-normal fan-in init, so the random features stay informative)
and serialize into checkpoints for the bit-exactness guarantees.

Windows are plain non-shifted tiles with learned (here: frozen random)
relative position bias; at grids smaller than the configured window the
effective window shrinks to the grid side. Token layouts are row-major;
stage boundaries apply a 2x2 merge, layer norm, and a 4C -> 2C linear
reduction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _special

from .errors import ConfigError, DimensionMismatch, InvalidPlacement
from .layers import relative_bias_index

DTYPE = np.float32


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    base_channels: int = 32
    stage_depths: tuple[int, ...] = (1, 1, 4, 2)
    window_size: int = 4
    heads: tuple[int, ...] = (2, 4, 8, 16)
    mlp_ratio: float = 4.0
    weight_seed: int = 7021

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.heads = tuple(self.heads)
        if len(self.stage_depths) != 4 or len(self.heads) != 4:
            raise ConfigError("backbone expects exactly four stages")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        for s in range(4):
            side = self.grid_side(s + 1)
            win = min(self.window_size, side)
            if side < 1 or side % win:
                raise ConfigError(f"stage {s + 1} grid {side} not tileable by window {win}")
            if self.stage_channels(s + 1) % self.heads[s]:
                raise ConfigError(f"stage {s + 1} channels not divisible by heads")

    def grid_side(self, stage: int) -> int:
        return self.image_size // self.patch_size // (2 ** (stage - 1))

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (2 ** (stage - 1))

    def stage_dims(self, stage: int) -> tuple[int, int, int]:
        side = self.grid_side(stage)
        return side, side, self.stage_channels(stage)


def default_placements(stage_depths: tuple[int, ...], depth_divisor: int = 4) -> list[tuple[int, int]]:
    """Late-stage adapter attachment: last ceil(4/divisor) layers of stage 3
    plus every layer of stage 4. Layer indices are 1-based."""
    n3 = min(math.ceil(4 / depth_divisor), stage_depths[2])
    placements = [(3, stage_depths[2] - n3 + 1 + i) for i in range(n3)]
    placements += [(4, i + 1) for i in range(stage_depths[3])]
    return placements


def validate_placements(placements: list[tuple[int, int]], stage_depths: tuple[int, ...]) -> None:
    for stage, layer in placements:
        if not 1 <= stage <= 4:
            raise InvalidPlacement(f"stage {stage} out of range")
        if not 1 <= layer <= stage_depths[stage - 1]:
            raise InvalidPlacement(
                f"layer {layer} out of range for stage {stage} "
                f"(depth {stage_depths[stage - 1]})")


@dataclass
class StageFeatures:
    """Per-layer token maps, keyed by 1-based (stage, layer)."""

    per_layer: dict[tuple[int, int], np.ndarray]
    grids: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def at(self, stage: int, layer: int) -> np.ndarray:
        return self.per_layer[(stage, layer)]


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _special.erf(x / np.sqrt(2.0, dtype=x.dtype)))


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.maximum(np.sqrt((xc * xc).mean(axis=-1, keepdims=True)), x.dtype.type(1e-6))
    return xc / sigma * gamma + beta


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Backbone:
    """Seeded, frozen encoder. Forward is a pure function of (weights, image)."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.weights: dict[str, np.ndarray] = {}
        self._bias_index = {}
        rng = np.random.default_rng(config.weight_seed)
        self._build(rng)

    # -- construction --------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.weights[name] = np.ascontiguousarray(arr, dtype=DTYPE)

    def _linear_init(self, rng, d_in, d_out):
        return rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        p = cfg.patch_size
        self._add("patch.w", self._linear_init(rng, p * p * 3, cfg.base_channels))
        self._add("patch.b", np.zeros(cfg.base_channels))
        for s in range(1, 5):
            side, _, c = cfg.stage_dims(s)
            win = min(cfg.window_size, side)
            self._bias_index[s] = relative_bias_index(win)
            heads = cfg.heads[s - 1]
            hidden = int(round(c * cfg.mlp_ratio))
            for l in range(1, cfg.stage_depths[s - 1] + 1):
                pre = f"s{s}.l{l}"
                self._add(f"{pre}.norm1.gamma", np.ones(c))
                self._add(f"{pre}.norm1.beta", np.zeros(c))
                self._add(f"{pre}.qkv.w", self._linear_init(rng, c, 3 * c))
                self._add(f"{pre}.qkv.b", np.zeros(3 * c))
                self._add(f"{pre}.proj.w", self._linear_init(rng, c, c))
                self._add(f"{pre}.proj.b", np.zeros(c))
                self._add(f"{pre}.bias_table", rng.standard_normal(((2 * win - 1) ** 2, heads)) * 0.02)
                self._add(f"{pre}.norm2.gamma", np.ones(c))
                self._add(f"{pre}.norm2.beta", np.zeros(c))
                self._add(f"{pre}.mlp.fc1.w", self._linear_init(rng, c, hidden))
                self._add(f"{pre}.mlp.fc1.b", np.zeros(hidden))
                self._add(f"{pre}.mlp.fc2.w", self._linear_init(rng, hidden, c))
                self._add(f"{pre}.mlp.fc2.b", np.zeros(c))
            if s < 4:
                self._add(f"merge{s}.norm.gamma", np.ones(4 * c))
                self._add(f"merge{s}.norm.beta", np.zeros(4 * c))
                self._add(f"merge{s}.w", self._linear_init(rng, 4 * c, 2 * c))

    # -- forward -------------------------------------------------------
    def patch_embed(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) images in [-1, 1] -> (B, hw, C) stage-1 tokens."""
        cfg = self.config
        b, h, w, ch = images.shape
        if h != cfg.image_size or w != cfg.image_size or ch != 3:
            raise DimensionMismatch(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
        p = cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, ch)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * ch)
        return x.astype(DTYPE) @ self.weights["patch.w"] + self.weights["patch.b"]

    def _window_attention(self, x: np.ndarray, stage: int, layer: int) -> np.ndarray:
        cfg = self.config
        side = cfg.grid_side(stage)
        c = cfg.stage_channels(stage)
        win = min(cfg.window_size, side)
        heads = cfg.heads[stage - 1]
        dh = c // heads
        b = x.shape[0]
        nw = side // win
        pre = f"s{stage}.l{layer}"
        xw = x.reshape(b, nw, win, nw, win, c).transpose(0, 1, 3, 2, 4, 5)
        xw = xw.reshape(b * nw * nw, win * win, c)
        qkv = xw @ self.weights[f"{pre}.qkv.w"] + self.weights[f"{pre}.qkv.b"]
        qkv = qkv.reshape(-1, win * win, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = q @ k.swapaxes(-1, -2) / np.sqrt(dh, dtype=DTYPE)
        bias = self.weights[f"{pre}.bias_table"][self._bias_index[stage]]
        logits = logits + bias.reshape(win * win, win * win, heads).transpose(2, 0, 1)
        out = _softmax(logits) @ v
        out = out.transpose(0, 2, 1, 3).reshape(-1, win * win, c)
        out = out @ self.weights[f"{pre}.proj.w"] + self.weights[f"{pre}.proj.b"]
        out = out.reshape(b, nw, nw, win, win, c).transpose(0, 1, 3, 2, 4, 5)
        return out.reshape(b, side * side, c)

    def _block(self, x: np.ndarray, stage: int, layer: int) -> np.ndarray:
        pre = f"s{stage}.l{layer}"
        w = self.weights
        u = _layernorm(x, w[f"{pre}.norm1.gamma"], w[f"{pre}.norm1.beta"])
        x = x + self._window_attention(u, stage, layer)
        u = _layernorm(x, w[f"{pre}.norm2.gamma"], w[f"{pre}.norm2.beta"])
        h = _gelu(u @ w[f"{pre}.mlp.fc1.w"] + w[f"{pre}.mlp.fc1.b"])
        return x + (h @ w[f"{pre}.mlp.fc2.w"] + w[f"{pre}.mlp.fc2.b"])

    def _merge(self, x: np.ndarray, stage: int) -> np.ndarray:
        cfg = self.config
        side = cfg.grid_side(stage)
        c = cfg.stage_channels(stage)
        b = x.shape[0]
        x = x.reshape(b, side // 2, 2, side // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (side // 2) ** 2, 4 * c)
        w = self.weights
        x = _layernorm(x, w[f"merge{stage}.norm.gamma"], w[f"merge{stage}.norm.beta"])
        return x @ w[f"merge{stage}.w"]

    def encoder_forward(self, images: np.ndarray) -> StageFeatures:
        """Run all four stages, capturing the token map after every layer."""
        cfg = self.config
        per_layer: dict[tuple[int, int], np.ndarray] = {}
        x = self.patch_embed(images)
        for s in range(1, 5):
            for l in range(1, cfg.stage_depths[s - 1] + 1):
                x = self._block(x, s, l)
                per_layer[(s, l)] = x
            if s < 4:
                x = self._merge(x, s)
        grids = {s: cfg.stage_dims(s) for s in range(1, 5)}
        return StageFeatures(per_layer=per_layer, grids=grids)

    # -- adapter support ----------------------------------------------
    def norm_params(self, stage: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """The frozen gamma'/beta' the adapter's TSN inherits at a placement."""
        pre = f"s{stage}.l{layer}"
        return self.weights[f"{pre}.norm2.gamma"], self.weights[f"{pre}.norm2.beta"]

    def parameter_count(self) -> int:
        return sum(a.size for a in self.weights.values())

    def fingerprint(self) -> str:
        """SHA-256 over all weights in name order (frozen-ness checks)."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()


def attach_adapters(backbone: Backbone, placements: list[tuple[int, int]] | None,
                    depth_divisor: int = 4) -> list[tuple[int, int]]:
    """Validate (or derive) adapter placements against the backbone depths."""
    if placements is None:
        placements = default_placements(backbone.config.stage_depths, depth_divisor)
    validate_placements(placements, backbone.config.stage_depths)
    return sorted(placements)
