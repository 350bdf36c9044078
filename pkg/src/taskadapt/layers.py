"""Trainable building blocks on top of the autodiff tape.

Parameters live in a ``ParamStore`` (an ordered name -> Tensor mapping)
so checkpointing, optimizers, and parameter counting all walk the same
registry. Frozen backbone weights deliberately do not use these classes;
the backbone runs outside the tape (see ``backbone.py``).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch

DTYPE = np.float32


class ParamStore:
    """Ordered registry of trainable tensors, keyed by dotted names."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def tensors(self):
        return list(self._entries.values())

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (shapes must match)."""
        for k, t in self._entries.items():
            src = arrays[k]
            if src.shape != t.data.shape:
                raise DimensionMismatch(f"{k}: {src.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=t.data.dtype)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: t for k, t in self._entries.items() if k.startswith(prefix)}


def normal_init(rng: np.random.Generator, shape, std: float, dtype=DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def lecun_init(rng: np.random.Generator, shape, dtype=DTYPE) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)


class Linear:
    """Affine map on the last axis; weight stored (d_in, d_out).

    ``std=None`` selects fan-in (scale-preserving) init for layers on
    the main signal path; the small fixed default suits residual
    branches that should start near identity.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, std: float | None = 0.02,
                 zero: bool = False, bias: bool = True, dtype=DTYPE):
        if zero:
            w = np.zeros((d_in, d_out), dtype=dtype)
        elif std is None:
            w = lecun_init(rng, (d_in, d_out), dtype)
        else:
            w = normal_init(rng, (d_in, d_out), std, dtype)
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(d_out, dtype=dtype)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionMismatch(f"linear expects {self.d_in} channels, got {x.shape[-1]}")
        if self.b is not None:
            return ad.affine(x, self.w, self.b)
        return ad.matmul(x, self.w)


class LayerNorm:
    """Standard trainable layer norm over the last axis (std floored at 1e-6)."""

    def __init__(self, store: ParamStore, name: str, dim: int, dtype=DTYPE):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(dim, dtype=dtype))
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.standardize(x)
        return ad.add(ad.mul(y, self.gamma), self.beta)


class Mlp:
    """Two-layer feed-forward with GELU; optionally zero-initialized output."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int,
                 d_out: int, rng: np.random.Generator, std: float = 0.02,
                 zero_out: bool = False, dtype=DTYPE):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, hidden, rng, std=std, dtype=dtype)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d_out, rng, std=std,
                          zero=zero_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


# -- token grid plumbing (tape-traced reshapes) ------------------------


def window_partition(x: Tensor, h: int, w: int, win: int) -> Tensor:
    """(B, h*w, C) -> (B*windows, win*win, C) over non-overlapping tiles."""
    b, hw, c = x.shape
    if hw != h * w or h % win or w % win:
        raise DimensionMismatch(f"cannot tile {h}x{w} tokens with window {win}")
    x = ad.reshape(x, (b, h // win, win, w // win, win, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * (h // win) * (w // win), win * win, c))


def window_reverse(x: Tensor, h: int, w: int, win: int, batch: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = x.shape[-1]
    x = ad.reshape(x, (batch, h // win, w // win, win, win, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (batch, h * w, c))


def merge_2x2(x: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) -> (B, h/2*w/2, 4C): fixed spatial 2x2 concatenation.

    Child order along channels is row-major within each 2x2 tile
    (top-left, top-right, bottom-left, bottom-right).
    """
    b, hw, c = x.shape
    if hw != h * w or h % 2 or w % 2:
        raise DimensionMismatch(f"cannot 2x2-merge a {h}x{w} grid")
    x = ad.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, (h // 2) * (w // 2), 4 * c))


def expand_2x2(x: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, 4c) -> (B, 2h*2w, c): inverse ordering of :func:`merge_2x2`."""
    b, hw, c4 = x.shape
    if hw != h * w or c4 % 4:
        raise DimensionMismatch("expand_2x2 needs h*w tokens and 4k channels")
    c = c4 // 4
    x = ad.reshape(x, (b, h, w, 2, 2, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, 2 * h * 2 * w, c))


def roll_grid(x: Tensor, h: int, w: int, shift: int) -> Tensor:
    """Cyclically shift a (B, h*w, C) token grid by ``shift`` rows and cols."""
    b, hw, c = x.shape
    x = ad.reshape(x, (b, h, w, c))
    x = ad.roll(x, (shift, shift), (1, 2))
    return ad.reshape(x, (b, h * w, c))


def take_rows_bias(table: Tensor, index: np.ndarray, tokens: int, heads: int) -> Tensor:
    """Gather a relative-position-bias table into (heads, tokens, tokens)."""
    bias = ad.take_rows(table, index)
    bias = ad.reshape(bias, (tokens, tokens, heads))
    return ad.transpose(bias, (2, 0, 1))


def relative_bias_index(win: int) -> np.ndarray:
    """Flat lookup indices into a (2*win-1)^2 bias table for a win x win grid."""
    coords = np.stack(np.meshgrid(np.arange(win), np.arange(win), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel + (win - 1)
    return (rel[0] * (2 * win - 1) + rel[1]).reshape(-1)
