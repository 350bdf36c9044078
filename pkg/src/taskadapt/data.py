"""ShapeWorld: procedural scenes with analytically exact dense labels.

A scene is 1-6 height-field primitives (sphere-cap circles, dome
rectangles, tilted-plane triangles) floating in front of a flat
background plane. Depth composites by z-buffer minimum; segmentation is
the topmost primitive's class; normals come from the analytic height
gradient (never from the rendered depth); edges are pixels whose
depth Sobel magnitude clears a fixed threshold.

Geometry lives in unit coordinates (the image spans [0, 1) on both
axes, depths in the same units), so surface slopes translate into
meaningful normal tilts. Primitive slopes are capped at ~1.2, keeping
interior Sobel response under half the edge threshold, while the
smallest primitive-to-background depth step clears it about twice over;
occlusions between primitives with small depth gaps may legitimately
produce no edge.

Domain "B" shifts the texture palette, the size distribution, and the
primitive-kind/count frequencies relative to "A" while sharing the
class vocabulary, giving the cross-domain evaluation its shift.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

EDGE_THRESHOLD = 0.30
Z_BACKGROUND = 0.95
LIGHT_DIR = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
SLOPE_CAP = 1.2

DEPTH_MAGIC = b"SWDEPTH1"
NORMAL_MAGIC = b"SWNORM01"

# fixed label palette for seg.png dumps (index = class id), domain-independent
LABEL_PALETTE = np.array([
    [0, 0, 0], [230, 60, 60], [60, 180, 75], [65, 105, 225],
    [240, 190, 40], [170, 80, 200], [0, 190, 190], [250, 130, 30],
], dtype=np.uint8)


@dataclass
class DomainParams:
    count_probs: tuple[float, ...]
    kind_probs: tuple[float, float, float]  # circle, rectangle, triangle
    size_range: tuple[float, float]
    flat_prob: float
    class_colors: tuple[tuple[float, float, float], ...]
    bg_colors: tuple[tuple[float, float, float], tuple[float, float, float]]


DOMAINS: dict[str, DomainParams] = {
    "A": DomainParams(
        count_probs=(0.10, 0.20, 0.25, 0.20, 0.15, 0.10),
        kind_probs=(1 / 3, 1 / 3, 1 / 3),
        size_range=(0.10, 0.22),
        flat_prob=0.15,
        class_colors=((0.85, 0.25, 0.25), (0.25, 0.70, 0.30), (0.25, 0.40, 0.85),
                      (0.90, 0.75, 0.20), (0.65, 0.30, 0.75)),
        bg_colors=((0.32, 0.36, 0.42), (0.45, 0.49, 0.55)),
    ),
    "B": DomainParams(
        count_probs=(0.05, 0.10, 0.20, 0.25, 0.25, 0.15),
        kind_probs=(0.45, 0.35, 0.20),
        size_range=(0.08, 0.17),
        flat_prob=0.25,
        class_colors=((0.75, 0.35, 0.20), (0.35, 0.60, 0.20), (0.20, 0.50, 0.70),
                      (0.80, 0.60, 0.30), (0.55, 0.25, 0.55)),
        bg_colors=((0.42, 0.38, 0.33), (0.55, 0.50, 0.44)),
    ),
}

_DOMAIN_ID = {"A": 0, "B": 1}


@dataclass
class Primitive:
    kind: str  # circle | rectangle | triangle
    class_id: int
    cx: float
    cy: float
    sx: float
    sy: float
    z: float
    amp: float
    angle1: float = 0.0  # triangle orientation
    angle2: float = 0.0  # triangle ramp azimuth


@dataclass
class Background:
    freq_x: float
    freq_y: float
    phase: float


@dataclass
class SceneSpec:
    seed: int
    domain: str
    primitives: list[Primitive]
    background: Background

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    seg: np.ndarray     # (H, W) int32
    depth: np.ndarray   # (H, W) float32, positive
    normal: np.ndarray  # (H, W, 3) float32, unit
    edge: np.ndarray    # (H, W) uint8 in {0, 1}


def generate_scene(seed: int, domain: str) -> SceneSpec:
    """Deterministic scene draw; same (seed, domain) -> identical spec."""
    params = DOMAINS[domain]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _DOMAIN_ID[domain]]))
    n = int(rng.choice(np.arange(1, 7), p=params.count_probs))
    # stratified depth layers with a guaranteed minimum gap, randomly assigned
    slots = (np.arange(n) + 0.2 + 0.6 * rng.random(n)) / n
    z_values = 0.30 + 0.50 * slots
    z_values = z_values[rng.permutation(n)]
    prims = []
    for i in range(n):
        kind = str(rng.choice(["circle", "rectangle", "triangle"], p=params.kind_probs))
        class_id = int(rng.integers(1, len(params.class_colors) + 1))
        cx, cy = rng.uniform(0.18, 0.82, size=2)
        lo, hi = params.size_range
        flat = rng.random() < params.flat_prob
        angle1 = angle2 = 0.0
        if kind == "circle":
            r = rng.uniform(lo, hi)
            sx = sy = r
            amp = 0.0 if flat else rng.uniform(0.25, 0.45) * r
        elif kind == "rectangle":
            sx = rng.uniform(lo, hi) * rng.uniform(0.7, 1.0)
            sy = rng.uniform(lo, hi) * rng.uniform(0.7, 1.0)
            amp = 0.0 if flat else rng.uniform(0.25, 0.55) * min(sx, sy)
        else:
            r = rng.uniform(lo, hi)
            sx = sy = r
            angle1 = rng.uniform(0, 2 * np.pi)
            angle2 = rng.uniform(0, 2 * np.pi)
            amp = 0.0 if flat else rng.uniform(0.15, 0.45) * r * 0.5
        prims.append(Primitive(kind, class_id, float(cx), float(cy), float(sx),
                               float(sy), float(z_values[i]), float(amp),
                               float(angle1), float(angle2)))
    bg = Background(freq_x=float(rng.uniform(0.8, 2.5)),
                    freq_y=float(rng.uniform(0.8, 2.5)),
                    phase=float(rng.uniform(0, 2 * np.pi)))
    return SceneSpec(seed=int(seed), domain=domain, primitives=prims, background=bg)


def _height_field(p: Primitive, xg: np.ndarray, yg: np.ndarray):
    """(mask, h, hx, hy) for one primitive on the coordinate grids."""
    xt = xg - p.cx
    yt = yg - p.cy
    if p.kind == "circle":
        rho2 = xt * xt + yt * yt
        mask = rho2 <= p.sx * p.sx
        if p.amp <= 0:
            z = np.zeros_like(xg)
            return mask, z, z, z
        r, a = p.sx, p.amp
        big_r = (r * r + a * a) / (2.0 * a)  # sphere through rim (h=0) and apex (h=a)
        s = np.sqrt(np.maximum(big_r * big_r - rho2, 1e-12))
        h = np.where(mask, s - (big_r - a), 0.0)
        hx = np.where(mask, -xt / s, 0.0)
        hy = np.where(mask, -yt / s, 0.0)
        return mask, h, hx, hy
    if p.kind == "rectangle":
        u = xt / p.sx
        v = yt / p.sy
        mask = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        if p.amp <= 0:
            z = np.zeros_like(xg)
            return mask, z, z, z
        uu = 1.0 - u * u
        vv = 1.0 - v * v
        h = np.where(mask, p.amp * uu * vv, 0.0)
        hx = np.where(mask, -2.0 * p.amp * u * vv / p.sx, 0.0)
        hy = np.where(mask, -2.0 * p.amp * v * uu / p.sy, 0.0)
        return mask, h, hx, hy
    # triangle: flat or uniformly tilted plane over an equilateral footprint
    r = p.sx
    angles = p.angle1 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx = p.cx + r * np.cos(angles)
    vy = p.cy + r * np.sin(angles)
    mask = np.ones_like(xg, dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yg - vy[i]) - (vy[j] - vy[i]) * (xg - vx[i])
        mask &= cross >= 0.0
    if p.amp <= 0:
        z = np.zeros_like(xg)
        return mask, z, z, z
    gx = (p.amp / r) * np.cos(p.angle2)
    gy = (p.amp / r) * np.sin(p.angle2)
    h = np.where(mask, p.amp + gx * xt + gy * yt, 0.0)
    hx = np.where(mask, gx, 0.0)
    hy = np.where(mask, gy, 0.0)
    return mask, np.maximum(h, 0.0), hx, hy


def render_sample(spec: SceneSpec, h: int, w: int, with_aux: bool = False):
    """Rasterize a scene; pure function of (spec, h, w).

    With ``with_aux`` also returns {"winner": (H, W) int index into
    [background] + primitives, "boundary": winner-transition pixels}.
    """
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    xg, yg = np.meshgrid(xs, ys)

    n_layers = len(spec.primitives) + 1
    depth_stack = np.full((n_layers, h, w), np.inf)
    depth_stack[0] = Z_BACKGROUND
    grads = np.zeros((n_layers, 2, h, w))
    classes = np.zeros(n_layers, dtype=np.int32)
    for i, p in enumerate(spec.primitives, start=1):
        mask, hf, hx, hy = _height_field(p, xg, yg)
        depth_stack[i] = np.where(mask, p.z - hf, np.inf)
        grads[i, 0] = hx
        grads[i, 1] = hy
        classes[i] = p.class_id

    winner = depth_stack.argmin(axis=0)
    depth = depth_stack.min(axis=0)
    seg = classes[winner]
    take = np.take_along_axis
    hx = take(grads[:, 0], winner[None], axis=0)[0]
    hy = take(grads[:, 1], winner[None], axis=0)[0]
    # depth = z - h, so d(depth)/dx = -hx; flat surfaces map to (0, 0, 1)
    nvec = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    nvec = nvec / np.linalg.norm(nvec, axis=-1, keepdims=True)

    gx = ndimage.sobel(depth, axis=1, mode="nearest")
    gy = ndimage.sobel(depth, axis=0, mode="nearest")
    edge = (np.hypot(gx, gy) > EDGE_THRESHOLD).astype(np.uint8)

    params = DOMAINS[spec.domain]
    bg0 = np.array(params.bg_colors[0])
    bg1 = np.array(params.bg_colors[1])
    mix = 0.5 + 0.5 * np.sin(2 * np.pi * (spec.background.freq_x * xg
                                          + spec.background.freq_y * yg)
                             + spec.background.phase)
    base = bg0[None, None, :] * (1.0 - mix[..., None]) + bg1[None, None, :] * mix[..., None]
    colors = np.array(params.class_colors)
    prim_mask = winner > 0
    base[prim_mask] = colors[seg[prim_mask] - 1]

    lambert = 0.55 + 0.45 * np.maximum(nvec @ LIGHT_DIR, 0.0)
    fog = np.clip(1.25 - 0.5 * depth, 0.0, 1.0)
    image = np.clip(base * (lambert * fog)[..., None], 0.0, 1.0)

    sample = Sample(image=image.astype(np.float32),
                    seg=seg.astype(np.int32),
                    depth=depth.astype(np.float32),
                    normal=nvec.astype(np.float32),
                    edge=edge)
    if not with_aux:
        return sample
    boundary = np.zeros((h, w), dtype=bool)
    boundary[:, 1:] |= winner[:, 1:] != winner[:, :-1]
    boundary[:, :-1] |= winner[:, 1:] != winner[:, :-1]
    boundary[1:, :] |= winner[1:, :] != winner[:-1, :]
    boundary[:-1, :] |= winner[1:, :] != winner[:-1, :]
    return sample, {"winner": winner, "boundary": boundary}


# -- splits and batching ----------------------------------------------

_SPLIT_BASE = {"train": 0, "val": 500_000, "test": 600_000}


def split_seed(split: str, domain: str, index: int) -> int:
    """Disjoint deterministic seed ranges per (split, domain)."""
    if split not in _SPLIT_BASE:
        raise ValueError(f"unknown split {split!r}")
    return 1_000_000 * _DOMAIN_ID[domain] + _SPLIT_BASE[split] + index


class ShapeWorldDataset:
    """An eagerly rendered split held in memory as stacked arrays."""

    def __init__(self, split: str, domain: str, count: int, image_size: int):
        self.split, self.domain, self.count = split, domain, count
        self.image_size = image_size
        self.seeds = [split_seed(split, domain, i) for i in range(count)]
        samples = [render_sample(generate_scene(s, domain), image_size, image_size)
                   for s in self.seeds]
        self.images = np.stack([s.image for s in samples])
        self.seg = np.stack([s.seg for s in samples])
        self.depth = np.stack([s.depth for s in samples])[..., None]
        self.normal = np.stack([s.normal for s in samples])
        self.edge = np.stack([s.edge for s in samples]).astype(np.float32)[..., None]

    def __len__(self) -> int:
        return self.count

    def targets(self, name: str, idx: np.ndarray) -> np.ndarray:
        if name == "segmentation":
            return self.seg[idx]
        if name == "depth":
            return self.depth[idx]
        if name == "normal":
            return self.normal[idx]
        if name == "edge":
            return self.edge[idx]
        raise KeyError(name)


# -- on-disk dump ------------------------------------------------------


def save_depth_f32(path, depth: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth_f32(path, h: int, w: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth header {raw[:8]!r}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).copy()


def save_normal_f32(path, normal: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(NORMAL_MAGIC)
        fh.write(np.ascontiguousarray(normal, dtype="<f4").tobytes())


def load_normal_f32(path, h: int, w: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != NORMAL_MAGIC:
        raise ValueError(f"{path}: bad normal header {raw[:8]!r}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w, 3).copy()


def dump_dataset(out_dir, domain: str, count: int, seed_start: int = 0,
                 image_size: int = 64) -> Path:
    """Write ``count`` samples + manifest.json under ``out_dir``; returns it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed_start + i for i in range(count)]
    for i, seed in enumerate(seeds):
        spec = generate_scene(seed, domain)
        sample = render_sample(spec, image_size, image_size)
        d = out / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        Image.fromarray((sample.image * 255.0 + 0.5).astype(np.uint8)).save(d / "image.png")
        seg_img = Image.fromarray(sample.seg.astype(np.uint8), mode="P")
        seg_img.putpalette(LABEL_PALETTE.reshape(-1).tolist())
        seg_img.save(d / "seg.png")
        save_depth_f32(d / "depth.f32", sample.depth)
        save_normal_f32(d / "normal.f32", sample.normal)
        Image.fromarray(sample.edge * np.uint8(255), mode="L").save(d / "edge.png")
    manifest = {
        "format": "shapeworld-v1",
        "domain": domain,
        "count": count,
        "seed_start": seed_start,
        "seeds": seeds,
        "image_size": image_size,
        "domain_params": asdict(DOMAINS[domain]),
        "edge_threshold": EDGE_THRESHOLD,
        "z_background": Z_BACKGROUND,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out
