"""Independent oracles and the finite-difference gradient-check harness.

Everything here re-derives results straight from the printed formulas —
naive loops, double or extended precision, no code shared with the
production paths — so tests can compare the two routes. The gradcheck
fixtures at the bottom are what ``taskadapt gradcheck`` runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    group: str
    max_rel_error: float
    step: float
    fixture_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max())


def finite_difference_gradcheck(fn, params: dict[str, Tensor], step: float = 1e-5,
                                group: str = "", fixture_seed: int = 0,
                                floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued ``fn`` to central differences.

    ``fn`` takes no arguments and rebuilds its computation from the
    current values of ``params`` (a name -> Tensor mapping, float64 for
    meaningful tolerances). Every parameter entry is perturbed
    individually; the report carries the worst relative error with
    denominator max(|analytic|, |numeric|, floor).

    ``floor`` marks the scale below which central differences are
    roundoff-dominated: the difference quotient of a scalar of magnitude
    F carries absolute noise around eps * F / step (~1e-9 for F ~ 100 at
    the default step), so entries whose true gradient sits near that
    noise cannot be compared relatively and are held to an absolute
    standard of ``floor`` times the reported tolerance instead.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError("step outside the supported [1e-6, 1e-4] range")
    for p in params.values():
        p.grad = None
    out = fn()
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), floor)
            worst = max(worst, rel)
    return GradCheckReport(group=group, max_rel_error=worst, step=step,
                           fixture_seed=fixture_seed)


# -- closed-form oracles ----------------------------------------------


def mirror_descent_oracle(omega: np.ndarray, sim: np.ndarray, kappa: float,
                          sign: str = "paper_negative") -> np.ndarray:
    """Naive direct evaluation of the multiplicative update, extended precision.

    No log-space rearrangement; exponents are clamped at +-600 so the
    oracle stays defined where float exp would overflow.
    """
    omega = np.asarray(omega, dtype=np.longdouble)
    sim = np.asarray(sim, dtype=np.longdouble)
    s = np.longdouble(-1.0 if sign == "paper_negative" else 1.0)
    expo = np.clip(s * np.longdouble(kappa) * sim, -600.0, 600.0)
    w = omega * np.exp(expo)
    return (w / w.sum()).astype(np.float64)


def attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     a_prime: np.ndarray | None = None) -> np.ndarray:
    """Direct double-precision attention: softmax[A' + q k^T / sqrt(c)] v.

    Plain per-row loops; pass ``a_prime=None`` for the unmodulated case.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    hw, c = q.shape
    logits = np.zeros((hw, hw), dtype=np.float64)
    for i in range(hw):
        for j in range(hw):
            logits[i, j] = float(np.dot(q[i], k[j])) / np.sqrt(c)
            if a_prime is not None:
                logits[i, j] += a_prime[i, j]
    out = np.zeros((hw, c), dtype=np.float64)
    for i in range(hw):
        row = np.exp(logits[i] - logits[i].max())
        attn = row / row.sum()
        for j in range(hw):
            out[i] += attn[j] * v[j]
    return out


def film_oracle(a: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise A'[i][j] = A[i][j] * g[i] + b[i]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = a[i, j] * float(g[i]) + float(b[i])
    return out


def tsn_oracle(a_t: np.ndarray, gamma_t: np.ndarray, beta_t: np.ndarray,
               gamma_prime: np.ndarray, beta_prime: np.ndarray) -> np.ndarray:
    """Direct per-token evaluation of the task-scaled normalization formula.

    ``gamma_t``/``beta_t`` are the already-generated per-channel vectors;
    statistics are taken over channels of ``a_t`` with the documented
    1e-6 std floor.
    """
    a_t = np.asarray(a_t, dtype=np.float64)
    ghat = np.asarray(gamma_prime, dtype=np.float64) * np.asarray(gamma_t, dtype=np.float64) \
        + np.asarray(beta_prime, dtype=np.float64)
    out = np.zeros_like(a_t)
    for i in range(a_t.shape[0]):
        row = a_t[i]
        mu = row.mean()
        sigma = max(np.sqrt(((row - mu) ** 2).mean()), 1e-6)
        out[i] = (row - mu) / sigma * ghat + np.asarray(beta_t, dtype=np.float64)
    return out


def normals_from_depth_fd(depth: np.ndarray, spacing: float) -> np.ndarray:
    """Unit normals recovered from a depth map by central finite differences.

    Mirrors the rendering convention: n is proportional to
    (d_depth/dx, d_depth/dy, 1), so a flat surface maps to (0, 0, 1).
    Rows index y, columns index x.
    """
    depth = np.asarray(depth, dtype=np.float64)
    dy, dx = np.gradient(depth, spacing)
    n = np.stack([dx, dy, np.ones_like(depth)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def angular_error_deg(n_a: np.ndarray, n_b: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between two unit-normal fields."""
    dot = np.clip((np.asarray(n_a, dtype=np.float64)
                   * np.asarray(n_b, dtype=np.float64)).sum(axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


# -- gradcheck fixtures (consumed by tests and `taskadapt gradcheck`) --

GRADCHECK_MODULES = ("taa", "tsn", "adapter", "losses")


def run_gradcheck(module: str, seed: int = 0, step: float = 1e-5,
                  corrupt: bool = False) -> list[GradCheckReport]:
    """Build the named fixture in float64 and gradcheck every parameter.

    ``corrupt`` perturbs one analytic gradient path on purpose (negative
    control for the harness); real runs leave it False.
    """
    if module == "taa":
        return [_gradcheck_taa(seed, step, corrupt)]
    if module == "tsn":
        return [_gradcheck_tsn(seed, step, corrupt)]
    if module == "adapter":
        return [_gradcheck_adapter(seed, step, corrupt)]
    if module == "losses":
        return _gradcheck_losses(seed, step, corrupt)
    raise ValueError(f"unknown gradcheck module: {module!r} (choose from {GRADCHECK_MODULES})")


def _corrupt_scalar(out: Tensor, params: dict[str, Tensor], enabled: bool):
    """Deliberately bias the analytic gradient of the first parameter."""
    if not enabled:
        return out
    from . import autodiff as ad
    first = next(iter(params.values()))
    # adds a term whose analytic gradient is dropped via stop_grad mismatch:
    # value unchanged at the current point, gradient off by 0.5.
    delta = ad.mul(ad.sub(first, ad.stop_grad(first)), 0.5)
    return ad.add(out, ad.reduce_sum(delta))


def _gradcheck_taa(seed: int, step: float, corrupt: bool) -> GradCheckReport:
    from . import autodiff as ad
    from .taa import MultiHeadTAA
    from .layers import ParamStore
    from .affinity import AffinityMatrix

    rng = np.random.default_rng(seed)
    hw, c, heads, n_tasks = 4, 8, 2, 3
    store = ParamStore()
    layer = MultiHeadTAA(store, "taa", hw=hw, channels=c, heads=heads,
                         n_tasks=n_tasks, rng=rng, dtype=np.float64)
    # non-degenerate FiLM outputs: overwrite the zero-init output layers
    for name, t in store.items():
        if t.data.size and (".g2." in name or ".b2." in name):
            t.data = rng.standard_normal(t.data.shape) * 0.3
    x = Tensor(rng.standard_normal((1, hw, c)))
    aff = AffinityMatrix(np.abs(rng.dirichlet(np.ones(n_tasks), size=n_tasks)).T)
    omega = aff.column(1)
    params = dict(store.items())

    def fn():
        out = layer(x, omega, task=1)
        return ad.reduce_sum(ad.mul(out, out))

    def wrapped():
        return _corrupt_scalar(fn(), params, corrupt)

    return finite_difference_gradcheck(wrapped, params, step=step, group="taa",
                                       fixture_seed=seed)


def _gradcheck_tsn(seed: int, step: float, corrupt: bool) -> GradCheckReport:
    from . import autodiff as ad
    from .adapter import TaskScaledNorm
    from .layers import ParamStore

    rng = np.random.default_rng(seed)
    hw, c, n_tasks = 3, 4, 2
    store = ParamStore()
    gamma_prime = rng.standard_normal(c) * 0.5 + 1.0
    beta_prime = rng.standard_normal(c) * 0.1
    tsn = TaskScaledNorm(store, "tsn", channels=c, n_tasks=n_tasks,
                         gamma_prime=gamma_prime, beta_prime=beta_prime,
                         rng=rng, dtype=np.float64)
    for name, t in store.items():
        if ".g2." in name or ".b2." in name:
            t.data = rng.standard_normal(t.data.shape) * 0.3
    a_t = Tensor(rng.standard_normal((1, hw, c)))
    omega_tilde = Tensor(rng.standard_normal((1, hw, c)))
    params = dict(store.items())

    def fn():
        out = tsn(a_t, omega_tilde, task=0)
        return ad.reduce_sum(ad.mul(out, out))

    def wrapped():
        return _corrupt_scalar(fn(), params, corrupt)

    return finite_difference_gradcheck(wrapped, params, step=step, group="tsn",
                                       fixture_seed=seed)


def _gradcheck_adapter(seed: int, step: float, corrupt: bool) -> GradCheckReport:
    from . import autodiff as ad
    from .adapter import AdapterBlock, AdapterLayerConfig
    from .affinity import AffinityMatrix
    from .layers import ParamStore

    rng = np.random.default_rng(seed)
    hw, c, n_tasks = 4, 8, 2
    store = ParamStore()
    cfg = AdapterLayerConfig(channels=c, hw=hw, heads=2, n_tasks=n_tasks,
                             bottleneck_dim=2, ffn_hidden=6,
                             use_taa=True, use_tsn=True, use_bottleneck=True)
    gamma_prime = rng.standard_normal(c) * 0.5 + 1.0
    beta_prime = rng.standard_normal(c) * 0.1
    block = AdapterBlock(store, "blk", cfg, gamma_prime, beta_prime, rng,
                         dtype=np.float64)
    # break the zero-init symmetry so every parameter has nonzero gradient
    for name, t in store.items():
        if (".g2." in name or ".b2." in name or name.endswith("up.w")):
            t.data = rng.standard_normal(t.data.shape) * 0.3
    x = Tensor(rng.standard_normal((1, hw, c)))
    aff = AffinityMatrix(np.abs(rng.dirichlet(np.ones(n_tasks), size=n_tasks)).T)
    params = dict(store.items())

    def fn():
        outs = block(x, None, aff)
        total = None
        for o in outs:
            s = ad.reduce_sum(ad.mul(o, o))
            total = s if total is None else ad.add(total, s)
        return total

    def wrapped():
        return _corrupt_scalar(fn(), params, corrupt)

    return finite_difference_gradcheck(wrapped, params, step=step, group="adapter",
                                       fixture_seed=seed)


def _gradcheck_losses(seed: int, step: float, corrupt: bool) -> list[GradCheckReport]:
    from .decoders import task_loss
    from .model import default_task_specs

    rng = np.random.default_rng(seed)
    h = w = 4
    k_seg = 4
    specs = {s.name: s for s in default_task_specs(k_seg=k_seg)}
    reports = []

    fixtures = {
        "segmentation": ((h, w, k_seg), rng.integers(0, k_seg, size=(h, w))),
        "depth": ((h, w, 1), rng.uniform(0.2, 1.0, size=(h, w, 1))),
        "normal": ((h, w, 3), _random_unit(rng, h, w)),
        "edge": ((h, w, 1), (rng.random((h, w, 1)) > 0.7).astype(np.float64)),
    }
    for name, (pshape, gt) in fixtures.items():
        pred = Tensor(rng.standard_normal(pshape) * 0.5 + 0.5, requires_grad=True)
        params = {f"{name}.pred": pred}
        spec = specs[name]

        def fn(pred=pred, gt=gt, spec=spec):
            return task_loss(pred, gt, spec)

        def wrapped(fn=fn, params=params):
            return _corrupt_scalar(fn(), params, corrupt)

        reports.append(finite_difference_gradcheck(
            wrapped, params, step=step, group=f"loss.{name}", fixture_seed=seed))
    return reports


def _random_unit(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    v = rng.standard_normal((h, w, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
