"""Joint training of adapters and task decoders, with affinity updates.

The trainer owns all mutable state: trainable parameters, two Adam
optimizers (the main one over everything trainable, an inner one over
decoders+heads for the affinity procedure's inner loop), the affinity
state, and the shuffle RNG. Because the encoder is frozen, its token
maps at the adapter placements are computed once per dataset and cached;
training touches only the trainable side.

Every ``cadence`` steps (after a burn-in epoch) the trainer runs one
outer affinity iteration on the current batch and republishes the new
matrix to every adapter layer; the snapshot consumed by the attention
modulators at step s is always the most recent one produced at or
before s.

Logs are line-delimited JSON without timestamps, so identical
(config, seed) runs produce byte-identical logs. Checkpoints are a
single file: magic, length-prefixed JSON header, then raw little-endian
tensor payloads in header order.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .affinity import AffinityMatrix, TroaState, save_affinity_csv, troa_step
from .config import TrainConfig, config_from_dict
from .data import ShapeWorldDataset
from .errors import ConfigError, NonFiniteLoss
from .metrics import (AngleAccumulator, EdgeAccumulator, MetricsReport,
                      RmseAccumulator, SegAccumulator)
from .model import MultitaskAdapterModel
from .optim import Adam, clip_global_norm, warmup_cosine_lr

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TACKPT01"
ABLATION_RUNGS = ("vanilla", "taa", "bottleneck", "tsn")
RUNG_FLAGS = {
    "vanilla": {"use_taa": False, "use_tsn": False, "use_bottleneck": False},
    "taa": {"use_taa": True, "use_tsn": False, "use_bottleneck": False},
    "bottleneck": {"use_taa": True, "use_tsn": False, "use_bottleneck": True},
    "tsn": {"use_taa": True, "use_tsn": True, "use_bottleneck": True},
}


# -- dataset / feature cache ------------------------------------------


class DatasetCache:
    """Memoizes rendered splits and their frozen-encoder features.

    Datasets depend only on (split, domain, count, image_size); features
    additionally depend on the encoder weights and adapter placements,
    which the cache keys by fingerprint so unrelated models never share.
    """

    def __init__(self):
        self._sets: dict = {}
        self._feats: dict = {}

    def dataset(self, split: str, domain: str, count: int, image_size: int) -> ShapeWorldDataset:
        key = (split, domain, count, image_size)
        if key not in self._sets:
            self._sets[key] = ShapeWorldDataset(split, domain, count, image_size)
        return self._sets[key]

    def features(self, model: MultitaskAdapterModel, dataset: ShapeWorldDataset,
                 batch_size: int = 32) -> list[np.ndarray]:
        key = (dataset.split, dataset.domain, dataset.count, dataset.image_size,
               tuple(model.placements), model.backbone.fingerprint())
        if key not in self._feats:
            chunks: list[list[np.ndarray]] = [[] for _ in model.placements]
            for start in range(0, len(dataset), batch_size):
                feats = model.encode(dataset.images[start:start + batch_size])
                for i, f in enumerate(feats):
                    chunks[i].append(f)
            self._feats[key] = [np.concatenate(c, axis=0) for c in chunks]
        return self._feats[key]


def batch_targets(dataset: ShapeWorldDataset, idx: np.ndarray,
                  tasks) -> dict[str, np.ndarray]:
    return {spec.name: dataset.targets(spec.name, idx) for spec in tasks}


# -- evaluation --------------------------------------------------------


def evaluate_model(model: MultitaskAdapterModel, dataset: ShapeWorldDataset,
                   affinity: AffinityMatrix, features: list[np.ndarray] | None = None,
                   batch_size: int = 16, split: str = "val") -> tuple[MetricsReport, float]:
    """Full-split metrics + mean combined loss, deterministic in-order."""
    k = next(s.head_channels for s in model.tasks if s.name == "segmentation")
    seg = SegAccumulator(k)
    rmse = RmseAccumulator()
    angle = AngleAccumulator()
    edge = EdgeAccumulator()
    n = len(dataset)
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        feats = ([f[idx] for f in features] if features is not None
                 else model.encode(dataset.images[idx]))
        targets = batch_targets(dataset, idx, model.tasks)
        with ad.no_grad():
            preds, _ = model.forward_from_features(feats, affinity)
            _, total = model.losses(preds, targets)
        arrays = model.predict_arrays(preds)
        seg.update(arrays["segmentation"], dataset.seg[idx])
        rmse.update(arrays["depth"], dataset.depth[idx])
        angle.update(arrays["normal"], dataset.normal[idx])
        edge.update(arrays["edge"], dataset.edge[idx].astype(np.uint8))
        loss_sum += float(total.data) * len(idx)
    report = MetricsReport.from_accumulators(split, dataset.domain, seg, rmse, angle, edge)
    return report, loss_sum / max(n, 1)


# -- checkpoint container ----------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]
    epoch: int
    step: int
    adam_t: int
    inner_adam_t: int
    affinity: AffinityMatrix
    rng_state: dict
    config_hash: str


def save_checkpoint(path, *, config: TrainConfig, model: MultitaskAdapterModel,
                    optimizer: Adam, inner_optimizer: Adam, troa_state: TroaState,
                    rng_state: dict, epoch: int, step: int) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in model.backbone.weights.items():
        arrays[f"backbone.{name}"] = arr
    for name, tensor in model.store.items():
        arrays[f"param.{name}"] = tensor.data
    for name, arr in optimizer.state_arrays().items():
        arrays[f"opt.{name}"] = arr
    for name, arr in inner_optimizer.state_arrays().items():
        arrays[f"inner.{name}"] = arr
    arrays["affinity.matrix"] = troa_state.affinity.matrix

    names = sorted(arrays)
    meta, offset = [], 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        meta.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                     "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": "takpt-v1",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "epoch": int(epoch),
        "step": int(step),
        "adam_t": int(optimizer.t),
        "inner_adam_t": int(inner_optimizer.t),
        "affinity_step_count": int(troa_state.affinity.step_count),
        "rng_state": rng_state,
        "arrays": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]
    arrays = {}
    for meta in header["arrays"]:
        seg = body[meta["offset"]: meta["offset"] + meta["nbytes"]]
        arrays[meta["name"]] = np.frombuffer(seg, dtype=np.dtype(meta["dtype"])).reshape(
            meta["shape"]).copy()
    config = config_from_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise ConfigError("checkpoint config hash does not match its stored config")
    affinity = AffinityMatrix(arrays["affinity.matrix"],
                              step_count=header["affinity_step_count"])
    return Checkpoint(config=config, arrays=arrays, epoch=header["epoch"],
                      step=header["step"], adam_t=header["adam_t"],
                      inner_adam_t=header["inner_adam_t"], affinity=affinity,
                      rng_state=header["rng_state"], config_hash=header["config_hash"])


def model_from_checkpoint(ckpt: Checkpoint) -> MultitaskAdapterModel:
    """Rebuild the model and assert the frozen encoder is bit-exact."""
    model = MultitaskAdapterModel(ckpt.config)
    for name, arr in model.backbone.weights.items():
        stored = ckpt.arrays[f"backbone.{name}"]
        if stored.tobytes() != arr.tobytes():
            raise ConfigError(f"checkpoint backbone weight {name} does not match "
                              f"the config-seeded encoder (frozen-weight violation)")
    model.load_parameter_arrays({name[len("param."):]: arr
                                 for name, arr in ckpt.arrays.items()
                                 if name.startswith("param.")})
    return model


# -- the trainer -------------------------------------------------------


class _TroaBatchProvider:
    """Adapts the trainer's current batch to the affinity-step contract.

    Inner optimizer steps touch only decoder/head parameters; task
    gradients are taken at the shared adapter-input features.
    """

    def __init__(self, trainer: "Trainer", features: list[np.ndarray],
                 targets: dict[str, np.ndarray]):
        self.trainer = trainer
        self.features = features
        self.targets = targets

    def inner_step(self, weights: np.ndarray, steps: int) -> None:
        tr = self.trainer
        for _ in range(steps):
            preds, _ = tr.model.forward_from_features(self.features,
                                                      tr.troa_state.affinity)
            per_task, _ = tr.model.losses(preds, self.targets)
            weighted = None
            for w, spec in zip(weights, tr.model.tasks):
                term = ad.mul(per_task[spec.name], float(w))
                weighted = term if weighted is None else ad.add(weighted, term)
            tr.model.store.zero_grad()
            weighted.backward()
            clip_global_norm(tr.inner_optimizer.params, tr.config.optim.clip_norm)
            tr.inner_optimizer.step(tr.current_lr)
        tr.model.store.zero_grad()

    def task_gradients(self):
        return self.trainer.model.task_gradients(
            self.features, self.trainer.troa_state.affinity, self.targets)


class Trainer:
    """Owns parameters, optimizers, affinity state, and the data caches."""

    def __init__(self, config: TrainConfig, out_dir=None, cache: DatasetCache | None = None):
        self.config = config
        self.model = MultitaskAdapterModel(config)
        oc = config.optim
        params = dict(self.model.store.items())
        self.optimizer = Adam(params, oc.lr, oc.beta1, oc.beta2, oc.eps)
        decoder_params = {k: v for k, v in params.items()
                          if k.startswith("dec.") or k.startswith("head.")}
        self.inner_optimizer = Adam(decoder_params, oc.lr, oc.beta1, oc.beta2, oc.eps)
        self.troa_state = TroaState(AffinityMatrix.uniform(config.n_tasks),
                                    kappa=config.troa.kappa,
                                    sign_convention=config.troa.sign_convention,
                                    inner_steps=config.troa.inner_steps)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        self.cache = cache or DatasetCache()
        self.step = 0
        self.epoch = 0
        self.current_lr = 0.0
        self.history: list[dict] = []
        self.affinity_snapshots: list[AffinityMatrix] = [self.troa_state.affinity]
        self.initial_fingerprint = self.model.backbone.fingerprint()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "log.jsonl", "w", encoding="utf-8")

    # -- plumbing -----------------------------------------------------
    def _log(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if self._log_fh is not None:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        log.debug("%s", line)

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def _dataset(self, split: str, domain: str | None = None) -> ShapeWorldDataset:
        dc = self.config.data
        counts = {"train": dc.train_count, "val": dc.val_count, "test": dc.test_count}
        return self.cache.dataset(split, domain or dc.domain, counts[split], dc.image_size)

    def _features(self, dataset: ShapeWorldDataset) -> list[np.ndarray]:
        return self.cache.features(self.model, dataset)

    def _check_frozen(self) -> None:
        if self.model.backbone.fingerprint() != self.initial_fingerprint:
            raise RuntimeError("frozen encoder weights changed during training")

    # -- training -----------------------------------------------------
    def fit(self) -> dict:
        t0 = time.monotonic()
        oc, tc = self.config.optim, self.config.troa
        train_set = self._dataset("train")
        train_feats = self._features(train_set)
        val_set = self._dataset("val")
        val_feats = self._features(val_set)

        n = len(train_set)
        steps_per_epoch = math.ceil(n / oc.batch_size)
        total_steps = steps_per_epoch * oc.epochs
        warmup_steps = steps_per_epoch * oc.warmup_epochs

        for epoch in range(oc.epochs):
            self.epoch = epoch
            perm = self.rng.permutation(n)
            epoch_loss = 0.0
            task_sums = {spec.name: 0.0 for spec in self.model.tasks}
            for start in range(0, n, oc.batch_size):
                idx = perm[start:start + oc.batch_size]
                feats = [f[idx] for f in train_feats]
                targets = batch_targets(train_set, idx, self.model.tasks)
                lr = warmup_cosine_lr(self.step, total_steps, warmup_steps, oc.lr)
                self.current_lr = lr
                preds, _ = self.model.forward_from_features(feats, self.troa_state.affinity)
                try:
                    per_task, total = self.model.losses(preds, targets)
                except NonFiniteLoss as exc:
                    seeds = [train_set.seeds[int(i)] for i in idx]
                    self._log({"kind": "error", "step": self.step,
                               "error": str(exc), "batch_seeds": seeds})
                    raise NonFiniteLoss(f"{exc} (step {self.step}, batch seeds {seeds})",
                                        step=self.step,
                                        batch_indices=[int(i) for i in idx]) from exc
                self.model.store.zero_grad()
                total.backward()
                norm, clipped = clip_global_norm(self.optimizer.params, oc.clip_norm)
                self.optimizer.step(lr)
                frac = len(idx) / n
                epoch_loss += float(total.data) * frac
                for name in task_sums:
                    task_sums[name] += float(per_task[name].data) * frac
                self._log({"kind": "step", "step": self.step, "epoch": epoch,
                           "lr": lr, "loss": float(total.data),
                           "task_losses": {k: float(v.data) for k, v in per_task.items()},
                           "grad_norm": norm, "clipped": bool(clipped)})
                self.step += 1
                if epoch >= tc.burnin_epochs and self.step % tc.cadence == 0:
                    provider = _TroaBatchProvider(self, feats, targets)
                    snapshot, self.troa_state = troa_step(self.troa_state, provider)
                    snapshot.validate(tol=1e-6)
                    self.affinity_snapshots.append(snapshot)
                    self._log({"kind": "affinity", "step": self.step,
                               "step_count": snapshot.step_count,
                               "matrix": snapshot.matrix.tolist()})
            self._check_frozen()
            record = {"kind": "epoch", "epoch": epoch, "train_loss": epoch_loss,
                      "task_losses": task_sums}
            if (epoch + 1) % self.config.eval_every == 0 or epoch == oc.epochs - 1:
                report, val_loss = evaluate_model(self.model, val_set,
                                                  self.troa_state.affinity,
                                                  features=val_feats, split="val")
                record["val_loss"] = val_loss
                record["val_metrics"] = report.values
                self._emit_prediction_grid(val_set, val_feats, epoch)
            self.history.append(record)
            self._log(record)

        summary = {
            "config_hash": self.config.config_hash(),
            "epochs": oc.epochs,
            "steps": self.step,
            "param_counts": self.model.count_parameters(),
            "epoch_losses": [h["train_loss"] for h in self.history],
            "final_train_loss": self.history[-1]["train_loss"],
            "epoch1_train_loss": self.history[0]["train_loss"],
            "wall_time_s": time.monotonic() - t0,
        }
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "checkpoint.bin")
            save_affinity_csv(self.troa_state.affinity, self.out_dir / "affinity.csv")
            from . import viz
            viz.affinity_heatmap_png(self.troa_state.affinity.matrix,
                                     self.out_dir / "affinity.png")
            viz.affinity_figure_png(self.troa_state.affinity.matrix,
                                    [s.name for s in self.model.tasks],
                                    self.out_dir / "affinity_large.png")
            (self.out_dir / "summary.json").write_text(
                json.dumps(summary, indent=2, sort_keys=True))
        return summary

    def _emit_prediction_grid(self, dataset: ShapeWorldDataset,
                              features: list[np.ndarray], epoch: int) -> None:
        if self.out_dir is None:
            return
        from . import viz
        idx = np.arange(min(4, len(dataset)))
        feats = [f[idx] for f in features]
        with ad.no_grad():
            preds, _ = self.model.forward_from_features(feats, self.troa_state.affinity)
        arrays = self.model.predict_arrays(preds)
        gts = batch_targets(dataset, idx, self.model.tasks)
        grid_dir = self.out_dir / "preds"
        grid_dir.mkdir(exist_ok=True)
        viz.prediction_grid(dataset.images[idx], gts, arrays,
                            grid_dir / f"epoch_{epoch:04d}.png",
                            k_seg=self.config.data.k_seg)

    # -- evaluation / persistence -------------------------------------
    def evaluate(self, split: str = "test", domain: str | None = None) -> MetricsReport:
        dataset = self._dataset(split, domain)
        feats = self._features(dataset)
        report, _ = evaluate_model(self.model, dataset, self.troa_state.affinity,
                                   features=feats, split=split)
        return report

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, config=self.config, model=self.model,
                        optimizer=self.optimizer, inner_optimizer=self.inner_optimizer,
                        troa_state=self.troa_state,
                        rng_state=self.rng.bit_generator.state,
                        epoch=self.epoch, step=self.step)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, out_dir=None,
                        cache: DatasetCache | None = None) -> "Trainer":
        trainer = cls(ckpt.config, out_dir=out_dir, cache=cache)
        trainer.model = model_from_checkpoint(ckpt)
        params = dict(trainer.model.store.items())
        oc = ckpt.config.optim
        trainer.optimizer = Adam(params, oc.lr, oc.beta1, oc.beta2, oc.eps)
        trainer.optimizer.load_state_arrays(
            {k[len("opt."):]: v for k, v in ckpt.arrays.items() if k.startswith("opt.")},
            ckpt.adam_t)
        decoder_params = {k: v for k, v in params.items()
                          if k.startswith("dec.") or k.startswith("head.")}
        trainer.inner_optimizer = Adam(decoder_params, oc.lr, oc.beta1, oc.beta2, oc.eps)
        trainer.inner_optimizer.load_state_arrays(
            {k[len("inner."):]: v for k, v in ckpt.arrays.items() if k.startswith("inner.")},
            ckpt.inner_adam_t)
        trainer.troa_state = TroaState(ckpt.affinity, kappa=ckpt.config.troa.kappa,
                                       sign_convention=ckpt.config.troa.sign_convention,
                                       inner_steps=ckpt.config.troa.inner_steps)
        trainer.affinity_snapshots = [ckpt.affinity]
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.epoch = ckpt.epoch
        trainer.step = ckpt.step
        return trainer


# -- top-level entry points -------------------------------------------


def train(config: TrainConfig, out_dir=None, cache: DatasetCache | None = None):
    """Run a full training; returns (trainer, summary dict)."""
    trainer = Trainer(config, out_dir=out_dir, cache=cache)
    try:
        summary = trainer.fit()
    finally:
        trainer.close()
    return trainer, summary


def evaluate_checkpoint(path, split: str = "test", domain: str | None = None,
                        cache: DatasetCache | None = None) -> MetricsReport:
    """Zero-fine-tune evaluation of a stored model on any split/domain."""
    ckpt = load_checkpoint(path)
    trainer = Trainer.from_checkpoint(ckpt, cache=cache)
    return trainer.evaluate(split=split, domain=domain)


def run_ablation(config: TrainConfig, ladder=ABLATION_RUNGS, seeds=(0, 1, 2),
                 out_dir=None, cache: DatasetCache | None = None):
    """Train every rung x seed on shared data; returns rows, writes CSV.

    Rungs are cumulative: vanilla (plain attention, full-width adapter
    FFN replacement, plain norms) -> +TAA -> +bottleneck -> +TSN. The
    parameter column drops at the bottleneck rung by construction.
    """
    unknown = set(ladder) - set(ABLATION_RUNGS)
    if unknown:
        raise ConfigError(f"unknown ablation rung(s): {sorted(unknown)}")
    cache = cache or DatasetCache()
    rows = []
    for rung in ladder:
        for seed in seeds:
            doc = config.to_dict()
            doc["adapter"].update(RUNG_FLAGS[rung])
            doc["seed"] = int(seed)
            cfg = config_from_dict(doc)
            sub = None
            if out_dir is not None:
                sub = Path(out_dir) / f"{rung}_seed{seed}"
            trainer, summary = train(cfg, out_dir=sub, cache=cache)
            report = trainer.evaluate("test")
            counts = trainer.model.count_parameters()
            m = report.values
            rows.append({
                "rung": rung, "seed": int(seed),
                "params_trainable": counts["trainable"],
                "params_total": counts["total"],
                "seg_miou": m["segmentation"]["miou"],
                "depth_rmse": m["depth"]["rmse"],
                "normal_mangle_deg": m["normal"]["mean_angle_deg"],
                "edge_f1": m["edge"]["f1"],
                "final_train_loss": summary["final_train_loss"],
            })
    for rung in ladder:
        group = [r for r in rows if r["rung"] == rung and r["seed"] >= 0]
        mean_row = {"rung": rung, "seed": -1,
                    "params_trainable": group[0]["params_trainable"],
                    "params_total": group[0]["params_total"]}
        for key in ("seg_miou", "depth_rmse", "normal_mangle_deg", "edge_f1",
                    "final_train_loss"):
            mean_row[key] = sum(r[key] for r in group) / len(group)
        rows.append(mean_row)
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


ABLATION_COLUMNS = ("rung", "seed", "params_trainable", "params_total",
                    "seg_miou", "depth_rmse", "normal_mangle_deg", "edge_f1",
                    "final_train_loss")


def write_ablation_csv(rows: list[dict], path) -> None:
    """Seed -1 rows are the 3-seed means for their rung."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in ABLATION_COLUMNS:
                v = row[col]
                cells.append(str(v) if isinstance(v, int) else f"{v:.6f}")
            fh.write(",".join(cells) + "\n")
