"""Full multitask model: frozen encoder + adapter chain + task decoders.

The frozen windowed-attention encoder runs in plain numpy outside the
autodiff tape; its token maps at the adapter placements are the only
interface the trainable side sees, so they can be precomputed once per
dataset. The trainable side (adapter chain, one decoder and head per
task) lives in a single :class:`ParamStore`.

Task-affinity gradients are taken with respect to the encoder features
entering the first adapter block, the shared representation every
task's loss flows through.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adapter import AdapterChain, AdapterLayerConfig
from .affinity import AffinityMatrix, TaskGradient
from .backbone import Backbone, attach_adapters
from .config import TaskSpec, TrainConfig, default_task_specs
from .decoders import TaskDecoder, TaskHead, combined_loss, task_loss
from .errors import ConfigError, DimensionMismatch
from .layers import ParamStore

__all__ = ["MultitaskAdapterModel", "normalize_images", "default_task_specs"]


def normalize_images(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] images to the [-1, 1] range the encoder expects."""
    return (np.asarray(images, dtype=np.float32) * 2.0 - 1.0)


class MultitaskAdapterModel:
    """Assembles and runs the whole architecture from one config."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.tasks: list[TaskSpec] = list(config.tasks)
        self.backbone = Backbone(config.backbone)
        self.placements = attach_adapters(self.backbone, config.adapter.placements)
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

        ac = config.adapter
        stage_dims = {s: config.backbone.stage_dims(s) for s in range(1, 5)}
        block_cfgs, norms = [], []
        for stage, layer in self.placements:
            h, w, c = stage_dims[stage]
            if stage not in ac.heads_per_stage:
                raise ConfigError(f"adapter.heads_per_stage has no entry for stage {stage}")
            block_cfgs.append(AdapterLayerConfig(
                channels=c, hw=h * w, heads=ac.heads_per_stage[stage],
                n_tasks=len(self.tasks), bottleneck_dim=ac.bottleneck_dim,
                ffn_hidden=ac.ffn_hidden, use_taa=ac.use_taa, use_tsn=ac.use_tsn,
                use_bottleneck=ac.use_bottleneck, film_hidden=ac.film_hidden,
                tsn_hidden=ac.tsn_hidden))
            norms.append(self.backbone.norm_params(stage, layer))
        self.chain = AdapterChain(self.store, "adapters", self.placements,
                                  stage_dims, block_cfgs, norms, rng)

        last_stage = self.placements[-1][0]
        grid_in = config.backbone.grid_side(last_stage)
        c_in = config.backbone.stage_channels(last_stage)
        self.decoders, self.heads = [], []
        for spec in self.tasks:
            self.decoders.append(TaskDecoder(self.store, f"dec.{spec.name}",
                                             grid_in, c_in, config.decoder, rng))
            self.heads.append(TaskHead(self.store, f"head.{spec.name}",
                                       self.decoders[-1].out_channels, spec, rng))
        self.out_side = self.decoders[0].out_grid

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    # -- forward ------------------------------------------------------
    def encode(self, images: np.ndarray) -> list[np.ndarray]:
        """Frozen-encoder features at each adapter placement ([0,1] images in)."""
        feats = self.backbone.encoder_forward(normalize_images(images))
        return [feats.at(s, l) for s, l in self.placements]

    def forward_from_features(self, features: list[np.ndarray],
                              affinity: AffinityMatrix,
                              grad_features: bool = False):
        """Adapter chain + decoders from cached encoder features.

        Returns (preds, first) where ``preds`` maps task name to a
        (B, H, W, K) tensor and ``first`` is the (possibly grad-enabled)
        tensor wrapping the first placement's features.
        """
        wrapped = [ad.as_tensor(np.ascontiguousarray(f)) for f in features]
        if grad_features:
            wrapped[0] = Tensor(np.ascontiguousarray(features[0]), requires_grad=True)
        per_task = self.chain(wrapped, affinity)
        preds: dict[str, Tensor] = {}
        for t, spec in enumerate(self.tasks):
            tokens = self.decoders[t](per_task[t])
            y = self.heads[t](tokens)
            b = y.shape[0]
            preds[spec.name] = ad.reshape(y, (b, self.out_side, self.out_side,
                                              spec.head_channels))
        return preds, wrapped[0]

    def forward(self, images: np.ndarray, affinity: AffinityMatrix) -> dict[str, Tensor]:
        preds, _ = self.forward_from_features(self.encode(images), affinity)
        return preds

    # -- losses and task gradients ------------------------------------
    def losses(self, preds: dict[str, Tensor], targets: dict[str, np.ndarray]):
        """(per-task scalar dict, combined scalar) for one batch."""
        per_task = {spec.name: task_loss(preds[spec.name], targets[spec.name], spec)
                    for spec in self.tasks}
        total = combined_loss([per_task[s.name] for s in self.tasks])
        return per_task, total

    def task_gradients(self, features: list[np.ndarray],
                       affinity: AffinityMatrix,
                       targets: dict[str, np.ndarray]) -> list[TaskGradient]:
        """Per-task loss gradients w.r.t. the first placement's features."""
        preds, first = self.forward_from_features(features, affinity,
                                                  grad_features=True)
        grads = []
        for spec in self.tasks:
            loss = task_loss(preds[spec.name], targets[spec.name], spec)
            first.grad = None
            loss.backward()
            if first.grad is None:
                raise DimensionMismatch(
                    f"task {spec.name} produced no gradient at the shared features")
            grads.append(TaskGradient(spec.task_id,
                                      first.grad.astype(np.float64).ravel().copy()))
        self.store.zero_grad()
        return grads

    # -- prediction decoding ------------------------------------------
    def predict_arrays(self, preds: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Detach predictions into metric-ready numpy arrays."""
        out = {}
        for spec in self.tasks:
            arr = preds[spec.name].data
            if spec.name == "segmentation":
                out[spec.name] = arr.argmax(axis=-1).astype(np.int32)
            elif spec.name == "edge":
                out[spec.name] = (arr > 0.5).astype(np.uint8)
            else:
                out[spec.name] = arr
        return out

    # -- bookkeeping --------------------------------------------------
    def count_parameters(self) -> dict[str, int]:
        trainable = sum(t.data.size for _, t in self.store.items())
        frozen = self.backbone.parameter_count()
        return {"trainable": trainable, "frozen": frozen,
                "total": trainable + frozen}

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return self.store.arrays()

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.store.load_arrays(arrays)
