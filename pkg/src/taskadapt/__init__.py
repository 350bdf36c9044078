"""Multitask vision-transformer adapters on a frozen toy encoder.

Trainable adapter blocks (task-adapted attention, task-scaled
normalization, bottleneck projections) ride on a frozen windowed
encoder; per-task decoders produce four dense predictions; a
mirror-descent procedure learns the task-affinity weights that condition
the attention. Everything runs in numpy with a built-in reverse-mode
tape; data is procedurally generated with analytically exact labels.
"""

from .affinity import (AffinityMatrix, TaskGradient, TroaState,
                       compute_similarity_matrix, cosine_similarity,
                       load_affinity_csv, mirror_descent_update,
                       save_affinity_csv, troa_step)
from .backbone import Backbone, BackboneConfig, attach_adapters, default_placements
from .config import (AdapterConfig, DataConfig, DecoderConfig, OptimConfig,
                     TaskSpec, TrainConfig, TroaConfig, config_from_dict,
                     default_task_specs, load_config)
from .data import (SceneSpec, ShapeWorldDataset, dump_dataset, generate_scene,
                   render_sample)
from .errors import (ConfigError, DegenerateVariance, DimensionMismatch,
                     InvalidLabel, InvalidPlacement, NonFiniteLoss,
                     TaskAdaptError, ZeroGradient)
from .metrics import MetricsReport, depth_rmse, edge_f1, miou, normal_mean_angle_deg
from .model import MultitaskAdapterModel
from .train import (DatasetCache, Trainer, evaluate_checkpoint, evaluate_model,
                    load_checkpoint, run_ablation, save_checkpoint, train)
from .verify import finite_difference_gradcheck, run_gradcheck

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix", "TaskGradient", "TroaState", "compute_similarity_matrix",
    "cosine_similarity", "load_affinity_csv", "mirror_descent_update",
    "save_affinity_csv", "troa_step",
    "Backbone", "BackboneConfig", "attach_adapters", "default_placements",
    "AdapterConfig", "DataConfig", "DecoderConfig", "OptimConfig", "TaskSpec",
    "TrainConfig", "TroaConfig", "config_from_dict", "default_task_specs",
    "load_config",
    "SceneSpec", "ShapeWorldDataset", "dump_dataset", "generate_scene",
    "render_sample",
    "ConfigError", "DegenerateVariance", "DimensionMismatch", "InvalidLabel",
    "InvalidPlacement", "NonFiniteLoss", "TaskAdaptError", "ZeroGradient",
    "MetricsReport", "depth_rmse", "edge_f1", "miou", "normal_mean_angle_deg",
    "MultitaskAdapterModel",
    "DatasetCache", "Trainer", "evaluate_checkpoint", "evaluate_model",
    "load_checkpoint", "run_ablation", "save_checkpoint", "train",
    "finite_difference_gradcheck", "run_gradcheck",
    "__version__",
]
