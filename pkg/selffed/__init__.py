"""
selffed: federated self-supervised learning simulator.

Clients pre-train a windowed-attention masked autoencoder on unlabeled
shards, then fine-tune the shared encoder on small labeled subsets while
the server runs momentum-contrast consistency training on its online
network. Client updates are merged with frequency-decayed averaging.

Quick start:
    from selffed import load_config, run_experiment

    result = run_experiment(load_config("configs/quickstart.toml"))
    print(result.summary["final"]["test_accuracy"])

Sweep:
    from selffed import BETA_SWEEP, run_sweep

    rows = run_sweep(cfg, "beta", BETA_SWEEP)

Building blocks:
    from selffed import aggregate_selffed, dirichlet_partition, synth_dataset

    plan = dirichlet_partition(data, num_clients=5, delta=0.5, rng=derive_rng(0, "partition"))
"""

from .aggregation import aggregate_fedavg, aggregate_selffed, aggregation_weights
from .client import ClientState, FinetuneUpdate, PretrainUpdate, local_finetune, local_pretrain
from .config import (
    AggregationMode,
    ArchConfig,
    AugmentSpec,
    ContrastiveConfig,
    ExperimentConfig,
    FederationConfig,
    RunMode,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .contrastive import TwinNetworks, ViewPair, ema_update, make_views, server_contrastive_step, warm_queue
from .datalab import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    heterogeneity_score,
    load_folder,
    split_train_test,
    subsample_labels,
    synth_dataset,
)
from .errors import SelfFedError, ValidationError
from .experiment import BETA_SWEEP, ExperimentResult, RunStatus, run_experiment, run_sweep
from .federation import Federation, fit_linear_probe, probe_accuracy, select_clients
from .logging import get_logger, setup_logging
from .metrics import MetricsSink, RoundReport, compare_runs
from .microtensor import ModelParams, Tensor
from .patching import MaskPlan, PatchGrid, augment, partition_patches, reassemble, sample_mask
from .seeding import derive_rng
from .ssl_losses import MemoryQueue, cross_entropy, info_nce, masked_mse, queue_push
from .swinlite import classify, decode, embed_patches, encode, init_params, project_head

__version__ = "0.1.0"

__all__ = [
    # Harness
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "run_experiment",
    "run_sweep",
    "ExperimentResult",
    "RunStatus",
    "BETA_SWEEP",
    "MetricsSink",
    "RoundReport",
    "compare_runs",
    # Config
    "ArchConfig",
    "AugmentSpec",
    "ContrastiveConfig",
    "FederationConfig",
    "AggregationMode",
    "RunMode",
    # Protocol
    "Federation",
    "select_clients",
    "ClientState",
    "PretrainUpdate",
    "FinetuneUpdate",
    "local_pretrain",
    "local_finetune",
    "aggregate_fedavg",
    "aggregate_selffed",
    "aggregation_weights",
    "fit_linear_probe",
    "probe_accuracy",
    # Server consistency training
    "TwinNetworks",
    "ViewPair",
    "make_views",
    "ema_update",
    "warm_queue",
    "server_contrastive_step",
    "MemoryQueue",
    "queue_push",
    "masked_mse",
    "info_nce",
    "cross_entropy",
    # Model
    "ModelParams",
    "Tensor",
    "init_params",
    "embed_patches",
    "encode",
    "decode",
    "project_head",
    "classify",
    "PatchGrid",
    "MaskPlan",
    "partition_patches",
    "reassemble",
    "sample_mask",
    "augment",
    # Data
    "Dataset",
    "PartitionPlan",
    "synth_dataset",
    "split_train_test",
    "dirichlet_partition",
    "heterogeneity_score",
    "subsample_labels",
    "load_folder",
    "derive_rng",
    # Errors and logging
    "SelfFedError",
    "ValidationError",
    "get_logger",
    "setup_logging",
]
