"""
Experiment: one seeded end-to-end run, and sweeps of runs.

A run builds the data, partitions it across clients, runs the protocol
phases the mode asks for and leaves its artifacts in ``cfg.output_dir``:

    metrics.csv         one row per round
    summary.json        final metrics, config echo, run id
    partition.json      client -> sample id manifest
    checkpoints/        round_{phase}_{index}.sfwt
    error.json          only when the run failed

Usage:
    from selffed import load_config, run_experiment

    result = run_experiment(load_config("configs/quickstart.toml"))
    print(result.status.value, result.summary["final"])
"""

import asyncio
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .client import ClientState
from .config import (
    DatasetKind,
    ExperimentConfig,
    RunMode,
    SelectionSchedule,
    config_from_dict,
    config_to_dict,
)
from .datalab import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    export_partition,
    heterogeneity_score,
    load_folder,
    split_train_test,
    subsample_labels,
    synth_dataset,
)
from .errors import EmptyLabeledShardError, NonFiniteError, ValidationError
from .federation import Federation
from .logging import get_logger, setup_logging
from .metrics import MetricsSink
from .microtensor import ModelParams, load_params
from .seeding import derive_rng
from .swinlite import init_params

logger = get_logger("experiment")

# Values of the frequency-decay sensitivity study.
BETA_SWEEP = (0.6, 0.75, 0.9, 0.95, 0.99, 0.999, 1.0)

SWEEP_ALIASES = {
    "beta": "federation.beta",
    "delta": "partition.delta",
    "ratio": "masking.ratio",
    "temperature": "contrastive.temperature",
    "clients": "federation.num_clients",
}


class RunStatus(str, Enum):
    COMPLETED = "completed"
    ERROR = "error"


@dataclass
class ExperimentResult:
    """Outcome of one run; `exit_code` is what the CLI returns."""
    run_id: str
    status: RunStatus
    output_dir: Path
    summary: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None
    duration_seconds: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == RunStatus.COMPLETED

    @property
    def exit_code(self) -> int:
        return 0 if self.success else 1


def run_id_for(cfg: ExperimentConfig) -> str:
    """Content hash of the config echo; equal configs share an id."""
    echo = json.dumps(config_to_dict(cfg), sort_keys=True)
    return "sf-" + hashlib.sha1(echo.encode("utf-8")).hexdigest()[:12]


# -- setup ------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    spec, arch = cfg.dataset, cfg.arch
    if spec.kind == DatasetKind.FOLDER:
        return load_folder(spec.folder, spec.manifest, arch.image_size, arch.channels, spec.num_classes, spec.classes)
    return synth_dataset(
        spec.num_classes, spec.per_class, arch.image_size, arch.channels, spec.noise,
        derive_rng(cfg.seed, "data"),
    )


def effective_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The centralized baseline is a single client that is selected every round."""
    if cfg.mode != RunMode.CENTRALIZED:
        return cfg
    fed = replace(
        cfg.federation,
        num_clients=1,
        clients_per_round=1,
        selection=SelectionSchedule.UNIFORM,
        selection_weights=(),
    )
    return replace(
        cfg,
        federation=fed,
        partition=replace(cfg.partition, size_multipliers=()),
    )


def prepare_clients(
    cfg: ExperimentConfig,
    train: Dataset,
    params: ModelParams,
) -> Tuple[List[ClientState], PartitionPlan]:
    """Partition `train`, hide labels and hand every client a copy of `params`."""
    part = cfg.partition
    plan = dirichlet_partition(
        train, cfg.federation.num_clients, part.delta, derive_rng(cfg.seed, "partition"),
        size_multipliers=part.size_multipliers or None,
        min_samples=part.min_samples,
    )
    clients = []
    for m, shard in enumerate(plan.shards(train)):
        if len(shard) == 0:
            logger.warning(f"Client {m} received no samples; dropping it", extra={"client_id": m})
            continue
        if cfg.label_fraction > 0:
            labeled, _ = subsample_labels(shard, cfg.label_fraction, derive_rng(cfg.seed, "labels", m))
        else:
            labeled = shard.subset([])
        clients.append(ClientState(
            client_id=m,
            unlabeled=shard.hide_labels(),
            labeled=labeled,
            params=params.copy(),
        ))
    k = cfg.federation.clients_per_round
    if k > len(clients):
        raise ValidationError(
            "federation.clients_per_round",
            f"{k} exceeds the {len(clients)} clients holding data after partitioning "
            f"(delta={part.delta}, min_samples={part.min_samples})",
        )
    return clients, plan


def _needs_finetune(cfg: ExperimentConfig) -> bool:
    return cfg.mode != RunMode.PRETRAIN_ONLY and cfg.federation.rounds_finetune > 0


def _error_report(exc: BaseException) -> Dict[str, Any]:
    report: Dict[str, Any] = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ValidationError):
        report["field"] = exc.field
    if isinstance(exc, NonFiniteError):
        report["op"] = exc.op
    return report


# -- run --------------------------------------------------------------------

async def run_experiment_async(cfg: ExperimentConfig) -> ExperimentResult:
    """
    Run one experiment inside an existing event loop.

    Never raises for failures inside the run: they come back as an ERROR
    result with `error.json` written next to the other artifacts.
    """
    start = time.perf_counter()
    output_dir = Path(cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    run_id = ""
    try:
        cfg.validate()
        setup_logging(level=cfg.log_level, log_file=cfg.log_file)
        run_id = run_id_for(cfg)
        summary = await _run(cfg, output_dir, run_id, start)
    except Exception as e:
        logger.error(f"Run failed: {e}", exc_info=True, extra={"run_id": run_id or None})
        report = _error_report(e)
        (output_dir / "error.json").write_text(json.dumps(report, indent=2))
        return ExperimentResult(
            run_id=run_id,
            status=RunStatus.ERROR,
            output_dir=output_dir,
            error=report,
            duration_seconds=time.perf_counter() - start,
        )

    return ExperimentResult(
        run_id=run_id,
        status=RunStatus.COMPLETED,
        output_dir=output_dir,
        summary=summary,
        duration_seconds=time.perf_counter() - start,
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Blocking wrapper around run_experiment_async."""
    return asyncio.run(run_experiment_async(cfg))


async def _run(cfg: ExperimentConfig, output_dir: Path, run_id: str, start: float) -> Dict[str, Any]:
    run_cfg = effective_config(cfg)
    logger.info(f"Starting {cfg.mode.value} run {run_id}", extra={"run_id": run_id})

    data = build_dataset(run_cfg)
    train, test = split_train_test(data, run_cfg.dataset.test_fraction, derive_rng(cfg.seed, "split"))
    client_pool, server_pool = split_train_test(train, run_cfg.dataset.server_fraction, derive_rng(cfg.seed, "server"))

    params = init_params(run_cfg.arch, run_cfg.dataset.num_classes, derive_rng(cfg.seed, "init"))
    if cfg.mode == RunMode.FINETUNE_ONLY:
        params.load_(load_params(cfg.init_checkpoint))
        logger.info(f"Loaded initial weights from {cfg.init_checkpoint}", extra={"run_id": run_id})

    clients, plan = prepare_clients(run_cfg, client_pool, params)
    if _needs_finetune(run_cfg) and any(len(c.labeled) == 0 for c in clients):
        raise EmptyLabeledShardError(f"Label fraction {cfg.label_fraction} leaves a client without labels")
    export_partition(plan, output_dir / "partition.json")
    hetero = heterogeneity_score(plan)

    sink = MetricsSink(output_dir)
    federation = Federation(
        run_cfg, clients, params, server_pool, test,
        run_id=run_id,
        checkpoint_dir=output_dir / "checkpoints",
        on_report=sink.append,
    )
    reports = await federation.run(cfg.mode)

    summary = {
        "run_id": run_id,
        "status": RunStatus.COMPLETED.value,
        "mode": cfg.mode.value,
        "config": config_to_dict(cfg),
        "final": {
            "test_accuracy": federation.evaluate_accuracy(),
            "eval_loss": federation.evaluate_reconstruction(),
        },
        "rounds": {
            "phase1": sum(1 for r in reports if r.phase == 1),
            "phase2": sum(1 for r in reports if r.phase == 2),
        },
        "encoder_parameters": federation.encoder().num_parameters,
        "upload_bytes_total": int(sum(r.upload_bytes for r in reports)),
        "partition": {
            "sizes": plan.sizes,
            "attempts": plan.attempts,
            "mean_entropy": hetero.mean_entropy,
            "max_tv": hetero.max_tv,
        },
        "data": {"train": len(client_pool), "server_pool": len(server_pool), "test": len(test)},
        "checkpoints": [p.name for p in federation.checkpoints],
        "duration_seconds": time.perf_counter() - start,
    }
    sink.write_summary(summary)
    logger.info(
        f"Run {run_id} complete: accuracy={summary['final']['test_accuracy']}",
        extra={"run_id": run_id, "duration": summary["duration_seconds"]},
    )
    return summary


# -- sweeps -----------------------------------------------------------------

def _set_dotted(data: Dict[str, Any], path: str, value: Any) -> None:
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            raise ValidationError(path, "does not name a config section")
        node = child
    node[keys[-1]] = value


def sweep_configs(
    cfg: ExperimentConfig,
    param: str,
    values: Sequence[Any],
) -> List[Tuple[Any, ExperimentConfig]]:
    """One validated config per value, each writing under ``output_dir/param=value``."""
    path = SWEEP_ALIASES.get(param, param)
    base = Path(cfg.output_dir)
    out = []
    for value in values:
        data = config_to_dict(cfg)
        _set_dotted(data, path, value)
        data["output_dir"] = str(base / f"{param}={value}")
        data = {k: v for k, v in data.items() if v is not None}
        out.append((value, config_from_dict(data)))
    return out


SWEEP_COLUMNS = ("param", "value", "run_id", "status", "test_accuracy", "eval_loss")


def run_sweep(
    cfg: ExperimentConfig,
    param: str,
    values: Sequence[Any] = BETA_SWEEP,
) -> List[Dict[str, Any]]:
    """
    Run one experiment per value of a dotted config field.

    Returns one row per value, in order, and writes them to
    ``output_dir/sweep.csv``. Failed runs appear with status "error".
    """
    path = SWEEP_ALIASES.get(param, param)
    rows = []
    for value, sub in sweep_configs(cfg, param, values):
        result = run_experiment(sub)
        final = result.summary.get("final", {})
        rows.append({
            "param": path,
            "value": value,
            "run_id": result.run_id,
            "status": result.status.value,
            "test_accuracy": final.get("test_accuracy"),
            "eval_loss": final.get("eval_loss"),
        })
        logger.info(f"Sweep {path}={value}: {result.status.value}")

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else row[k] for k in SWEEP_COLUMNS})
    return rows


def parse_sweep_value(text: str) -> Union[int, float, str]:
    """CLI values: integers, then floats, else the raw string."""
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            continue
    return text


def partition_only(
    cfg: ExperimentConfig,
    manifest_out: Union[str, Path],
) -> PartitionPlan:
    """Build the data and write the client manifest without training."""
    data = build_dataset(cfg)
    train, _ = split_train_test(data, cfg.dataset.test_fraction, derive_rng(cfg.seed, "split"))
    client_pool, _ = split_train_test(train, cfg.dataset.server_fraction, derive_rng(cfg.seed, "server"))
    plan = dirichlet_partition(
        client_pool, cfg.federation.num_clients, cfg.partition.delta, derive_rng(cfg.seed, "partition"),
        size_multipliers=cfg.partition.size_multipliers or None,
        min_samples=cfg.partition.min_samples,
    )
    export_partition(plan, manifest_out)
    score = heterogeneity_score(plan)
    logger.info(f"Partition written to {manifest_out}: sizes {plan.sizes}, mean entropy {score.mean_entropy:.3f}")
    return plan
