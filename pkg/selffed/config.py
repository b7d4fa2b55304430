"""
Configuration dataclasses for selffed.

All settings have sensible defaults. Override via ExperimentConfig() or a
TOML file (see docs/CONFIG.md). Only the seed is mandatory: there is no
implicit entropy anywhere in a run.
"""

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .errors import ParseError, ValidationError


class AggregationMode(str, Enum):
    FEDAVG = "fedavg"
    SELFFED_LITERAL = "selffed-literal"
    SELFFED_NORMALIZED = "selffed-normalized"


class RunMode(str, Enum):
    FULL = "full"
    PRETRAIN_ONLY = "pretrain-only"
    FINETUNE_ONLY = "finetune-only"
    SCRATCH_BASELINE = "scratch-baseline"
    CENTRALIZED = "centralized"


class Phase(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class SelectionSchedule(str, Enum):
    UNIFORM = "uniform"
    SKEWED = "skewed"


class FrequencyScope(str, Enum):
    CUMULATIVE = "cumulative"
    PER_PHASE = "per-phase"


class ViewSource(str, Enum):
    DECODER = "decoder"
    RAW = "raw"


class NegativeMode(str, Enum):
    WITH_POSITIVE = "with-positive"
    NEGATIVES_ONLY = "negatives-only"


class Interpolation(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class OptimizerName(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class LRSchedule(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


class DatasetKind(str, Enum):
    SYNTHETIC = "synthetic"
    FOLDER = "folder"


@dataclass
class AugmentSpec:
    """Augmentation recipe for one protocol phase."""
    phase: Phase = Phase.PRETRAIN
    flip_prob: float = 0.5
    crop_size: Optional[int] = None  # None = keep the image size
    scale: Tuple[float, float] = (0.2, 1.0)  # area fraction range of the crop region
    jitter: float = 0.4  # pre-train only
    rotation: float = 0.0  # degrees, fine-tune only
    interpolation: Interpolation = Interpolation.NEAREST

    @classmethod
    def identity(cls, phase: Phase = Phase.PRETRAIN) -> "AugmentSpec":
        return cls(phase=phase, flip_prob=0.0, scale=(1.0, 1.0), jitter=0.0, rotation=0.0)

    @classmethod
    def finetune_default(cls) -> "AugmentSpec":
        return cls(phase=Phase.FINETUNE, flip_prob=0.5, scale=(0.8, 1.2), jitter=0.0, rotation=10.0)

    def validate(self, prefix: str = "augment") -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError(f"{prefix}.flip_prob", "must lie in [0, 1]")
        lo, hi = self.scale
        if not 0.0 <= lo <= hi:
            raise ValidationError(f"{prefix}.scale", "needs 0 <= lo <= hi")
        if self.crop_size is not None and self.crop_size < 1:
            raise ValidationError(f"{prefix}.crop_size", "must be positive")
        if self.jitter < 0 or self.rotation < 0:
            raise ValidationError(f"{prefix}.jitter", "jitter and rotation must be non-negative")
        if self.phase == Phase.FINETUNE and self.jitter > 0:
            raise ValidationError(f"{prefix}.jitter", "color jitter is a pre-training transform")
        if self.phase == Phase.PRETRAIN and self.rotation > 0:
            raise ValidationError(f"{prefix}.rotation", "rotation is a fine-tuning transform")


@dataclass
class AugmentConfig:
    pretrain: AugmentSpec = field(default_factory=AugmentSpec)
    finetune: AugmentSpec = field(default_factory=AugmentSpec.finetune_default)


@dataclass
class ArchConfig:
    """Windowed-attention encoder/decoder geometry."""
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 16
    depths: Tuple[int, ...] = (1, 1, 1)  # blocks per stage
    num_heads: Tuple[int, ...] = (2, 2, 2)
    window_size: int = 4
    mlp_ratio: float = 2.0
    decoder_depths: Optional[Tuple[int, ...]] = None  # None = mirror the encoder
    mask_token: bool = True
    proj_hidden_dim: int = 64
    proj_dim: int = 32
    classifier_hidden_dim: int = 32

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def stage_grids(self) -> Tuple[int, ...]:
        return tuple(self.grid_size >> s for s in range(self.num_stages))

    @property
    def stage_dims(self) -> Tuple[int, ...]:
        return tuple(self.embed_dim << s for s in range(self.num_stages))

    @property
    def final_dim(self) -> int:
        return self.stage_dims[-1]

    def window_at(self, stage: int) -> int:
        """Swin rule: a window never exceeds the token grid."""
        return min(self.window_size, self.stage_grids[stage])

    def decoder_depth_at(self, stage: int) -> int:
        depths = self.decoder_depths if self.decoder_depths is not None else self.depths
        return depths[stage]

    def validate(self, prefix: str = "arch") -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValidationError(f"{prefix}.patch_size", "must divide image_size")
        if not self.depths:
            raise ValidationError(f"{prefix}.depths", "needs at least one stage")
        if len(self.num_heads) != len(self.depths):
            raise ValidationError(f"{prefix}.num_heads", "needs one entry per stage")
        if self.decoder_depths is not None and len(self.decoder_depths) != len(self.depths):
            raise ValidationError(f"{prefix}.decoder_depths", "needs one entry per stage")
        if self.grid_size % (1 << (self.num_stages - 1)):
            raise ValidationError(f"{prefix}.depths", "token grid cannot be halved that many times")
        if self.channels < 1 or self.embed_dim < 1:
            raise ValidationError(f"{prefix}.embed_dim", "must be positive")
        for s, (dim, heads) in enumerate(zip(self.stage_dims, self.num_heads)):
            if heads < 1 or dim % heads:
                raise ValidationError(f"{prefix}.num_heads", f"stage {s} dim {dim} not divisible by {heads}")
            if self.stage_grids[s] % self.window_at(s):
                raise ValidationError(f"{prefix}.window_size", f"does not divide grid {self.stage_grids[s]} at stage {s}")
        if self.embed_dim % 2 and self.num_stages > 1:
            raise ValidationError(f"{prefix}.embed_dim", "must be even for patch expanding")


@dataclass
class MaskingConfig:
    ratio: float = 0.6
    stratified: bool = False  # per-window masking instead of uniform

    def validate(self, prefix: str = "masking") -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ValidationError(f"{prefix}.ratio", "must lie in [0, 1]")


@dataclass
class FederationConfig:
    """Protocol settings shared by both phases."""
    num_clients: int = 5
    clients_per_round: int = 5
    rounds_pretrain: int = 200
    rounds_finetune: int = 100
    beta: float = 0.95
    lr: float = 1e-3
    local_epochs: int = 1
    batch_size: int = 32
    aggregation: AggregationMode = AggregationMode.SELFFED_NORMALIZED
    selection: SelectionSchedule = SelectionSchedule.UNIFORM
    selection_weights: Tuple[float, ...] = ()  # skewed schedule, one weight per client
    frequency_scope: FrequencyScope = FrequencyScope.CUMULATIVE
    contrastive_every: int = 1  # server contrastive step every k phase-2 rounds, 0 = off
    share_decoder: bool = True  # phase-1 uploads include the decoder
    checkpoint_every: int = 10  # the final round of a phase is always saved

    def validate(self, prefix: str = "federation") -> None:
        if self.num_clients < 1:
            raise ValidationError(f"{prefix}.num_clients", "must be at least 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValidationError(f"{prefix}.clients_per_round", "must lie in [1, num_clients]")
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError(f"{prefix}.beta", "must lie in (0, 1]")
        if self.lr < 0:
            raise ValidationError(f"{prefix}.lr", "must be non-negative")
        if self.rounds_pretrain < 0 or self.rounds_finetune < 0:
            raise ValidationError(f"{prefix}.rounds_pretrain", "round counts must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValidationError(f"{prefix}.batch_size", "local_epochs and batch_size must be positive")
        if self.selection == SelectionSchedule.SKEWED:
            if len(self.selection_weights) != self.num_clients:
                raise ValidationError(f"{prefix}.selection_weights", "needs one weight per client")
            if any(w <= 0 for w in self.selection_weights):
                raise ValidationError(f"{prefix}.selection_weights", "weights must be positive")
        if self.contrastive_every < 0 or self.checkpoint_every < 0:
            raise ValidationError(f"{prefix}.contrastive_every", "must be non-negative")


@dataclass
class OptimConfig:
    name: OptimizerName = OptimizerName.ADAMW
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    warmup_rounds: int = 5
    schedule: LRSchedule = LRSchedule.COSINE
    min_lr_ratio: float = 0.0

    def validate(self, prefix: str = "optim") -> None:
        if self.weight_decay < 0:
            raise ValidationError(f"{prefix}.weight_decay", "must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValidationError(f"{prefix}.betas", "must lie in [0, 1)")
        if self.warmup_rounds < 0:
            raise ValidationError(f"{prefix}.warmup_rounds", "must be non-negative")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ValidationError(f"{prefix}.min_lr_ratio", "must lie in [0, 1]")


@dataclass
class ContrastiveConfig:
    """Server-side consistency training."""
    temperature: float = 0.2
    queue_size: int = 256
    decay: float = 0.99  # EMA theta
    lr: float = 1e-3
    batch_size: int = 32
    view_source: ViewSource = ViewSource.DECODER
    negatives: NegativeMode = NegativeMode.WITH_POSITIVE
    enabled: bool = True

    def validate(self, prefix: str = "contrastive") -> None:
        if self.temperature <= 0:
            raise ValidationError(f"{prefix}.temperature", "must be positive")
        if self.queue_size < 1:
            raise ValidationError(f"{prefix}.queue_size", "must be at least 1")
        if not 0.0 <= self.decay <= 1.0:
            raise ValidationError(f"{prefix}.decay", "must lie in [0, 1]")
        if self.lr < 0 or self.batch_size < 1:
            raise ValidationError(f"{prefix}.lr", "lr must be non-negative and batch_size positive")


@dataclass
class DatasetSpec:
    kind: DatasetKind = DatasetKind.SYNTHETIC
    num_classes: int = 2
    per_class: int = 200
    noise: float = 0.1
    test_fraction: float = 0.2
    server_fraction: float = 0.1  # carved from train before partitioning
    folder: Optional[Path] = None
    manifest: Optional[Path] = None
    classes: Tuple[str, ...] = ()  # folder datasets: label names in class-index order

    def validate(self, prefix: str = "dataset") -> None:
        if self.num_classes < 2:
            raise ValidationError(f"{prefix}.num_classes", "needs at least 2 classes")
        if self.per_class < 1:
            raise ValidationError(f"{prefix}.per_class", "must be positive")
        if self.noise < 0:
            raise ValidationError(f"{prefix}.noise", "must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError(f"{prefix}.test_fraction", "must lie in (0, 1)")
        if not 0.0 < self.server_fraction < 1.0:
            raise ValidationError(f"{prefix}.server_fraction", "must lie in (0, 1)")
        if self.kind == DatasetKind.FOLDER:
            if self.folder is None or self.manifest is None:
                raise ValidationError(f"{prefix}.folder", "folder datasets need folder and manifest")
            if self.classes and len(self.classes) != self.num_classes:
                raise ValidationError(f"{prefix}.classes", "needs one name per class")


@dataclass
class PartitionConfig:
    delta: float = 0.5  # Dirichlet concentration
    size_multipliers: Tuple[float, ...] = ()  # optional quantity skew
    min_samples: int = 8

    def validate(self, prefix: str = "partition") -> None:
        if self.delta <= 0:
            raise ValidationError(f"{prefix}.delta", "must be positive")
        if any(m <= 0 for m in self.size_multipliers):
            raise ValidationError(f"{prefix}.size_multipliers", "must be positive")
        if self.min_samples < 0:
            raise ValidationError(f"{prefix}.min_samples", "must be non-negative")


@dataclass
class ExperimentConfig:
    """Top-level configuration for one seeded run."""
    seed: Optional[int] = None
    mode: RunMode = RunMode.FULL
    label_fraction: float = 0.1
    output_dir: Path = Path("runs/selffed")
    workers: int = 1
    probe_steps: int = 200
    init_checkpoint: Optional[Path] = None  # finetune-only: phase-1 weights
    log_level: str = "INFO"
    log_file: Optional[Path] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionConfig = field(default_factory=PartitionConfig)

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ValidationError("seed", "is required")
        if self.seed < 0:
            raise ValidationError("seed", "must be non-negative")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValidationError("label_fraction", "must lie in [0, 1]")
        if self.workers < 1:
            raise ValidationError("workers", "must be at least 1")
        if self.probe_steps < 1:
            raise ValidationError("probe_steps", "must be positive")
        if self.mode == RunMode.FINETUNE_ONLY and self.init_checkpoint is None:
            raise ValidationError("init_checkpoint", "finetune-only runs start from a checkpoint")
        self.arch.validate()
        self.masking.validate()
        self.federation.validate()
        self.optim.validate()
        self.contrastive.validate()
        self.augment.pretrain.validate("augment.pretrain")
        self.augment.finetune.validate("augment.finetune")
        for name, spec in (("pretrain", self.augment.pretrain), ("finetune", self.augment.finetune)):
            if spec.crop_size not in (None, self.arch.image_size):
                raise ValidationError(f"augment.{name}.crop_size", "views must keep the model's image size")
        if self.augment.pretrain.phase != Phase.PRETRAIN:
            raise ValidationError("augment.pretrain.phase", "must be 'pretrain'")
        if self.augment.finetune.phase != Phase.FINETUNE:
            raise ValidationError("augment.finetune.phase", "must be 'finetune'")
        self.dataset.validate()
        self.partition.validate()
        if self.partition.size_multipliers and len(self.partition.size_multipliers) != self.federation.num_clients:
            raise ValidationError("partition.size_multipliers", "needs one multiplier per client")
        return self


# -- dict / file conversion -------------------------------------------------

def _coerce(value: Any, hint: Any, name: str) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], name)

    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ValidationError(name, "must be a table")
        return _build(hint, value, name)

    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(m.value for m in hint)
            raise ValidationError(name, f"must be one of: {choices}") from None

    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(name, "must be an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], name) for v in value)
        if len(value) != len(args):
            raise ValidationError(name, f"must have {len(args)} entries")
        return tuple(_coerce(v, a, name) for v, a in zip(value, args))

    if hint is bool:
        if not isinstance(value, bool):
            raise ValidationError(name, "must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(name, "must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(name, "must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ValidationError(name, "must be a string")
        return value
    if hint is Path:
        if not isinstance(value, (str, Path)):
            raise ValidationError(name, "must be a path string")
        return Path(value)
    return value


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ValidationError(name, "unknown key")
        kwargs[key] = _coerce(value, hints[key], name)
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from plain data."""
    return _build(ExperimentConfig, data).validate()


def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Plain-data echo of a config; config_from_dict inverts it exactly."""
    return _plain(cfg)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ParseError(f"Duplicate key: {key}")
        out[key] = value
    return out


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load, default and validate a config file.

    `.json` files are read as config echoes (as written into run
    summaries); anything else is parsed as TOML.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            data = json.loads(text, object_pairs_hook=_reject_duplicates)
        else:
            data = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a table")
    return config_from_dict(_drop_nulls(data))


def _drop_nulls(data: Dict[str, Any]) -> Dict[str, Any]:
    """JSON echoes carry nulls for unset optionals; treat them as absent."""
    return {
        k: _drop_nulls(v) if isinstance(v, dict) else v
        for k, v in data.items() if v is not None
    }
