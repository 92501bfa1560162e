"""Pipeline configuration: a strict JSON key-value tree.

Every section mirrors one pipeline stage; unknown keys are rejected with the
offending key path so typos fail loudly. An empty config file yields all
defaults. serialize() emits canonical JSON whose sha256 identifies the run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass
class CohortSection:
    n_train: int = 300
    n_test: int = 100
    grid_rows: int = 10
    grid_cols: int = 10
    tile_px: int = 224
    mixture_mean_low: float = 6.5
    mixture_mean_high: float = 9.5
    mixture_sd_low: float = 0.8
    mixture_sd_high: float = 0.8
    mixture_weight_low: float = 0.55
    signal_strength: float = 1.0
    marker_fraction: float = 0.1


@dataclass
class PreprocessSection:
    saturation_threshold: float = 0.08
    luminance_threshold: float = 0.92
    min_tissue_fraction: float = 0.5
    marker_overlap_max: float = 0.0
    blur_variance_min: float = 10.0


@dataclass
class EncoderSection:
    kind: str = "reference"
    seed: int = 1234
    external_path: str | None = None


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 60
    patience: int = 8
    bags_per_step: int = 1
    max_tiles_per_bag: int | None = None
    decoupled_weight_decay: bool = False
    # final-model selection grid; empty lists mean {learning_rate} x {weight_decay}
    grid_learning_rates: list = field(default_factory=list)
    grid_weight_decays: list = field(default_factory=list)


@dataclass
class CvSection:
    n_folds: int = 5
    magnifications: list = field(default_factory=lambda: ["x20", "x10", "x5"])
    compare_label_modes: bool = True


@dataclass
class TitrationSection:
    fractions: list = field(default_factory=lambda: [0.33, 0.67, 1.0])
    repeats: int = 3


@dataclass
class EvalSection:
    target_sensitivity: float = 0.8
    n_resamples: int = 2000
    subgroup_attributes: list = field(default_factory=lambda: [
        "gender", "smoking_status", "specimen_size", "tissue_site", "scanner"])
    subgroup_resamples: int = 500


@dataclass
class PerturbSection:
    n_levels: int = 10
    repeats: int = 5
    brightness_step: float = 0.05
    contrast_step: float = 0.05
    saturation_step: float = 0.05
    hue_step_deg: float = 6.0
    # slide subsample for the sweep (re-tiling and re-encoding every
    # (level, repeat) cell is the pipeline's most expensive stage)
    max_slides: int = 16


@dataclass
class ScannerSection:
    profile: str = "warm_shift"
    max_slides: int = 24


@dataclass
class InterpretSection:
    mass_fraction: float = 0.1
    n_buckets: int = 10
    k_per_bucket: int = 8


@dataclass
class ReplicateSection:
    run_cv: bool = True
    run_titration: bool = True
    run_perturbation: bool = True
    run_scanner_shift: bool = True
    run_interpret: bool = True
    permute_labels: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    magnification: str = "x20"
    cohort: CohortSection = field(default_factory=CohortSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    cv: CvSection = field(default_factory=CvSection)
    titration: TitrationSection = field(default_factory=TitrationSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    scanner: ScannerSection = field(default_factory=ScannerSection)
    interpret: InterpretSection = field(default_factory=InterpretSection)
    replicate: ReplicateSection = field(default_factory=ReplicateSection)


_SCALARS = (int, float, str, bool, type(None))


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigurationError(f"unknown config key {where!r}")
        f = fields[key]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.default_factory, type)
                                                and dataclasses.is_dataclass(f.default_factory)):
            kwargs[key] = _from_dict(f.default_factory, value, where)
        elif isinstance(value, dict):
            raise ConfigurationError(f"{where}: unexpected nested object")
        elif isinstance(value, list):
            kwargs[key] = list(value)
        elif isinstance(value, _SCALARS):
            kwargs[key] = value
        else:
            raise ConfigurationError(f"{where}: unsupported value type {type(value).__name__}")
    return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    """Parse a JSON config; empty file -> defaults; unknown keys rejected."""
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return PipelineConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    return from_dict(data)


def from_dict(data: dict) -> PipelineConfig:
    return _from_dict(PipelineConfig, data, "")


def to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def canonical_dict(config: PipelineConfig) -> dict:
    """Config dict with execution-only fields normalized (worker count cannot
    change any output, so it is not part of a run's identity)."""
    d = to_dict(config)
    d["workers"] = 1
    return d


def serialize(config: PipelineConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(canonical_dict(config), indent=2, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
