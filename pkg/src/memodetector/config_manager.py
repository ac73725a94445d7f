"""
Configuration Manager for memodetector

Handles run configuration for every pipeline stage:
- dataset location, language filter and split generation
- MLLM endpoint settings for text enhancement
- encoder backend, fusion variant and training hyperparameters

Uses a simple key=value config file format with [section] headers for easy
manual editing. A key written as `variant` under `[encoder]` is the dotted
key `encoder.variant`; dotted keys may also appear at top level.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields, replace as dc_replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch

from .enhancer import EnhancementStep, FOUR_STEPS
from .errors import ConfigError
from .fusion import FusionVariant
from .manifest import parse_ratio

ENCODER_VARIANTS = ("pretrained", "toy")
OPTIMIZERS = ("adamw", "adam", "sgd")
PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class ConfigKey:
    """One documented configuration key"""
    name: str
    type: type
    default: Any
    help: str
    choices: Optional[Tuple[str, ...]] = None

    @property
    def section(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def field_name(self) -> str:
        return self.name.replace(".", "_")


CONFIG_SCHEMA: Tuple[ConfigKey, ...] = (
    # Dataset
    ConfigKey("dataset.name", str, "", "dataset name used in reports (defaults to the manifest header name)"),
    ConfigKey("dataset.manifest", str, "", "path to the JSON Lines manifest"),
    ConfigKey("dataset.language", str, "", "keep only memes with this language tag (empty = all)"),
    ConfigKey("split.ratio", str, "8:1:1", "train:val:test ratio used by the split command"),
    ConfigKey("split.seed", int, 13, "seed for split assignment"),

    # MLLM enhancement
    ConfigKey("enhance.endpoint", str, "", "chat-completions URL of the multimodal LLM"),
    ConfigKey("enhance.model", str, "Qwen/Qwen2.5-VL-32B-Instruct", "model id sent to the endpoint"),
    ConfigKey("enhance.token_env", str, "MEMODETECTOR_API_TOKEN", "environment variable holding the endpoint token"),
    ConfigKey("enhance.temperature", float, 0.0, "sampling temperature"),
    ConfigKey("enhance.max_tokens", int, 512, "maximum output tokens per step"),
    ConfigKey("enhance.timeout", float, 60.0, "request timeout in seconds"),
    ConfigKey("enhance.max_retries", int, 3, "attempts per request"),
    ConfigKey("enhance.backoff", float, 1.0, "initial retry backoff in seconds (doubles per attempt)"),
    ConfigKey("enhance.workers", int, 4, "memes enhanced in parallel"),
    ConfigKey("enhance.steps", str, "ID,TM,CIM,CA", "steps generated by the enhance command"),
    ConfigKey("enhance.cache", str, "enhancements.jsonl", "enhancement cache file (relative to output.dir)"),
    ConfigKey("enhance.max_image_bytes", int, 20 * 1024 * 1024, "largest image sent to the endpoint"),

    # Encoders
    ConfigKey("encoder.variant", str, "toy", "feature encoder backend", ENCODER_VARIANTS),
    ConfigKey("encoder.vision_id", str, "google/vit-base-patch16-224-in21k", "pretrained vision transformer id"),
    ConfigKey("encoder.text_id", str, "xlm-roberta-base", "pretrained multilingual text encoder id"),
    ConfigKey("encoder.seed", int, 0, "toy encoder hash seed"),
    ConfigKey("encoder.dim", int, 32, "toy encoder feature width d"),
    ConfigKey("encoder.patches", int, 16, "toy encoder patch count n"),
    ConfigKey("encoder.freeze", bool, True, "keep pretrained backbones frozen"),
    ConfigKey("encoder.device", str, "cpu", "torch device for encoding and training"),
    ConfigKey("text.max_tokens", int, 64, "token limit for the original meme text"),
    ConfigKey("text.max_enhanced_tokens", int, 128, "token limit for each enhanced text"),

    # Fusion
    ConfigKey("fusion.variant", str, FusionVariant.BIDIRECTIONAL_XATTN.value, "second-stage fusion strategy",
              tuple(v.value for v in FusionVariant)),
    ConfigKey("fusion.steps", str, "ID,TM,CIM,CA", "enhanced texts consumed by the model (or DIRECT)"),
    ConfigKey("fusion.d_k", int, 0, "per-head key width (0 = d / heads)"),
    ConfigKey("fusion.heads", int, 1, "attention heads"),
    ConfigKey("fusion.keep_stage1", bool, False, "no_dualstage keeps the stage-1 concatenation"),

    # Training
    ConfigKey("train.optimizer", str, "adamw", "optimizer", OPTIMIZERS),
    ConfigKey("train.lr", float, 0.0, "learning rate (0 = 2e-4 toy / 2e-5 pretrained)"),
    ConfigKey("train.weight_decay", float, 0.01, "weight decay"),
    ConfigKey("train.batch_size", int, 16, "batch size"),
    ConfigKey("train.epochs", int, 30, "maximum epochs"),
    ConfigKey("train.patience", int, 5, "early-stopping patience on val macro-F1 (0 disables)"),
    ConfigKey("train.seeds", str, "1,2,3,4,5", "comma-separated seeds averaged in sweeps"),
    ConfigKey("train.precision", str, "float32", "floating-point precision", PRECISIONS),
    ConfigKey("train.workers", int, 1, "parallel sweep processes"),

    # Output
    ConfigKey("output.dir", str, "runs", "directory every command writes under"),
)

SCHEMA_BY_NAME: Dict[str, ConfigKey] = {key.name: key for key in CONFIG_SCHEMA}

SECTION_TITLES = {
    "dataset": "Dataset",
    "split": "Split Generation",
    "enhance": "MLLM Enhancement",
    "encoder": "Encoders",
    "text": "Text Limits",
    "fusion": "Fusion Model",
    "train": "Training",
    "output": "Output",
}

# Keys that do not influence what a training run computes
HASH_EXCLUDED_PREFIXES = ("enhance.",)
HASH_EXCLUDED_KEYS = ("output.dir", "train.workers")


def parse_steps(value: str) -> Tuple[EnhancementStep, ...]:
    """Parse 'ID,TM' style step lists into canonical order"""
    names = [p.strip().upper() for p in str(value).split(",") if p.strip()]
    try:
        steps = {EnhancementStep(n) for n in names}
    except ValueError as e:
        raise ConfigError(f"unknown enhancement step in '{value}': {e}")
    order = list(FOUR_STEPS) + [EnhancementStep.DIRECT]
    return tuple(s for s in order if s in steps)


def parse_seeds(value: str) -> Tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(value).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got '{value}'")


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of one run, one field per dotted key"""
    dataset_name: str
    dataset_manifest: str
    dataset_language: str
    split_ratio: str
    split_seed: int
    enhance_endpoint: str
    enhance_model: str
    enhance_token_env: str
    enhance_temperature: float
    enhance_max_tokens: int
    enhance_timeout: float
    enhance_max_retries: int
    enhance_backoff: float
    enhance_workers: int
    enhance_steps: str
    enhance_cache: str
    enhance_max_image_bytes: int
    encoder_variant: str
    encoder_vision_id: str
    encoder_text_id: str
    encoder_seed: int
    encoder_dim: int
    encoder_patches: int
    encoder_freeze: bool
    encoder_device: str
    text_max_tokens: int
    text_max_enhanced_tokens: int
    fusion_variant: str
    fusion_steps: str
    fusion_d_k: int
    fusion_heads: int
    fusion_keep_stage1: bool
    train_optimizer: str
    train_lr: float
    train_weight_decay: float
    train_batch_size: int
    train_epochs: int
    train_patience: int
    train_seeds: str
    train_precision: str
    train_workers: int
    output_dir: str

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_dict({})

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        """Build from dotted or underscored keys; unknown keys raise ConfigError"""
        kwargs = {key.field_name: key.default for key in CONFIG_SCHEMA}
        by_field = {key.field_name: key for key in CONFIG_SCHEMA}
        for name, value in values.items():
            key = SCHEMA_BY_NAME.get(name) or by_field.get(name)
            if key is None:
                raise ConfigError(f"unknown configuration key '{name}'")
            kwargs[key.field_name] = coerce_value(key, value)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        """Dotted-key mapping of every value"""
        values = asdict(self)
        return {key.name: values[key.field_name] for key in CONFIG_SCHEMA}

    def replace(self, **changes) -> "RunConfig":
        renamed = {k.replace(".", "_"): v for k, v in changes.items()}
        return dc_replace(self, **renamed)

    @property
    def steps(self) -> Tuple[EnhancementStep, ...]:
        return parse_steps(self.fusion_steps)

    @property
    def enhance_step_list(self) -> Tuple[EnhancementStep, ...]:
        return parse_steps(self.enhance_steps)

    @property
    def seeds(self) -> Tuple[int, ...]:
        return parse_seeds(self.train_seeds)

    @property
    def variant(self) -> FusionVariant:
        return FusionVariant(self.fusion_variant)

    @property
    def effective_lr(self) -> float:
        if self.train_lr > 0:
            return self.train_lr
        return 2e-4 if self.encoder_variant == "toy" else 2e-5

    def effective_d_k(self, d: int) -> int:
        """Per-head key width for feature width d"""
        if self.fusion_d_k > 0:
            return self.fusion_d_k
        return d // self.fusion_heads

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.train_precision == "float64" else torch.float32

    @property
    def cache_path(self) -> Path:
        path = Path(self.enhance_cache)
        return path if path.is_absolute() else Path(self.output_dir) / path

    def config_hash(self) -> str:
        """Digest over the settings that determine a training run's numbers"""
        relevant = {k: v for k, v in self.to_dict().items()
                    if not k.startswith(HASH_EXCLUDED_PREFIXES) and k not in HASH_EXCLUDED_KEYS}
        blob = json.dumps(relevant, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> List[str]:
        """Return a list of issues (empty when valid)"""
        return validate_values(self.to_dict())


def coerce_value(key: ConfigKey, value: Any) -> Any:
    """Convert a raw file/CLI value to the key's declared type"""
    if key.type is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "yes", "on", "1"):
            return True
        if text in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key.name}: expected a boolean, got '{value}'")
    if key.type is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key.name}: expected an integer, got '{value}'")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key.name}: expected an integer, got '{value}'")
    if key.type is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key.name}: expected a number, got '{value}'")
    return "" if value is None else str(value)


def validate_values(values: Dict[str, Any]) -> List[str]:
    """Check every key against the schema; returns a list of issues"""
    issues = []
    for key in CONFIG_SCHEMA:
        if key.choices and values[key.name] not in key.choices:
            issues.append(f"Invalid {key.name} '{values[key.name]}'. Must be one of: {', '.join(key.choices)}")

    for name in ("fusion.steps", "enhance.steps"):
        try:
            steps = set(parse_steps(values[name]))
        except ConfigError as e:
            issues.append(str(e))
            continue
        if not steps:
            issues.append(f"{name} is empty; enable at least one enhancement step")
        elif name == "fusion.steps" and EnhancementStep.DIRECT in steps and len(steps) > 1:
            issues.append(f"{name}: DIRECT cannot be combined with the four-step chain")

    try:
        if not parse_seeds(values["train.seeds"]):
            issues.append("train.seeds is empty")
    except ConfigError as e:
        issues.append(str(e))

    try:
        parse_ratio(values["split.ratio"])
    except ValueError as e:
        issues.append(str(e))

    for name in ("train.batch_size", "train.epochs", "text.max_tokens", "text.max_enhanced_tokens",
                 "encoder.dim", "encoder.patches", "fusion.heads", "enhance.max_tokens",
                 "enhance.max_retries", "enhance.workers", "train.workers"):
        if values[name] < 1:
            issues.append(f"{name} must be positive")
    for name in ("train.patience", "fusion.d_k", "train.lr", "train.weight_decay",
                 "enhance.temperature", "enhance.backoff"):
        if values[name] < 0:
            issues.append(f"{name} cannot be negative")

    if values["encoder.variant"] == "toy" and values["fusion.heads"] >= 1 and values["fusion.d_k"] == 0:
        if values["encoder.dim"] % values["fusion.heads"]:
            issues.append(f"fusion.heads ({values['fusion.heads']}) must divide encoder.dim ({values['encoder.dim']})")
    return issues


class ConfigManager:
    """Loads, merges and writes memodetector configuration files"""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.config_file = Path(config_file) if config_file else None
        self._file_values: Dict[str, Any] = {}
        self._overrides: Dict[str, Any] = {}
        if self.config_file is not None:
            self._file_values = self._load_file(self.config_file)

    def _load_file(self, path: Path) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8", newline=None) as f:
                content = f.read()
        except (IOError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        return self._parse_config_file(content)

    def _parse_config_file(self, content: str) -> Dict[str, Any]:
        """Parse key=value config file format with [section] headers"""
        values = {}
        section = ""

        for line_num, line in enumerate(content.splitlines(), 1):
            line = line.strip()

            # Skip empty lines and comments
            if not line or line.startswith("#"):
                continue

            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue

            if "=" not in line:
                raise ConfigError(f"config line {line_num}: expected 'key = value'")

            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()

            # Remove quotes if present
            if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
                value = value[1:-1]

            name = key if "." in key or not section else f"{section}.{key}"
            schema_key = SCHEMA_BY_NAME.get(name)
            if schema_key is None:
                raise ConfigError(f"config line {line_num}: unknown key '{name}'")
            values[name] = coerce_value(schema_key, value)

        return values

    def _format_config_file(self, values: Dict[str, Any], with_help: bool = False) -> str:
        """Format values as a key=value file grouped by section"""
        lines = [
            "# memodetector configuration file",
            "# Edit this file to customize your settings",
            "",
        ]
        section = None
        for key in CONFIG_SCHEMA:
            if key.name not in values:
                continue
            if key.section != section:
                if section is not None:
                    lines.append("")
                section = key.section
                lines.append(f"# {SECTION_TITLES.get(section, section)}")
                lines.append(f"[{section}]")
            if with_help:
                choices = f" ({' | '.join(key.choices)})" if key.choices else ""
                lines.append(f"# {key.help}{choices}")
            value = values[key.name]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, str) and (value == "" or " " in value or '"' in value or "'" in value):
                value = f'"{value}"'
            lines.append(f"{key.name.split('.', 1)[1]} = {value}")
        return "\n".join(lines) + "\n"

    def set_overrides(self, overrides: Dict[str, Any]):
        """Apply CLI override values (dotted keys); None means 'not given'"""
        for name, value in overrides.items():
            if value is None:
                continue
            key = SCHEMA_BY_NAME.get(name)
            if key is None:
                raise ConfigError(f"unknown configuration key '{name}'")
            self._overrides[name] = coerce_value(key, value)

    def get(self, key: str, default: Any = None) -> Any:
        """Get an effective configuration value"""
        return self.get_all().get(key, default)

    def get_all(self) -> Dict[str, Any]:
        """All effective values: defaults < file < overrides"""
        values = {key.name: key.default for key in CONFIG_SCHEMA}
        values.update(self._file_values)
        values.update(self._overrides)
        return values

    def validate_config(self) -> List[str]:
        """Validate the effective configuration and return any issues"""
        return validate_values(self.get_all())

    def to_run_config(self) -> RunConfig:
        issues = self.validate_config()
        if issues:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(issues))
        return RunConfig.from_dict(self.get_all())

    def save(self, path: Union[str, Path]) -> Path:
        """Write the effective configuration atomically"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        content = self._format_config_file(self.get_all())
        temp_path = None
        try:
            with tempfile.NamedTemporaryFile(
                mode="w",
                dir=path.parent,
                delete=False,
                suffix=".tmp",
                encoding="utf-8",
                newline="\n",
            ) as tmp_file:
                tmp_file.write(content)
                tmp_file.flush()
                os.fsync(tmp_file.fileno())
                temp_path = tmp_file.name

            os.replace(temp_path, path)
        except (IOError, OSError) as e:
            if temp_path:
                try:
                    os.unlink(temp_path)
                except OSError:
                    pass
            raise ConfigError(f"Failed to save configuration: {e}")
        return path

    def format_effective(self) -> str:
        return self._format_config_file(self.get_all())

    def example_config(self) -> str:
        """Documented example file listing every key with its default"""
        header = (
            "# memodetector - example configuration file\n"
            "#\n"
            "# Every key can also be overridden on the command line, e.g. --encoder.variant toy\n"
            "# The endpoint token is read from the environment variable named by enhance.token_env\n"
            "#\n"
        )
        defaults = {key.name: key.default for key in CONFIG_SCHEMA}
        return header + self._format_config_file(defaults, with_help=True)
