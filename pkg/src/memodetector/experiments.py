"""
Ablation and variant sweeps

Each experiment is a named RunConfig trained and evaluated once per seed.
Results are written as metrics.csv (one row per experiment x seed plus a
mean row and a std row per experiment) and summary.csv (one row per
experiment with mean and std columns for every headline metric).
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from .config_manager import RunConfig
from .encoders import EncoderBackend, build_backend
from .enhancer import FOUR_STEPS, EnhancementStep
from .errors import ConfigError
from .fusion import FusionVariant
from .manifest import DatasetManifest, Split, filter_language, split_view
from .metrics import METRIC_NAMES, SeedSummary
from .training import checkpoint_payload, evaluate, train

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
LABEL_SEPARATOR = "|"

ROW_SEED = "seed"
ROW_MEAN = "mean"
ROW_STD = "std"

DESCRIPTION_COLUMNS = ("sweep", "name", "dataset", "variant", "steps", "param_count", "config_hash", "labels")


@dataclass(frozen=True)
class Experiment:
    """One named configuration of a sweep"""
    name: str
    config: RunConfig
    sweep: str = ""


@dataclass
class SweepResult:
    per_seed: pd.DataFrame
    summary: pd.DataFrame
    metrics_path: Optional[Path] = None
    summary_path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.summary)


def _steps_label(steps: Sequence[EnhancementStep]) -> str:
    return ",".join(s.value for s in steps)


def ablation_configs(base: RunConfig) -> List[Experiment]:
    """Full model, w/o dual-stage fusion, and one row per removed enhancement step"""
    if set(base.steps) != set(FOUR_STEPS):
        raise ConfigError("ablations start from a base config that uses all four enhancement steps")
    experiments = [
        Experiment("full", base, "ablation"),
        Experiment("w/o DF", base.replace(fusion_variant=FusionVariant.NO_DUALSTAGE.value), "ablation"),
    ]
    for step in FOUR_STEPS:
        kept = [s for s in base.steps if s != step]
        experiments.append(Experiment(f"w/o {step.value}", base.replace(fusion_steps=_steps_label(kept)), "ablation"))
    return experiments


def variant_configs(base: RunConfig) -> List[Experiment]:
    """The four second-stage fusion strategies"""
    variants = (FusionVariant.BIDIRECTIONAL_XATTN, FusionVariant.ADD,
                FusionVariant.CONCAT, FusionVariant.ONEWAY_XATTN)
    return [Experiment(v.value, base.replace(fusion_variant=v.value), "fusion") for v in variants]


def enhancement_configs(base: RunConfig) -> List[Experiment]:
    """Four-step enhancement against the single DIRECT request"""
    return [
        Experiment("four-step", base.replace(fusion_steps=_steps_label(FOUR_STEPS)), "enhancement"),
        Experiment("direct", base.replace(fusion_steps=EnhancementStep.DIRECT.value), "enhancement"),
    ]


def evaluation_split(manifest: DatasetManifest) -> Split:
    if split_view(manifest, Split.TEST):
        return Split.TEST
    logger.warning("No test instances; reporting on the val split")
    return Split.VAL


def _run_seed(experiment: Experiment, manifest: DatasetManifest, cache_path: str, out_dir: Optional[Path],
              seed: int, backend: Optional[EncoderBackend] = None) -> dict:
    """Train and evaluate one (experiment, seed); returns a metrics.csv row"""
    config = experiment.config
    run_dir = None if out_dir is None else out_dir / _dir_name(experiment.name) / f"seed-{seed}"
    result = train(config, manifest, cache_path, out_dir=run_dir, seed=seed, backend=backend)
    checkpoint = result.checkpoint_path
    if checkpoint is None:
        checkpoint = checkpoint_payload(result.model, config, filter_language(manifest, config.dataset_language),
                                        seed, result.best_epoch, result.best_val_macro_f1)
    split = evaluation_split(filter_language(manifest, config.dataset_language))
    report = evaluate(checkpoint, manifest, split, cache_path, out_dir=run_dir, backend=backend)
    return {
        **_describe(experiment, manifest, result.parameter_count),
        "row": ROW_SEED,
        "seed": seed,
        "best_epoch": result.best_epoch,
        "param_checksum": result.parameter_checksum,
        **report.headline(),
    }


def _dir_name(name: str) -> str:
    return name.replace("/", "").replace(" ", "_")


def _describe(experiment: Experiment, manifest: DatasetManifest, param_count: int) -> dict:
    config = experiment.config
    return {
        "sweep": experiment.sweep,
        "name": experiment.name,
        "dataset": config.dataset_name or manifest.name,
        "variant": config.fusion_variant,
        "steps": _steps_label(config.steps),
        "param_count": param_count,
        "config_hash": config.config_hash(),
        "labels": LABEL_SEPARATOR.join(manifest.vocab.names),
    }


def _aggregate_rows(rows: List[dict]) -> List[dict]:
    summary = SeedSummary()
    for row in rows:
        summary.per_seed[row["seed"]] = {m: row[m] for m in METRIC_NAMES}
    described = {k: rows[0][k] for k in DESCRIPTION_COLUMNS}
    return [
        {**described, "row": ROW_MEAN, **summary.mean()},
        {**described, "row": ROW_STD, **summary.std()},
    ]


def summary_table(per_seed: pd.DataFrame) -> pd.DataFrame:
    """One row per experiment: description columns plus <metric>_mean and <metric>_std"""
    records = []
    keys = per_seed[["dataset", "sweep", "name"]].astype(str).agg("\x1f".join, axis=1)
    for key in dict.fromkeys(keys):
        rows = per_seed[keys == key]
        mean = rows[rows["row"] == ROW_MEAN].iloc[0]
        std = rows[rows["row"] == ROW_STD].iloc[0]
        seeds = rows[rows["row"] == ROW_SEED]["seed"]
        record = {k: mean[k] for k in DESCRIPTION_COLUMNS}
        record["seeds"] = len(seeds)
        record.update({f"{m}_mean": float(mean[m]) for m in METRIC_NAMES})
        record.update({f"{m}_std": float(std[m]) for m in METRIC_NAMES})
        records.append(record)
    return pd.DataFrame.from_records(records)


def run_experiments(experiments: Sequence[Experiment], manifest: DatasetManifest, cache,
                    out_dir: Optional[Union[str, Path]] = None, workers: int = 1) -> SweepResult:
    """Run every experiment over its seed list

    Experiments with identical config hashes are trained once and reported
    under each name. workers > 1 runs (experiment, seed) pairs in separate
    processes; every pair writes to its own directory.
    """
    if not experiments:
        raise ConfigError("no experiments to run")
    out_dir = None if out_dir is None else Path(out_dir)
    cache_path = str(getattr(cache, "path", cache))

    unique: Dict[str, Experiment] = {}
    for experiment in experiments:
        unique.setdefault(experiment.config.config_hash(), experiment)
    jobs = [(exp, seed) for exp in unique.values() for seed in exp.config.seeds]
    logger.info("Running %d experiments (%d distinct) over %d jobs", len(experiments), len(unique), len(jobs))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed, exp, manifest, cache_path, out_dir, seed) for exp, seed in jobs]
            outcomes = [f.result() for f in futures]
    else:
        backends: Dict[str, EncoderBackend] = {}
        outcomes = []
        for exp, seed in jobs:
            key = _backend_key(exp.config)
            if key not in backends:
                backends[key] = build_backend(exp.config)
            outcomes.append(_run_seed(exp, manifest, cache_path, out_dir, seed, backends[key]))

    by_hash: Dict[str, List[dict]] = {}
    for row in outcomes:
        by_hash.setdefault(row["config_hash"], []).append(row)

    rows = []
    for experiment in experiments:
        seed_rows = [{**row, "sweep": experiment.sweep, "name": experiment.name}
                     for row in by_hash[experiment.config.config_hash()]]
        rows.extend(seed_rows)
        rows.extend(_aggregate_rows(seed_rows))

    columns = [*DESCRIPTION_COLUMNS, "row", "seed", "best_epoch", "param_checksum", *METRIC_NAMES]
    per_seed = pd.DataFrame.from_records(rows, columns=columns)
    # Aggregate rows have no seed or epoch
    per_seed = per_seed.astype({"seed": "Int64", "best_epoch": "Int64"})
    result = SweepResult(per_seed=per_seed, summary=summary_table(per_seed))

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / METRICS_FILE
        result.summary_path = out_dir / SUMMARY_FILE
        per_seed.to_csv(result.metrics_path, index=False, float_format="%.6f")
        result.summary.to_csv(result.summary_path, index=False, float_format="%.6f")
        logger.info("Wrote %s and %s", result.metrics_path, result.summary_path)
    return result


def _backend_key(config: RunConfig) -> str:
    return "|".join(str(v) for v in (config.encoder_variant, config.encoder_seed, config.encoder_dim,
                                     config.encoder_patches, config.encoder_vision_id, config.encoder_text_id,
                                     config.encoder_freeze, config.encoder_device))


def run_ablations(base_config: RunConfig, manifest: DatasetManifest, cache,
                  out_dir: Optional[Union[str, Path]] = None) -> SweepResult:
    """Full model plus the five ablations, each averaged over the seed list"""
    return run_experiments(ablation_configs(base_config), manifest, cache, out_dir, base_config.train_workers)


def run_variant_comparison(base_config: RunConfig, manifest: DatasetManifest, cache,
                           out_dir: Optional[Union[str, Path]] = None,
                           sweeps: Sequence[str] = ("fusion", "enhancement")) -> SweepResult:
    """Fusion-strategy sweep (4 rows) and enhancement-strategy sweep (2 rows)"""
    experiments: List[Experiment] = []
    if "fusion" in sweeps:
        experiments.extend(variant_configs(base_config))
    if "enhancement" in sweeps:
        experiments.extend(enhancement_configs(base_config))
    return run_experiments(experiments, manifest, cache, out_dir, base_config.train_workers)
