"""
Training and evaluation

train() fits a MemeEmotionModel on the train split, logs one JSON line per
epoch and keeps the checkpoint with the best validation macro-F1.
evaluate() reloads a checkpoint and scores a split.

Every number a run logs is a function of (config, seed, cache): parameters
are initialised under torch.manual_seed, batches are drawn from a seeded
generator and frozen encoders are run once up front.
"""

import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from tqdm import tqdm

from .config_manager import RunConfig
from .encoders import EncoderBackend, FeatureBundle, build_backend, encode_bundle
from .enhancement_cache import EnhancementCache
from .enhancer import coverage_gaps, load_record
from .errors import ConfigError, CoverageError, NumericError, VocabMismatchError
from .fusion import MemeEmotionModel, collate, parameter_checksum, parameter_count
from .manifest import DatasetManifest, MemeInstance, Split, filter_language, split_view
from .metrics import MetricsReport, compute_metrics

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
CHECKPOINT_NAME = "checkpoint.pt"
EPOCH_LOG_NAME = "epoch_log.jsonl"


def cross_entropy(probabilities: torch.Tensor, labels: Union[int, torch.Tensor]) -> torch.Tensor:
    """Mean of -log p[label], with p floored at 1e-12"""
    if probabilities.dim() == 1:
        probabilities = probabilities.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=probabilities.device).reshape(-1)
    picked = probabilities.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROBABILITY_FLOOR)).mean()


@dataclass
class TrainResult:
    """What a training run produced"""
    model: MemeEmotionModel
    checkpoint_path: Optional[Path]
    epoch_log_path: Optional[Path]
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_macro_f1: float = -1.0
    seed: int = 0

    @property
    def parameter_count(self) -> int:
        return parameter_count(self.model)

    @property
    def parameter_checksum(self) -> str:
        return parameter_checksum(self.model)


class BundleSource:
    """Feature bundles for a list of memes

    Frozen encoders are run once and the bundles reused every epoch; an
    unfrozen backbone re-encodes each batch so gradients reach it.
    """

    def __init__(self, backend: EncoderBackend, memes: Sequence[MemeInstance], records: dict,
                 config: RunConfig, image_root: Optional[Path], precompute: bool, desc: str = "encode"):
        self.backend = backend
        self.memes = list(memes)
        self.records = records
        self.config = config
        self.image_root = image_root
        self._cached: Optional[List[FeatureBundle]] = None
        if precompute:
            with torch.no_grad():
                self._cached = [
                    self._encode(meme) for meme in tqdm(self.memes, desc=desc, unit="meme",
                                                        disable=not logger.isEnabledFor(logging.INFO))
                ]

    def _encode(self, meme: MemeInstance) -> FeatureBundle:
        return encode_bundle(self.backend, meme, self.records[meme.id], self.config, image_root=self.image_root)

    def __len__(self) -> int:
        return len(self.memes)

    def get(self, indices: Sequence[int]) -> List[FeatureBundle]:
        if self._cached is not None:
            return [self._cached[i] for i in indices]
        return [self._encode(self.memes[i]) for i in indices]

    def labels(self, indices: Sequence[int]) -> List[int]:
        return [self.memes[i].label for i in indices]


def _open_cache(cache) -> EnhancementCache:
    return cache if isinstance(cache, EnhancementCache) else EnhancementCache(cache)


def _prepare_manifest(manifest: DatasetManifest, config: RunConfig) -> DatasetManifest:
    return filter_language(manifest, config.dataset_language)


def _selection_split(manifest: DatasetManifest) -> Tuple[List[MemeInstance], str]:
    val = split_view(manifest, Split.VAL)
    if val:
        return val, Split.VAL.value
    logger.warning("No val instances; selecting the checkpoint on the train split")
    return split_view(manifest, Split.TRAIN), Split.TRAIN.value


def check_coverage(cache: EnhancementCache, memes: Sequence[MemeInstance], config: RunConfig):
    """Raise CoverageError listing every (meme_id, step) the cache lacks"""
    gaps = coverage_gaps(cache, memes, config.steps)
    if gaps:
        raise CoverageError(gaps)


def _records(cache: EnhancementCache, memes: Sequence[MemeInstance], config: RunConfig) -> dict:
    return {meme.id: load_record(cache, meme.id, config.steps, meme_text=meme.text) for meme in memes}


def _make_optimizer(config: RunConfig, params) -> torch.optim.Optimizer:
    lr = config.effective_lr
    if config.train_optimizer == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=config.train_weight_decay)
    if config.train_optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=config.train_weight_decay)
    if config.train_optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, weight_decay=config.train_weight_decay)
    raise ConfigError(f"unknown optimizer '{config.train_optimizer}'")


def _batches(n: int, batch_size: int, generator: Optional[torch.Generator] = None) -> List[List[int]]:
    order = torch.randperm(n, generator=generator).tolist() if generator is not None else list(range(n))
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict(model: MemeEmotionModel, source: BundleSource, config: RunConfig) -> Tuple[List[int], List[List[float]]]:
    """Predicted class and probabilities per meme, in source order"""
    model.eval()
    predictions, probabilities = [], []
    with torch.no_grad():
        for indices in _batches(len(source), config.train_batch_size):
            batch = collate(source.get(indices), model.steps, config.dtype)
            output = model(_to_device(batch, config))
            predictions.extend(output.predictions.cpu().tolist())
            probabilities.extend(output.probabilities.cpu().tolist())
    return predictions, probabilities


def _to_device(batch, config: RunConfig):
    if config.encoder_device == "cpu":
        return batch
    device = torch.device(config.encoder_device)
    for name in ("visual", "visual_mask", "text", "text_mask", "enhanced", "enhanced_mask", "labels"):
        value = getattr(batch, name)
        if value is not None:
            setattr(batch, name, value.to(device))
    return batch


def train_step(model: MemeEmotionModel, optimizer: torch.optim.Optimizer, bundles: Sequence[FeatureBundle],
               labels: Sequence[int], config: RunConfig) -> float:
    """One optimizer step on a batch; returns the batch loss before the step"""
    model.train()
    batch = _to_device(collate(bundles, model.steps, config.dtype, labels), config)
    output = model(batch)
    loss = cross_entropy(output.probabilities, batch.labels)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss ({loss.item()}); "
                           f"max |logit| = {output.logits.abs().max().item():.3g}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def checkpoint_payload(model: MemeEmotionModel, config: RunConfig, manifest: DatasetManifest,
                        seed: int, epoch: int, val_macro_f1: float) -> dict:
    return {
        "state_dict": model.state_dict(),
        "config": config.to_dict(),
        "vocab": list(manifest.vocab.names),
        "dataset": manifest.name,
        "seed": seed,
        "epoch": epoch,
        "val_macro_f1": val_macro_f1,
        "d": model.d,
        "visual_dim": model.visual_dim,
        "num_classes": model.num_classes,
    }


def train(config: RunConfig, manifest: DatasetManifest, cache, out_dir: Optional[Union[str, Path]] = None,
          seed: Optional[int] = None, backend: Optional[EncoderBackend] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit a model on the train split and keep the best-val-macro-F1 checkpoint

    out_dir receives epoch_log.jsonl and checkpoint.pt; with out_dir None
    nothing is written and the best state is kept in memory only.
    """
    seed = config.seeds[0] if seed is None else seed
    manifest = _prepare_manifest(manifest, config)
    cache = _open_cache(cache)
    train_memes = split_view(manifest, Split.TRAIN)
    if not train_memes:
        raise ConfigError("the manifest has no train instances")
    val_memes, val_name = _selection_split(manifest)

    train_ids = {m.id for m in train_memes}
    selection_only = [m for m in val_memes if m.id not in train_ids]
    check_coverage(cache, train_memes + selection_only, config)
    records = _records(cache, train_memes + selection_only, config)
    backend = backend or build_backend(config)
    frozen = config.encoder_freeze or not backend.trainable_modules()
    train_source = BundleSource(backend, train_memes, records, config, manifest.root, frozen, "encode train")
    val_source = BundleSource(backend, val_memes, records, config, manifest.root, frozen, "encode val")

    torch.manual_seed(seed)
    model = MemeEmotionModel.from_config(config, d=backend.dim, num_classes=manifest.vocab.size,
                                         visual_dim=backend.visual_dim)
    model = model.to(dtype=config.dtype, device=torch.device(config.encoder_device))
    params = list(model.parameters())
    for module in backend.trainable_modules():
        params.extend(p for p in module.parameters() if p.requires_grad)
    optimizer = _make_optimizer(config, params)
    generator = torch.Generator().manual_seed(seed)

    log_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / EPOCH_LOG_NAME
        ckpt_path = out_dir / CHECKPOINT_NAME
        log_path.write_text("", encoding="utf-8")

    logger.info("Training %s (%d params) on %d memes, selecting on %s (%d), seed %d",
                model.variant.value, parameter_count(model), len(train_memes), val_name, len(val_memes), seed)

    result = TrainResult(model=model, checkpoint_path=ckpt_path, epoch_log_path=log_path, seed=seed)
    best_state = None
    stale = 0
    epochs = tqdm(range(1, config.train_epochs + 1), desc=f"train seed {seed}", unit="epoch",
                  disable=not logger.isEnabledFor(logging.INFO))
    for epoch in epochs:
        total, seen = 0.0, 0
        for indices in _batches(len(train_source), config.train_batch_size, generator):
            try:
                loss = train_step(model, optimizer, train_source.get(indices), train_source.labels(indices), config)
            except NumericError as e:
                ids = ", ".join(train_source.memes[i].id for i in indices)
                raise NumericError(f"epoch {epoch}: {e} (batch memes: {ids})")
            total += loss * len(indices)
            seen += len(indices)

        train_pred, _ = predict(model, train_source, config)
        train_report = compute_metrics(train_source.labels(range(len(train_source))), train_pred,
                                       manifest.vocab.size)
        val_pred, _ = predict(model, val_source, config)
        val_report = compute_metrics(val_source.labels(range(len(val_source))), val_pred, manifest.vocab.size)

        entry = {
            "epoch": epoch,
            "train_loss": total / seen,
            "train_accuracy": train_report.accuracy,
            "val_accuracy": val_report.accuracy,
            "val_macro_f1": val_report.macro_f1,
        }
        result.history.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")
        if on_epoch is not None:
            on_epoch(entry)

        if not math.isfinite(entry["train_loss"]):
            raise NumericError(f"epoch {epoch}: non-finite mean training loss")

        if val_report.macro_f1 > result.best_val_macro_f1:
            result.best_val_macro_f1 = val_report.macro_f1
            result.best_epoch = epoch
            stale = 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if ckpt_path is not None:
                torch.save(checkpoint_payload(model, config, manifest, seed, epoch, val_report.macro_f1), ckpt_path)
        else:
            stale += 1
            if config.train_patience and stale >= config.train_patience:
                logger.info("Early stopping at epoch %d (best %d)", epoch, result.best_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def load_checkpoint(path: Union[str, Path]) -> dict:
    try:
        return torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}")


def model_from_checkpoint(checkpoint: dict) -> Tuple[MemeEmotionModel, RunConfig]:
    config = RunConfig.from_dict(checkpoint["config"])
    model = MemeEmotionModel.from_config(config, d=checkpoint["d"], num_classes=checkpoint["num_classes"],
                                         visual_dim=checkpoint["visual_dim"])
    model = model.to(dtype=config.dtype)
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model, config


def evaluate(checkpoint: Union[str, Path, dict], manifest: DatasetManifest, split: Union[Split, str], cache,
             out_dir: Optional[Union[str, Path]] = None, backend: Optional[EncoderBackend] = None) -> MetricsReport:
    """Score a checkpoint on one split; writes confusion matrix and predictions when out_dir is set"""
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint)
    if list(checkpoint["vocab"]) != list(manifest.vocab.names):
        raise VocabMismatchError(
            f"checkpoint labels {checkpoint['vocab']} do not match manifest labels {list(manifest.vocab.names)}")

    model, config = model_from_checkpoint(checkpoint)
    manifest = _prepare_manifest(manifest, config)
    memes = split_view(manifest, split)
    cache = _open_cache(cache)
    check_coverage(cache, memes, config)
    backend = backend or build_backend(config)
    model = model.to(torch.device(config.encoder_device))
    source = BundleSource(backend, memes, _records(cache, memes, config), config, manifest.root, True,
                          f"encode {Split(split).value}")

    predictions, probabilities = predict(model, source, config)
    labels = [m.label for m in memes]
    report = compute_metrics(labels, predictions, manifest.vocab.size)

    if out_dir is not None:
        write_evaluation(out_dir, manifest, memes, predictions, probabilities, report)
    return report


def write_evaluation(out_dir: Union[str, Path], manifest: DatasetManifest, memes: Sequence[MemeInstance],
                     predictions: Sequence[int], probabilities: Sequence[Sequence[float]],
                     report: MetricsReport) -> Dict[str, Path]:
    """confusion_matrix.csv (rows = true labels), predictions.jsonl and metrics.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(manifest.vocab.names)

    confusion_path = out_dir / "confusion_matrix.csv"
    frame = pd.DataFrame(report.confusion, index=names, columns=names)
    frame.index.name = "label"
    frame.to_csv(confusion_path)

    predictions_path = out_dir / "predictions.jsonl"
    with open(predictions_path, "w", encoding="utf-8", newline="\n") as f:
        for meme, pred, probs in zip(memes, predictions, probabilities):
            f.write(json.dumps({
                "id": meme.id,
                "label": names[meme.label],
                "prediction": names[pred],
                "probabilities": probs,
            }, ensure_ascii=False) + "\n")

    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return {"confusion": confusion_path, "predictions": predictions_path, "metrics": metrics_path}
