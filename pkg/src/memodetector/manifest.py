"""
Dataset manifests for meme corpora

A manifest is a UTF-8 JSON Lines file. Line 1 is a header declaring the
dataset name and its ordered label vocabulary; every following line is one
meme. Labels are stored by name and resolved to indices through the header,
so nothing about a corpus's classes is hard-coded.

    {"kind": "header", "name": "met-meme", "labels": ["happiness", "love", ...]}
    {"kind": "meme", "id": "en_0001", "image": "images/en_0001.jpg", "text": "...",
     "label": "love", "split": "train", "language": "en"}

Image paths are relative to the manifest's directory and are only opened when
something asks for pixels or bytes.
"""

import io
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError, ManifestParseError, ManifestValidationError

logger = logging.getLogger(__name__)

HEADER_KIND = "header"
MEME_KIND = "meme"
MEME_FIELDS = ("id", "image", "text", "label", "split")


class Split(str, Enum):
    """Dataset partition a meme belongs to"""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class LabelVocab:
    """Ordered emotion-class names"""
    names: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ManifestValidationError(f"label vocabulary needs at least 2 classes, got {len(names)}")
        if any(not isinstance(n, str) or not n.strip() for n in names):
            raise ManifestValidationError("label names must be non-empty strings")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ManifestValidationError(f"duplicate label names: {', '.join(dupes)}")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class MemeInstance:
    """One meme: image reference, overlaid text and its emotion label"""
    id: str
    image_ref: Union[str, bytes]
    text: str
    label: int
    split: Optional[Split]
    language: Optional[str] = None


@dataclass
class DatasetManifest:
    """A loaded corpus: instances in file order plus their label vocabulary"""
    instances: List[MemeInstance]
    vocab: LabelVocab
    name: str
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def by_id(self) -> Dict[str, MemeInstance]:
        return {inst.id: inst for inst in self.instances}

    def with_instances(self, instances: Sequence[MemeInstance]) -> "DatasetManifest":
        return DatasetManifest(list(instances), self.vocab, self.name, self.root)

    def resolve_image(self, instance: MemeInstance) -> Union[Path, bytes]:
        """Absolute image path (relative refs resolve against the manifest directory) or raw bytes"""
        return resolve_image_ref(instance, self.root)

    def validate(self, for_training: bool = False) -> List[str]:
        """Check the type invariants; returns a list of issues (empty when valid)"""
        issues = []
        seen = set()
        for inst in self.instances:
            if inst.id in seen:
                issues.append(f"duplicate id '{inst.id}'")
            seen.add(inst.id)
            if not 0 <= inst.label < self.vocab.size:
                issues.append(f"meme '{inst.id}' has label index {inst.label} outside vocabulary of {self.vocab.size}")
            if inst.split is None:
                issues.append(f"meme '{inst.id}' has no split")
        if for_training:
            for split in Split:
                if not split_view(self, split):
                    issues.append(f"no instances in split '{split.value}'")
        return issues


def _parse_header(payload: object, line_number: int) -> Tuple[str, LabelVocab]:
    if not isinstance(payload, dict) or payload.get("kind") != HEADER_KIND:
        raise ManifestParseError("first record must be a header ({\"kind\": \"header\", ...})", line_number)
    labels = payload.get("labels")
    if not isinstance(labels, list) or not all(isinstance(l, str) for l in labels):
        raise ManifestParseError("header 'labels' must be a list of strings", line_number)
    name = payload.get("name", "")
    if not isinstance(name, str):
        raise ManifestParseError("header 'name' must be a string", line_number)
    try:
        vocab = LabelVocab(tuple(labels))
    except ManifestValidationError as e:
        raise ManifestValidationError(str(e), [line_number])
    return name, vocab


def _parse_meme(payload: object, line_number: int, allow_missing_split: bool) -> dict:
    if not isinstance(payload, dict):
        raise ManifestParseError("record is not a JSON object", line_number)
    kind = payload.get("kind")
    if kind != MEME_KIND:
        raise ManifestParseError(f"unexpected record kind {kind!r}", line_number)
    required = [f for f in MEME_FIELDS if not (f == "split" and allow_missing_split)]
    missing = [f for f in required if f not in payload]
    if missing:
        raise ManifestParseError(f"missing field(s): {', '.join(missing)}", line_number)
    for key in MEME_FIELDS:
        value = payload.get(key)
        if value is None and (key != "split" or not allow_missing_split):
            if key in payload:
                raise ManifestParseError(f"field '{key}' must not be null", line_number)
            continue
        if value is not None and not isinstance(value, str):
            raise ManifestParseError(f"field '{key}' must be a string", line_number)
    if not payload["id"].strip():
        raise ManifestParseError("field 'id' must be non-empty", line_number)
    language = payload.get("language")
    if language is not None and not isinstance(language, str):
        raise ManifestParseError("field 'language' must be a string", line_number)
    return payload


def load_manifest(path: Union[str, Path], allow_missing_split: bool = False) -> DatasetManifest:
    """Load and validate a JSON Lines manifest

    Raises ManifestParseError (with the offending line number) for malformed
    lines and ManifestValidationError for duplicate ids, unknown labels and
    bad split tags. Instance order follows the file.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest {path} does not exist")
    name = None
    vocab = None
    instances = []
    first_seen: Dict[str, int] = {}
    problems: List[Tuple[str, int]] = []

    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestParseError(f"invalid JSON ({e.msg})", line_number)

            if vocab is None:
                name, vocab = _parse_header(payload, line_number)
                continue

            record = _parse_meme(payload, line_number, allow_missing_split)
            meme_id = record["id"]
            if meme_id in first_seen:
                problems.append((f"duplicate id '{meme_id}' (first seen on line {first_seen[meme_id]})", line_number))
                continue
            first_seen[meme_id] = line_number

            label_name = record["label"]
            if label_name not in vocab:
                problems.append((f"label '{label_name}' of meme '{meme_id}' is not declared in the header", line_number))
                continue

            split_value = record.get("split")
            split = None
            if split_value is not None:
                try:
                    split = Split(split_value)
                except ValueError:
                    problems.append((f"split '{split_value}' of meme '{meme_id}' is not one of train/val/test", line_number))
                    continue

            instances.append(MemeInstance(
                id=meme_id,
                image_ref=record["image"],
                text=record["text"],
                label=vocab.index(label_name),
                split=split,
                language=record.get("language"),
            ))

    if vocab is None:
        raise ManifestParseError("manifest is empty (no header record)", 1)

    if problems:
        lines = sorted({n for _, n in problems} | {first_seen[m] for m in _duplicated_ids(problems)})
        message = "; ".join(msg + f" [line {n}]" for msg, n in problems[:10])
        if len(problems) > 10:
            message += f"; ... {len(problems) - 10} more"
        raise ManifestValidationError(message, lines)

    logger.debug("Loaded manifest %s: %d instances, %d labels", path, len(instances), vocab.size)
    return DatasetManifest(instances=instances, vocab=vocab, name=name, root=path.parent)


def _duplicated_ids(problems: List[Tuple[str, int]]) -> List[str]:
    ids = []
    for msg, _ in problems:
        if msg.startswith("duplicate id '"):
            ids.append(msg.split("'")[1])
    return ids


def meme_record(manifest: DatasetManifest, instance: MemeInstance) -> dict:
    """Manifest line for one instance, in the canonical field order"""
    if isinstance(instance.image_ref, bytes):
        raise ManifestValidationError(f"meme '{instance.id}' holds raw image bytes; only paths can be written")
    record = {
        "kind": MEME_KIND,
        "id": instance.id,
        "image": instance.image_ref,
        "text": instance.text,
        "label": manifest.vocab.names[instance.label],
    }
    if instance.split is not None:
        record["split"] = instance.split.value
    if instance.language is not None:
        record["language"] = instance.language
    return record


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Write a manifest as JSON Lines (header first, instances in order)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": HEADER_KIND, "name": manifest.name, "labels": list(manifest.vocab.names)}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for inst in manifest.instances:
            f.write(json.dumps(meme_record(manifest, inst), ensure_ascii=False) + "\n")
    return path


def split_view(manifest: DatasetManifest, split: Union[Split, str]) -> List[MemeInstance]:
    """Instances whose split matches, in manifest order"""
    split = Split(split)
    return [inst for inst in manifest.instances if inst.split == split]


def filter_language(manifest: DatasetManifest, language: Optional[str]) -> DatasetManifest:
    """Keep instances whose language tag matches by primary subtag ('zh' matches 'zh-Hans')"""
    if not language:
        return manifest
    wanted = language.lower().split("-")[0]
    kept = [inst for inst in manifest.instances
            if inst.language and inst.language.lower().split("-")[0] == wanted]
    logger.info("Language filter '%s' kept %d of %d instances", language, len(kept), len(manifest))
    return manifest.with_instances(kept)


def parse_ratio(ratio: str) -> Tuple[int, int, int]:
    """Parse a 'train:val:test' ratio such as '8:1:1'"""
    parts = ratio.split(":")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"split ratio '{ratio}' must be three integers like 8:1:1")
    if len(values) != 3 or any(v < 0 for v in values) or sum(values) == 0:
        raise ValueError(f"split ratio '{ratio}' must be three non-negative integers with a positive sum")
    return values


def assign_splits(manifest: DatasetManifest, ratio: Sequence[int] = (8, 1, 1),
                  seed: int = 13, overwrite: bool = False) -> DatasetManifest:
    """Tag instances with train/val/test, stratified by label

    Instances that already carry a split keep it unless overwrite is set.
    """
    total = float(sum(ratio))
    cut_train = ratio[0] / total
    cut_val = (ratio[0] + ratio[1]) / total
    rng = np.random.default_rng(seed)

    pending: Dict[int, List[int]] = {}
    for i, inst in enumerate(manifest.instances):
        if overwrite or inst.split is None:
            pending.setdefault(inst.label, []).append(i)

    assigned: Dict[int, Split] = {}
    for label in sorted(pending):
        indices = np.array(pending[label])
        order = indices[rng.permutation(len(indices))]
        n = len(order)
        n_train = int(np.floor(n * cut_train))
        n_val = int(np.floor(n * cut_val)) - n_train
        for pos, idx in enumerate(order):
            if pos < n_train:
                assigned[int(idx)] = Split.TRAIN
            elif pos < n_train + n_val:
                assigned[int(idx)] = Split.VAL
            else:
                assigned[int(idx)] = Split.TEST

    instances = [replace(inst, split=assigned[i]) if i in assigned else inst
                 for i, inst in enumerate(manifest.instances)]
    return manifest.with_instances(instances)


def resolve_image_ref(instance: MemeInstance, root: Optional[Path] = None) -> Union[Path, bytes]:
    if isinstance(instance.image_ref, bytes):
        return instance.image_ref
    path = Path(instance.image_ref)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    return path


def image_bytes(instance: MemeInstance, root: Optional[Path] = None) -> bytes:
    """Raw image bytes for an instance whose relative paths resolve against root"""
    ref = resolve_image_ref(instance, root)
    if isinstance(ref, bytes):
        return ref
    try:
        return ref.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read image for meme '{instance.id}': {e}")


def load_image(manifest: DatasetManifest, instance: MemeInstance) -> Image.Image:
    """Decode an instance's image to RGB; undecodable images raise InputError"""
    return decode_image(image_bytes(instance, manifest.root), instance.id)


def decode_image(data: bytes, meme_id: str) -> Image.Image:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise InputError(f"cannot decode image for meme '{meme_id}': {e}")