"""Shared test fixtures for memodetector tests"""

import io
import json
from pathlib import Path

import pytest
from PIL import Image

from memodetector.config_manager import RunConfig
from memodetector.enhancement_cache import EnhancementCache
from memodetector.enhancer import FOUR_STEPS, EnhancementStep, enhance_all
from memodetector.manifest import load_manifest
from memodetector.mllm_client import MockMllmClient
from memodetector.synthetic import make_synthetic_dataset

# -- Mock corpus data --

MOCK_LABELS = ["happiness", "sadness", "anger"]

MOCK_MEMES = [
    {"id": "m001", "colour": (255, 0, 0), "text": "when the code compiles first try",
     "label": "happiness", "split": "train", "language": "en"},
    {"id": "m002", "colour": (0, 0, 255), "text": "monday again",
     "label": "sadness", "split": "val", "language": "en"},
    {"id": "m003", "colour": (0, 255, 0), "text": "我的咖啡又洒了",
     "label": "anger", "split": "test", "language": "zh-Hans"},
]

ALL_STEPS = FOUR_STEPS + (EnhancementStep.DIRECT,)


def png_bytes(colour=(128, 128, 128), size=(8, 8)) -> bytes:
    """Encode a solid-colour PNG"""
    buffer = io.BytesIO()
    Image.new("RGB", size, colour).save(buffer, format="PNG")
    return buffer.getvalue()


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
    return path


def toy_config(output_dir, **changes) -> RunConfig:
    """Default config with one seed, writing under output_dir"""
    base = RunConfig.defaults().replace(output_dir=str(output_dir), train_seeds="1")
    return base.replace(**changes) if changes else base


@pytest.fixture
def small_manifest_path(tmp_path):
    """Three memes with images on disk, one per split"""
    root = tmp_path / "corpus"
    (root / "images").mkdir(parents=True)
    records = [{"kind": "header", "name": "tiny", "labels": MOCK_LABELS}]
    for meme in MOCK_MEMES:
        image = f"images/{meme['id']}.png"
        (root / image).write_bytes(png_bytes(meme["colour"]))
        records.append({"kind": "meme", "id": meme["id"], "image": image, "text": meme["text"],
                        "label": meme["label"], "split": meme["split"], "language": meme["language"]})
    return write_jsonl(root / "manifest.jsonl", records)


@pytest.fixture
def small_manifest(small_manifest_path):
    return load_manifest(small_manifest_path)


@pytest.fixture(scope="session")
def synthetic_manifest_path(tmp_path_factory):
    """32 memes in 4 classes, split 8:1:1 per class"""
    root = tmp_path_factory.mktemp("synthetic")
    return make_synthetic_dataset(root, size=32, classes=4, seed=0)


@pytest.fixture(scope="session")
def synthetic_manifest(synthetic_manifest_path):
    return load_manifest(synthetic_manifest_path)


@pytest.fixture(scope="session")
def synthetic_cache_path(synthetic_manifest, tmp_path_factory):
    """Echo-mock enhancements for every synthetic meme, all five steps"""
    path = tmp_path_factory.mktemp("cache") / "enhancements.jsonl"
    summary = enhance_all(MockMllmClient(), synthetic_manifest, EnhancementCache(path), steps=ALL_STEPS, workers=2)
    assert summary.failure_count == 0
    return path
