"""Tests for training and evaluation"""

import json
import math

import pandas as pd
import pytest
import torch

from memodetector.encoders import ToyEncoder, encode_bundle
from memodetector.enhancement_cache import EnhancementCache
from memodetector.enhancer import load_record
from memodetector.errors import ConfigError, CoverageError, VocabMismatchError
from memodetector.fusion import MemeEmotionModel, collate
from memodetector.manifest import DatasetManifest, LabelVocab, Split, split_view
from memodetector.training import (
    CHECKPOINT_NAME, EPOCH_LOG_NAME, cross_entropy, evaluate, load_checkpoint, train, train_step,
    _make_optimizer,
)
from tests.conftest import toy_config


class TestCrossEntropy:
    def test_uniform_over_seven(self):
        probabilities = torch.full((7,), 1 / 7, dtype=torch.float64)
        for label in range(7):
            assert cross_entropy(probabilities, label).item() == pytest.approx(math.log(7), abs=1e-9)

    def test_quarter_probability(self):
        probabilities = torch.tensor([0.25, 0.75], dtype=torch.float64)
        assert cross_entropy(probabilities, 0).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot_correct_is_zero(self):
        assert cross_entropy(torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), 1).item() == 0.0

    def test_zero_probability_is_floored(self):
        loss = cross_entropy(torch.tensor([1.0, 0.0], dtype=torch.float64), 1).item()
        assert loss == pytest.approx(-math.log(1e-12))

    def test_batch_mean(self):
        probabilities = torch.tensor([[0.5, 0.5], [0.25, 0.75]], dtype=torch.float64)
        expected = (math.log(2) + math.log(4 / 3)) / 2
        assert cross_entropy(probabilities, torch.tensor([0, 1])).item() == pytest.approx(expected)


class TestTrain:
    def test_writes_log_and_checkpoint(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=3, train_patience=0)
        result = train(config, synthetic_manifest, synthetic_cache_path, out_dir=tmp_path / "run", seed=1)
        lines = (tmp_path / "run" / EPOCH_LOG_NAME).read_text().splitlines()
        assert len(lines) == 3
        entry = json.loads(lines[0])
        assert list(entry) == ["epoch", "train_loss", "train_accuracy", "val_accuracy", "val_macro_f1"]
        assert result.checkpoint_path == tmp_path / "run" / CHECKPOINT_NAME
        assert result.checkpoint_path.exists()
        assert 1 <= result.best_epoch <= 3

    def test_checkpoint_contents(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=2)
        result = train(config, synthetic_manifest, synthetic_cache_path, out_dir=tmp_path / "run", seed=4)
        checkpoint = load_checkpoint(result.checkpoint_path)
        assert checkpoint["vocab"] == list(synthetic_manifest.vocab.names)
        assert checkpoint["seed"] == 4
        assert checkpoint["epoch"] == result.best_epoch
        assert checkpoint["num_classes"] == 4

    def test_overfits_synthetic_data(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=200, train_patience=0)
        result = train(config, synthetic_manifest, synthetic_cache_path, seed=1)
        assert max(entry["train_accuracy"] for entry in result.history) == 1.0

    def test_same_seed_same_log(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=4, train_patience=0)
        train(config, synthetic_manifest, synthetic_cache_path, out_dir=tmp_path / "a", seed=2)
        train(config, synthetic_manifest, synthetic_cache_path, out_dir=tmp_path / "b", seed=2)
        assert (tmp_path / "a" / EPOCH_LOG_NAME).read_bytes() == (tmp_path / "b" / EPOCH_LOG_NAME).read_bytes()

    def test_seeds_change_parameters(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=1)
        first = train(config, synthetic_manifest, synthetic_cache_path, seed=1)
        second = train(config, synthetic_manifest, synthetic_cache_path, seed=2)
        assert first.parameter_checksum != second.parameter_checksum
        assert first.parameter_count == second.parameter_count

    def test_on_epoch_callback(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        seen = []
        train(toy_config(tmp_path, train_epochs=2, train_patience=0), synthetic_manifest, synthetic_cache_path,
              seed=1, on_epoch=seen.append)
        assert [entry["epoch"] for entry in seen] == [1, 2]

    def test_missing_coverage(self, small_manifest, tmp_path):
        with pytest.raises(CoverageError) as exc:
            train(toy_config(tmp_path), small_manifest, EnhancementCache(tmp_path / "empty.jsonl"))
        assert ("m001", "ID") in exc.value.gaps
        assert ("m002", "CA") in exc.value.gaps

    def test_coverage_checks_each_meme_once(self, synthetic_manifest, synthetic_cache_path, tmp_path, monkeypatch):
        checked = []

        def record_gaps(cache, memes, steps, model_id=None):
            checked.extend(m.id for m in memes)
            return []

        monkeypatch.setattr("memodetector.training.coverage_gaps", record_gaps)
        no_val = synthetic_manifest.with_instances(
            [m for m in synthetic_manifest if m.split != Split.VAL])
        train(toy_config(tmp_path, train_epochs=1), no_val, synthetic_cache_path, seed=1)
        # selection falls back to train, so every train meme appears once
        assert sorted(checked) == sorted(m.id for m in split_view(no_val, Split.TRAIN))

    def test_train_split_required(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        only_test = synthetic_manifest.with_instances(split_view(synthetic_manifest, Split.TEST))
        with pytest.raises(ConfigError, match="train"):
            train(toy_config(tmp_path), only_test, synthetic_cache_path)

    def test_one_step_lowers_loss(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_precision="float64", train_optimizer="sgd", train_lr=1e-3,
                            train_weight_decay=0.0)
        meme = split_view(synthetic_manifest, Split.TRAIN)[0]
        record = load_record(synthetic_cache_path, meme.id, config.steps, meme_text=meme.text)
        bundle = encode_bundle(ToyEncoder(dim=config.encoder_dim, patches=config.encoder_patches), meme, record,
                               config, image_root=synthetic_manifest.root)

        torch.manual_seed(0)
        model = MemeEmotionModel.from_config(config, d=config.encoder_dim, num_classes=4).double()
        optimizer = _make_optimizer(config, model.parameters())
        before = train_step(model, optimizer, [bundle], [meme.label], config)
        with torch.no_grad():
            after = cross_entropy(model(collate([bundle], model.steps, torch.float64)).probabilities,
                                  meme.label).item()
        assert after < before


class TestEvaluate:
    @pytest.fixture
    def trained(self, synthetic_manifest, synthetic_cache_path, tmp_path):
        config = toy_config(tmp_path, train_epochs=3)
        return train(config, synthetic_manifest, synthetic_cache_path, out_dir=tmp_path / "run", seed=1)

    def test_writes_outputs(self, trained, synthetic_manifest, synthetic_cache_path, tmp_path):
        out = tmp_path / "eval"
        report = evaluate(trained.checkpoint_path, synthetic_manifest, Split.TEST, synthetic_cache_path, out)
        test_ids = [m.id for m in split_view(synthetic_manifest, Split.TEST)]
        assert report.count == len(test_ids)

        predictions = [json.loads(l) for l in (out / "predictions.jsonl").read_text().splitlines()]
        assert [p["id"] for p in predictions] == test_ids
        assert all(p["prediction"] in synthetic_manifest.vocab for p in predictions)
        assert all(sum(p["probabilities"]) == pytest.approx(1.0, abs=1e-5) for p in predictions)

        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["accuracy"] == report.accuracy

        confusion = pd.read_csv(out / "confusion_matrix.csv", index_col="label")
        assert list(confusion.columns) == list(synthetic_manifest.vocab.names)
        assert int(confusion.to_numpy().sum()) == len(test_ids)

    def test_deterministic(self, trained, synthetic_manifest, synthetic_cache_path):
        first = evaluate(trained.checkpoint_path, synthetic_manifest, "val", synthetic_cache_path)
        second = evaluate(trained.checkpoint_path, synthetic_manifest, "val", synthetic_cache_path)
        assert first == second

    def test_in_memory_payload_matches_file(self, trained, synthetic_manifest, synthetic_cache_path):
        from_file = evaluate(trained.checkpoint_path, synthetic_manifest, "test", synthetic_cache_path)
        payload = load_checkpoint(trained.checkpoint_path)
        assert evaluate(payload, synthetic_manifest, "test", synthetic_cache_path) == from_file

    def test_vocab_mismatch(self, trained, synthetic_manifest, synthetic_cache_path):
        reordered = DatasetManifest(synthetic_manifest.instances,
                                    LabelVocab(tuple(reversed(synthetic_manifest.vocab.names))),
                                    synthetic_manifest.name, synthetic_manifest.root)
        with pytest.raises(VocabMismatchError):
            evaluate(trained.checkpoint_path, reordered, "test", synthetic_cache_path)
