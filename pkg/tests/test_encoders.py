"""Tests for the toy encoder and encode_bundle"""

import hashlib
import math

import numpy as np
import pytest
import torch
from PIL import Image

from memodetector.encoders import (
    TOKEN_CACHE_SIZE, FeatureSequence, SequenceKind, ToyEncoder, build_backend, encode_bundle, encode_image, encode_text,
    grid_shape,
)
from memodetector.enhancer import EnhancementRecord, EnhancementStep
from memodetector.errors import ConfigError, InputError, NumericError, ShapeError
from memodetector.manifest import MemeInstance, Split
from tests.conftest import png_bytes, toy_config


def oracle_token_vector(seed: int, token: str, dim: int):
    """Recompute a token row from the hashing recipe with plain integers"""
    base = hashlib.sha256(seed.to_bytes(8, "big", signed=True) + b"token" + token.encode("utf-8")).digest()
    stream = b"".join(hashlib.sha256(base + c.to_bytes(4, "big")).digest() for c in range(math.ceil(dim / 4)))
    values = []
    for i in range(dim):
        word = int.from_bytes(stream[8 * i: 8 * i + 8], "big")
        values.append((2.0 * (word >> 11) / 2 ** 53 - 1.0) * math.sqrt(3.0))
    return values


def full_record(meme_id="m1", steps=(EnhancementStep.ID, EnhancementStep.TM, EnhancementStep.CIM, EnhancementStep.CA)):
    return EnhancementRecord(meme_id=meme_id, texts={s: f"{s.value.lower()} text for {meme_id}" for s in steps})


@pytest.fixture
def encoder():
    return ToyEncoder(seed=0, dim=8, patches=16)


class TestFeatureSequence:
    def test_mask_must_match_rows(self):
        with pytest.raises(ShapeError):
            FeatureSequence(torch.zeros(3, 4), torch.ones(2, dtype=torch.bool), SequenceKind.TEXTUAL)

    def test_rows_must_be_matrix(self):
        with pytest.raises(ShapeError):
            FeatureSequence(torch.zeros(3), torch.ones(3, dtype=torch.bool), SequenceKind.TEXTUAL)

    def test_rejects_nan(self):
        rows = torch.zeros(2, 4)
        rows[1, 2] = float("nan")
        with pytest.raises(NumericError):
            FeatureSequence(rows, torch.ones(2, dtype=torch.bool), SequenceKind.TEXTUAL)

    def test_empty(self):
        empty = FeatureSequence.empty(5)
        assert (empty.length, empty.d) == (0, 5)


class TestGrid:
    @pytest.mark.parametrize("patches,expected", [(16, (4, 4)), (12, (3, 4)), (7, (1, 7)), (1, (1, 1))])
    def test_grid_shape(self, patches, expected):
        assert grid_shape(patches) == expected


class TestToyImage:
    def test_shape(self, encoder):
        seq = encode_image(encoder, Image.new("RGB", (20, 12), (10, 20, 30)))
        assert tuple(seq.rows.shape) == (16, 8)
        assert seq.mask.all()
        assert seq.kind == SequenceKind.VISUAL
        assert seq.rows.dtype == torch.float64

    def test_deterministic(self, encoder):
        image = Image.new("RGB", (16, 16), (1, 2, 3))
        assert torch.equal(encoder.encode_image(image).rows, ToyEncoder(0, 8, 16).encode_image(image).rows)

    def test_seed_changes_features(self, encoder):
        image = Image.new("RGB", (16, 16), (1, 2, 3))
        assert not torch.equal(encoder.encode_image(image).rows, ToyEncoder(1, 8, 16).encode_image(image).rows)

    def test_solid_patches_differ_by_position(self, encoder):
        rows = encoder.encode_image(Image.new("RGB", (16, 16), (5, 5, 5))).rows
        assert len({tuple(r.tolist()) for r in rows}) == 16

    def test_single_pixel_changes_features(self, encoder):
        rng = np.random.default_rng(7)
        for _ in range(100):
            pixels = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
            changed = pixels.copy()
            y, x, c = rng.integers(0, 8), rng.integers(0, 8), rng.integers(0, 3)
            changed[y, x, c] = (int(changed[y, x, c]) + 1) % 256
            a = encoder.encode_image(Image.fromarray(pixels)).rows
            b = encoder.encode_image(Image.fromarray(changed)).rows
            assert not torch.equal(a, b)

    def test_requires_pil_image(self, encoder):
        with pytest.raises(InputError):
            encode_image(encoder, png_bytes())


class TestToyText:
    def test_one_row_per_token(self, encoder):
        seq = encode_text(encoder, "a b a", 10)
        assert tuple(seq.rows.shape) == (3, 8)
        assert torch.equal(seq.rows[0], seq.rows[2])
        assert not torch.equal(seq.rows[0], seq.rows[1])

    def test_truncation_is_prefix(self, encoder):
        full = encode_text(encoder, "one two three four", 10).rows
        short = encode_text(encoder, "one two three four", 2).rows
        assert torch.equal(short, full[:2])

    def test_empty_text(self, encoder):
        seq = encode_text(encoder, "   ", 10)
        assert seq.length == 0
        assert seq.d == 8

    def test_values_have_unit_variance_range(self):
        rows = ToyEncoder(dim=64).encode_text(" ".join(f"w{i}" for i in range(200)), 200).rows
        assert rows.abs().max() <= math.sqrt(3.0)
        assert rows.var().item() == pytest.approx(1.0, abs=0.1)

    def test_matches_hash_recipe(self):
        rows = ToyEncoder(seed=3, dim=10).encode_text("hello", 5).rows
        assert rows[0].tolist() == pytest.approx(oracle_token_vector(3, "hello", 10), abs=1e-15)

    def test_utf8_tokens(self, encoder):
        seq = encode_text(encoder, "我的咖啡 又洒了", 10)
        assert seq.length == 2

    def test_invalid_sizes(self):
        with pytest.raises(ConfigError):
            ToyEncoder(dim=0)

    def test_rejects_non_string(self, encoder):
        with pytest.raises(InputError):
            encode_text(encoder, None, 10)

    def test_token_cache_is_bounded(self, encoder):
        text = " ".join(f"w{i}" for i in range(50))
        first = encode_text(encoder, text, 100)
        info = encoder._token_vector.cache_info()
        assert info.maxsize == TOKEN_CACHE_SIZE
        assert info.currsize == 50
        assert torch.equal(encode_text(encoder, text, 100).rows, first.rows)
        assert encoder._token_vector.cache_info().hits >= 50


class TestEncodeBundle:
    def meme(self):
        return MemeInstance("m1", png_bytes((200, 10, 10), (16, 16)), "so tired of this", 0, Split.TRAIN)

    def test_contains_enabled_steps(self, encoder, tmp_path):
        config = toy_config(tmp_path, fusion_steps="ID,CA")
        bundle = encode_bundle(encoder, self.meme(), full_record(), config)
        assert set(bundle.enhanced) == {EnhancementStep.ID, EnhancementStep.CA}
        assert bundle.text.length == 4
        assert bundle.visual.length == 16
        assert bundle.d == 8

    def test_missing_step(self, encoder, tmp_path):
        record = full_record(steps=(EnhancementStep.ID, EnhancementStep.TM, EnhancementStep.CIM))
        with pytest.raises(ConfigError, match="CA"):
            encode_bundle(encoder, self.meme(), record, toy_config(tmp_path))

    def test_direct_only(self, encoder, tmp_path):
        record = full_record(steps=(EnhancementStep.DIRECT,))
        bundle = encode_bundle(encoder, self.meme(), record, toy_config(tmp_path, fusion_steps="DIRECT"))
        assert list(bundle.enhanced) == [EnhancementStep.DIRECT]

    def test_text_token_limits(self, encoder, tmp_path):
        record = EnhancementRecord("m1", {s: "w " * 50 for s in (EnhancementStep.ID, EnhancementStep.TM,
                                                                  EnhancementStep.CIM, EnhancementStep.CA)})
        config = toy_config(tmp_path, text_max_tokens=2, text_max_enhanced_tokens=5)
        bundle = encode_bundle(encoder, self.meme(), record, config)
        assert bundle.text.length == 2
        assert all(seq.length == 5 for seq in bundle.enhanced.values())

    def test_build_backend(self, tmp_path):
        backend = build_backend(toy_config(tmp_path, encoder_dim=12, encoder_patches=6))
        assert isinstance(backend, ToyEncoder)
        assert (backend.dim, backend.patches) == (12, 6)
