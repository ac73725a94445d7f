"""
Feature encoders

Turns a meme image into a patch sequence and each text into a token sequence.
Two backends share one interface:

- ToyEncoder: deterministic SHA-256 hashing of image patches and whitespace
  tokens, used for tests and desk-scale runs
- PretrainedEncoder: a vision transformer (CLS row dropped) and a
  multilingual masked language model loaded through transformers
"""

import functools
import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from .enhancer import EnhancementRecord, EnhancementStep
from .errors import ConfigError, InputError, NumericError, ShapeError
from .manifest import MemeInstance, decode_image, image_bytes

if TYPE_CHECKING:
    from .config_manager import RunConfig

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
TOKEN_CACHE_SIZE = 65536


class SequenceKind(str, Enum):
    VISUAL = "visual"
    TEXTUAL = "textual"


@dataclass
class FeatureSequence:
    """A length x d feature matrix plus a mask of real positions"""
    rows: torch.Tensor
    mask: torch.Tensor
    kind: SequenceKind

    def __post_init__(self):
        if self.rows.dim() != 2:
            raise ShapeError(f"feature rows must be 2-D, got shape {tuple(self.rows.shape)}")
        if self.mask.dtype != torch.bool:
            self.mask = self.mask.to(torch.bool)
        if self.mask.shape != (self.rows.shape[0],):
            raise ShapeError(f"mask length {tuple(self.mask.shape)} does not match {self.rows.shape[0]} rows")
        if not torch.isfinite(self.rows).all():
            raise NumericError(f"non-finite values in {self.kind.value} features")

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def empty(cls, d: int, kind: SequenceKind = SequenceKind.TEXTUAL,
              dtype: torch.dtype = torch.float64) -> "FeatureSequence":
        return cls(torch.zeros((0, d), dtype=dtype), torch.zeros(0, dtype=torch.bool), kind)

    def to(self, dtype: torch.dtype = None, device=None) -> "FeatureSequence":
        return FeatureSequence(self.rows.to(device=device, dtype=dtype), self.mask.to(device), self.kind)


@dataclass
class FeatureBundle:
    """Encoded inputs of one meme; enhanced holds exactly the enabled steps"""
    visual: FeatureSequence
    text: FeatureSequence
    enhanced: Dict[EnhancementStep, FeatureSequence] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.text.d

    def to(self, dtype: torch.dtype = None, device=None) -> "FeatureBundle":
        return FeatureBundle(
            self.visual.to(dtype, device),
            self.text.to(dtype, device),
            {step: seq.to(dtype, device) for step, seq in self.enhanced.items()},
        )


class EncoderBackend(ABC):
    """Image and text encoder pair with a fixed output width"""
    variant: str = ""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Width of textual sequences"""

    @property
    def visual_dim(self) -> int:
        return self.dim

    @abstractmethod
    def encode_image(self, image: Image.Image) -> FeatureSequence:
        ...

    @abstractmethod
    def encode_text(self, text: str, max_tokens: int) -> FeatureSequence:
        ...

    def trainable_modules(self) -> List[torch.nn.Module]:
        return []


def grid_shape(patches: int) -> Tuple[int, int]:
    """Factor pair rows x cols == patches with rows as close to sqrt(patches) as possible"""
    rows = int(math.isqrt(patches))
    while patches % rows:
        rows -= 1
    return rows, patches // rows


class ToyEncoder(EncoderBackend):
    """Deterministic hash-based encoder

    Every image patch (its bytes, index and shape) and every whitespace token
    is hashed with SHA-256 in counter mode into d values uniform on
    [-sqrt(3), sqrt(3)], which have unit variance. The result depends only on
    (seed, input bytes).
    """
    variant = "toy"

    def __init__(self, seed: int = 0, dim: int = 32, patches: int = 16):
        if dim < 1 or patches < 1:
            raise ConfigError("toy encoder needs positive dim and patches")
        self.seed = seed
        self._dim = dim
        self.patches = patches
        self.grid = grid_shape(patches)
        self._seed_bytes = int(seed).to_bytes(8, "big", signed=True)
        self._token_vector = functools.lru_cache(maxsize=TOKEN_CACHE_SIZE)(self._hash_token)

    @property
    def dim(self) -> int:
        return self._dim

    def _hash_vector(self, tag: bytes, payload: bytes) -> np.ndarray:
        base = hashlib.sha256(self._seed_bytes + tag + payload).digest()
        blocks = math.ceil(self._dim / 4)
        stream = b"".join(hashlib.sha256(base + c.to_bytes(4, "big")).digest() for c in range(blocks))
        words = np.frombuffer(stream, dtype=">u8")[: self._dim]
        uniform = (words >> np.uint64(11)).astype(np.float64) / float(2 ** 53)
        return (2.0 * uniform - 1.0) * SQRT3

    def encode_image(self, image: Image.Image) -> FeatureSequence:
        pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
        rows, cols = self.grid
        vectors = []
        index = 0
        for band in np.array_split(pixels, rows, axis=0):
            for patch in np.array_split(band, cols, axis=1):
                header = index.to_bytes(4, "big") + patch.shape[0].to_bytes(4, "big") + patch.shape[1].to_bytes(4, "big")
                vectors.append(self._hash_vector(b"patch", header + np.ascontiguousarray(patch).tobytes()))
                index += 1
        matrix = torch.from_numpy(np.stack(vectors))
        return FeatureSequence(matrix, torch.ones(len(vectors), dtype=torch.bool), SequenceKind.VISUAL)

    def _hash_token(self, token: str) -> np.ndarray:
        return self._hash_vector(b"token", token.encode("utf-8"))

    def encode_text(self, text: str, max_tokens: int) -> FeatureSequence:
        tokens = text.split()[:max(0, max_tokens)]
        if not tokens:
            return FeatureSequence.empty(self._dim)
        matrix = torch.from_numpy(np.stack([self._token_vector(t) for t in tokens]))
        return FeatureSequence(matrix, torch.ones(len(tokens), dtype=torch.bool), SequenceKind.TEXTUAL)


class PretrainedEncoder(EncoderBackend):
    """Vision transformer plus multilingual text encoder from transformers"""
    variant = "pretrained"

    def __init__(self, vision_id: str, text_id: str, device: str = "cpu", freeze: bool = True):
        from transformers import AutoImageProcessor, AutoModel, AutoTokenizer

        logger.info("Loading vision encoder %s and text encoder %s", vision_id, text_id)
        self.vision_id = vision_id
        self.text_id = text_id
        self.device = torch.device(device)
        self.freeze = freeze
        self.processor = AutoImageProcessor.from_pretrained(vision_id)
        self.vision_model = AutoModel.from_pretrained(vision_id).to(self.device)
        self.tokenizer = AutoTokenizer.from_pretrained(text_id)
        self.text_model = AutoModel.from_pretrained(text_id).to(self.device)
        for model in (self.vision_model, self.text_model):
            model.train(not freeze)
            for param in model.parameters():
                param.requires_grad_(not freeze)

    @property
    def dim(self) -> int:
        return self.text_model.config.hidden_size

    @property
    def visual_dim(self) -> int:
        return self.vision_model.config.hidden_size

    def trainable_modules(self) -> List[torch.nn.Module]:
        return [] if self.freeze else [self.vision_model, self.text_model]

    def encode_image(self, image: Image.Image) -> FeatureSequence:
        inputs = self.processor(images=image.convert("RGB"), return_tensors="pt")
        inputs = {name: tensor.to(self.device) for name, tensor in inputs.items()}
        with torch.set_grad_enabled(not self.freeze):
            outputs = self.vision_model(**inputs)
        # Drop the CLS row: every position is a content patch
        rows = outputs.last_hidden_state[0, 1:]
        return FeatureSequence(rows, torch.ones(rows.shape[0], dtype=torch.bool, device=rows.device),
                               SequenceKind.VISUAL)

    def encode_text(self, text: str, max_tokens: int) -> FeatureSequence:
        if not text.strip() or max_tokens < 1:
            return FeatureSequence.empty(self.dim, dtype=torch.float32).to(device=self.device)
        encoded = self.tokenizer(text, add_special_tokens=False, truncation=True,
                                 max_length=max_tokens, return_tensors="pt")
        if encoded["input_ids"].shape[1] == 0:
            return FeatureSequence.empty(self.dim, dtype=torch.float32).to(device=self.device)
        encoded = {name: tensor.to(self.device) for name, tensor in encoded.items()}
        with torch.set_grad_enabled(not self.freeze):
            outputs = self.text_model(**encoded)
        rows = outputs.last_hidden_state[0]
        return FeatureSequence(rows, encoded["attention_mask"][0].to(torch.bool), SequenceKind.TEXTUAL)


def build_backend(config: "RunConfig") -> EncoderBackend:
    if config.encoder_variant == "toy":
        return ToyEncoder(seed=config.encoder_seed, dim=config.encoder_dim, patches=config.encoder_patches)
    if config.encoder_variant == "pretrained":
        return PretrainedEncoder(config.encoder_vision_id, config.encoder_text_id,
                                 device=config.encoder_device, freeze=config.encoder_freeze)
    raise ConfigError(f"unknown encoder variant '{config.encoder_variant}'")


def encode_image(backend: EncoderBackend, image: Image.Image) -> FeatureSequence:
    if not isinstance(image, Image.Image):
        raise InputError("encode_image expects a decoded PIL image")
    return backend.encode_image(image)


def encode_text(backend: EncoderBackend, text: str, max_tokens: int) -> FeatureSequence:
    if not isinstance(text, str):
        raise InputError(f"encode_text expects a string, got {type(text).__name__}")
    return backend.encode_text(text, max_tokens)


def encode_bundle(backend: EncoderBackend, meme: MemeInstance, record: EnhancementRecord,
                  config: "RunConfig", image: Optional[Image.Image] = None,
                  image_root: Optional[Path] = None) -> FeatureBundle:
    """Encode a meme's image, text and the enhanced texts its config enables"""
    steps = config.steps
    missing = record.missing(steps)
    if missing:
        names = ", ".join(s.value for s in missing)
        raise ConfigError(f"meme '{meme.id}' has no enhancement text for step(s) {names}")

    if image is None:
        image = decode_image(image_bytes(meme, image_root), meme.id)
    visual = encode_image(backend, image)
    text = encode_text(backend, meme.text, config.text_max_tokens)
    enhanced = {step: encode_text(backend, record.texts[step], config.text_max_enhanced_tokens) for step in steps}

    widths = {text.d} | {seq.d for seq in enhanced.values()}
    if len(widths) != 1:
        raise ShapeError(f"textual sequences of meme '{meme.id}' have mixed widths {sorted(widths)}")
    return FeatureBundle(visual=visual, text=text, enhanced=enhanced)


def encode_many(backend: EncoderBackend, memes: Iterable[MemeInstance], records: Dict[str, EnhancementRecord],
                config: "RunConfig", image_root: Optional[Path] = None, progress: bool = False) -> List[FeatureBundle]:
    """Encode memes in order; frozen backends make this a one-off precomputation"""
    memes = list(memes)
    bundles = []
    for meme in tqdm(memes, desc="encode", unit="meme", disable=not progress):
        bundles.append(encode_bundle(backend, meme, records[meme.id], config, image_root=image_root))
    return bundles
