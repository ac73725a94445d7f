"""
Dual-stage modal fusion

Stage 1 appends the original text tokens to the image patch sequence as
pseudo-patches. Stage 2 runs cross-attention in both directions between that
sequence and the concatenated enhanced texts, each direction reading the same
inputs and adding its attended values back as a residual. The two enhanced
sequences are mean-pooled over real positions, concatenated and classified
with a softmax layer.

Tensor functions accept a single sequence (L x d) or a padded batch
(B x L x d) with boolean masks marking real positions.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .encoders import FeatureBundle, FeatureSequence, SequenceKind
from .enhancer import EnhancementStep, ordered_steps
from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError

if TYPE_CHECKING:
    from .config_manager import RunConfig

logger = logging.getLogger(__name__)


class FusionVariant(str, Enum):
    """Second-stage fusion strategy"""
    BIDIRECTIONAL_XATTN = "bidirectional_xattn"
    ADD = "add"
    CONCAT = "concat"
    ONEWAY_XATTN = "oneway_xattn"
    NO_DUALSTAGE = "no_dualstage"


class AttentionParams(nn.Module):
    """Projections for one attention direction"""

    def __init__(self, d: int, d_k: int, heads: int = 1):
        super().__init__()
        self.d = d
        self.d_k = d_k
        self.heads = heads
        width = d_k * heads
        self.W_Q = nn.Parameter(torch.empty(d, width))
        self.W_K = nn.Parameter(torch.empty(d, width))
        self.W_V = nn.Parameter(torch.empty(d, width))
        self.W_O = nn.Parameter(torch.empty(width, d))
        self.reset_parameters()

    def reset_parameters(self):
        for weight in (self.W_Q, self.W_K, self.W_V, self.W_O):
            nn.init.xavier_uniform_(weight)


class SoftmaxClassifier(nn.Module):
    """logits = E W + b"""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        self.W = nn.Parameter(torch.empty(width, num_classes))
        self.b = nn.Parameter(torch.zeros(num_classes))
        nn.init.xavier_uniform_(self.W)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return embedding @ self.W + self.b


class FusionParams(nn.Module):
    """Attention projections per direction plus the classifier

    fusion.fwd holds the text-queries-visual projections, fusion.bwd the
    visual-queries-text mirror. Variants without attention hold neither.
    """

    def __init__(self, d: int, num_classes: int,
                 variant: FusionVariant = FusionVariant.BIDIRECTIONAL_XATTN,
                 d_k: Optional[int] = None, heads: int = 1):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if d_k is None:
            if d % heads:
                raise ConfigError(f"fusion.heads ({heads}) must divide the feature width ({d})")
            d_k = d // heads
        self.d = d
        self.d_k = d_k
        self.heads = heads
        self.num_classes = num_classes
        self.variant = FusionVariant(variant)

        self.fusion = nn.ModuleDict()
        if self.variant in (FusionVariant.BIDIRECTIONAL_XATTN, FusionVariant.ONEWAY_XATTN):
            self.fusion["fwd"] = AttentionParams(d, d_k, heads)
        if self.variant == FusionVariant.BIDIRECTIONAL_XATTN:
            self.fusion["bwd"] = AttentionParams(d, d_k, heads)
        self.classifier = SoftmaxClassifier(self.embedding_width, num_classes)

    @property
    def embedding_width(self) -> int:
        return self.d if self.variant == FusionVariant.ADD else 2 * self.d

    @property
    def fwd(self) -> Optional[AttentionParams]:
        return self.fusion["fwd"] if "fwd" in self.fusion else None

    @property
    def bwd(self) -> Optional[AttentionParams]:
        return self.fusion["bwd"] if "bwd" in self.fusion else None


@dataclass
class FusionOutput:
    v_tilde: torch.Tensor
    tau_tilde: torch.Tensor
    meme_embedding: torch.Tensor
    logits: torch.Tensor
    probabilities: torch.Tensor

    @property
    def predictions(self) -> torch.Tensor:
        # torch.argmax returns the first maximal index, so ties go to the lowest class
        return torch.argmax(self.probabilities, dim=-1)


def _batched(x: torch.Tensor, mask: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    if x.dim() == 2:
        x = x.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
        squeeze = True
    elif x.dim() == 3:
        squeeze = False
    else:
        raise ShapeError(f"expected an L x d or B x L x d tensor, got shape {tuple(x.shape)}")
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match sequence shape {tuple(x.shape[:2])}")
    return x, mask.to(torch.bool), squeeze


def stage1_fuse(H_v: torch.Tensor, H_tau: torch.Tensor, mask_v: Optional[torch.Tensor] = None,
                mask_tau: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Append text tokens to the patch sequence as pseudo-patches, visual rows first"""
    if H_v.shape[-1] != H_tau.shape[-1]:
        raise ShapeError(f"stage-1 width mismatch: visual d={H_v.shape[-1]}, text d={H_tau.shape[-1]}")
    v, mv, squeeze = _batched(H_v, mask_v)
    t, mt, _ = _batched(H_tau, mask_tau)
    if v.shape[0] != t.shape[0]:
        raise ShapeError(f"batch size mismatch: {v.shape[0]} vs {t.shape[0]}")
    rows = torch.cat([v, t], dim=1)
    mask = torch.cat([mv, mt], dim=1)
    if squeeze:
        return rows[0], mask[0]
    return rows, mask


def build_enhanced_text(enhanced: Dict[EnhancementStep, FeatureSequence],
                        order: Optional[Sequence[EnhancementStep]] = None) -> FeatureSequence:
    """Concatenate enhanced-text sequences in the order ID, TM, CIM, CA (present steps only)"""
    if not enhanced:
        raise ConfigError("no enhanced texts to fuse; enable at least one enhancement step")
    steps = [s for s in ordered_steps(order if order is not None else enhanced.keys()) if s in enhanced]
    if not steps:
        raise ConfigError("none of the requested enhancement steps are present")
    widths = {enhanced[s].d for s in steps}
    if len(widths) != 1:
        raise ShapeError(f"enhanced sequences have mixed widths {sorted(widths)}")
    rows = torch.cat([enhanced[s].rows for s in steps], dim=0)
    mask = torch.cat([enhanced[s].mask for s in steps], dim=0)
    return FeatureSequence(rows, mask, SequenceKind.TEXTUAL)


def attend(params: AttentionParams, queries: torch.Tensor, keys: torch.Tensor,
           key_mask: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V W_O over unmasked keys (batched inputs)"""
    B, Lq, _ = queries.shape
    Lk = keys.shape[1]
    h, d_k = params.heads, params.d_k
    Q = (queries @ params.W_Q).view(B, Lq, h, d_k).transpose(1, 2)
    K = (keys @ params.W_K).view(B, Lk, h, d_k).transpose(1, 2)
    V = (keys @ params.W_V).view(B, Lk, h, d_k).transpose(1, 2)
    scores = Q @ K.transpose(-2, -1) / math.sqrt(d_k)
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    attended = (weights @ V).transpose(1, 2).reshape(B, Lq, h * d_k)
    return attended @ params.W_O


def _check_inputs(v: torch.Tensor, mv: torch.Tensor, t: torch.Tensor, mt: torch.Tensor):
    if v.shape[1] == 0 or t.shape[1] == 0:
        raise DegenerateInputError(f"cross-attention needs N >= 1 and M >= 1, got N={v.shape[1]}, M={t.shape[1]}")
    if not mv.any(dim=1).all() or not mt.any(dim=1).all():
        raise DegenerateInputError("a sequence has no unmasked positions")
    if not torch.isfinite(v).all() or not torch.isfinite(t).all():
        raise NumericError("non-finite values in fusion inputs")


def bidirectional_xattn(H_v_prime: torch.Tensor, H_tau_prime: torch.Tensor, params: FusionParams,
                        mask_v: Optional[torch.Tensor] = None,
                        mask_tau: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cross-attention in both directions with residual adds

    tau_tilde = H_tau' + Attn(Q from H_tau', K/V from H_v') W_O
    v_tilde   = H_v'   + Attn(Q from H_v', K/V from H_tau') W_O'
    Both directions read the unmodified inputs.
    """
    if params.fwd is None or params.bwd is None:
        raise ConfigError(f"variant {params.variant.value} has no bidirectional attention parameters")
    v, mv, squeeze = _batched(H_v_prime, mask_v)
    t, mt, _ = _batched(H_tau_prime, mask_tau)
    _check_inputs(v, mv, t, mt)
    tau_tilde = t + attend(params.fwd, t, v, mv)
    v_tilde = v + attend(params.bwd, v, t, mt)
    if squeeze:
        return v_tilde[0], tau_tilde[0]
    return v_tilde, tau_tilde


def masked_mean(x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over unmasked rows; padding never dilutes the result"""
    x, mask, squeeze = _batched(x, mask)
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise DegenerateInputError("cannot pool a sequence with no unmasked positions")
    weights = mask.to(x.dtype).unsqueeze(-1)
    pooled = (x * weights).sum(dim=1) / counts.to(x.dtype).unsqueeze(-1)
    return pooled[0] if squeeze else pooled


def fuse_variant(variant: FusionVariant, H_v_prime: torch.Tensor, H_tau_prime: torch.Tensor,
                 params: FusionParams, mask_v: Optional[torch.Tensor] = None,
                 mask_tau: Optional[torch.Tensor] = None, visual: Optional[torch.Tensor] = None,
                 visual_mask: Optional[torch.Tensor] = None,
                 keep_stage1: bool = False) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run one fusion strategy; returns (v_tilde, tau_tilde, meme_embedding)

    add sums the two pooled sides (width d). concat and no_dualstage
    concatenate them (width 2d) without attention; no_dualstage pools the raw
    patch sequence `visual` unless keep_stage1. oneway_xattn only runs the
    text-queries-visual direction.
    """
    variant = FusionVariant(variant)
    v, mv, squeeze = _batched(H_v_prime, mask_v)
    t, mt, _ = _batched(H_tau_prime, mask_tau)
    _check_inputs(v, mv, t, mt)

    if variant == FusionVariant.BIDIRECTIONAL_XATTN:
        v_tilde, tau_tilde = bidirectional_xattn(v, t, params, mv, mt)
    elif variant == FusionVariant.ONEWAY_XATTN:
        if params.fwd is None:
            raise ConfigError("oneway_xattn needs text-to-visual attention parameters")
        v_tilde, tau_tilde = v, t + attend(params.fwd, t, v, mv)
    elif variant == FusionVariant.NO_DUALSTAGE and not keep_stage1:
        if visual is None:
            raise ConfigError("no_dualstage needs the raw visual sequence")
        v, mv, _ = _batched(visual, visual_mask)
        v_tilde, tau_tilde = v, t
    else:
        v_tilde, tau_tilde = v, t

    pooled_v = masked_mean(v_tilde, mv)
    pooled_t = masked_mean(tau_tilde, mt)
    if variant == FusionVariant.ADD:
        if pooled_v.shape[-1] != pooled_t.shape[-1]:
            raise ShapeError("add fusion needs equal widths on both sides")
        embedding = pooled_v + pooled_t
    else:
        embedding = torch.cat([pooled_v, pooled_t], dim=-1)

    if squeeze:
        return v_tilde[0], tau_tilde[0], embedding[0]
    return v_tilde, tau_tilde, embedding


def classify(embedding: torch.Tensor, params: FusionParams) -> Tuple[torch.Tensor, torch.Tensor]:
    if embedding.shape[-1] != params.embedding_width:
        raise ShapeError(f"classifier expects width {params.embedding_width}, got {embedding.shape[-1]}")
    logits = params.classifier(embedding)
    return logits, torch.softmax(logits, dim=-1)


def pool_and_classify(v_tilde: torch.Tensor, tau_tilde: torch.Tensor, params: FusionParams,
                      mask_v: Optional[torch.Tensor] = None,
                      mask_tau: Optional[torch.Tensor] = None) -> FusionOutput:
    """E = [masked mean of v_tilde ; masked mean of tau_tilde], then softmax(E W + b)"""
    embedding = torch.cat([masked_mean(v_tilde, mask_v), masked_mean(tau_tilde, mask_tau)], dim=-1)
    logits, probabilities = classify(embedding, params)
    return FusionOutput(v_tilde, tau_tilde, embedding, logits, probabilities)


@dataclass
class FusionBatch:
    """Padded model inputs for a list of bundles"""
    visual: torch.Tensor
    visual_mask: torch.Tensor
    text: torch.Tensor
    text_mask: torch.Tensor
    enhanced: torch.Tensor
    enhanced_mask: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.visual.shape[0]


def pad_sequences(sequences: Sequence[FeatureSequence], d: int,
                  dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into B x Lmax x d with zero padding and a mask"""
    longest = max((s.length for s in sequences), default=0)
    rows = torch.zeros((len(sequences), longest, d), dtype=dtype)
    mask = torch.zeros((len(sequences), longest), dtype=torch.bool)
    for i, seq in enumerate(sequences):
        if seq.length:
            rows[i, : seq.length] = seq.rows.to(dtype)
            mask[i, : seq.length] = seq.mask
    return rows, mask


def collate(bundles: Sequence[FeatureBundle], steps: Sequence[EnhancementStep],
            dtype: torch.dtype = torch.float32, labels: Optional[Sequence[int]] = None) -> FusionBatch:
    if not bundles:
        raise ShapeError("cannot collate an empty batch")
    enhanced = [build_enhanced_text(b.enhanced, steps) for b in bundles]
    visual, visual_mask = pad_sequences([b.visual for b in bundles], bundles[0].visual.d, dtype)
    text, text_mask = pad_sequences([b.text for b in bundles], bundles[0].text.d, dtype)
    enh, enh_mask = pad_sequences(enhanced, bundles[0].d, dtype)
    label_tensor = None if labels is None else torch.tensor(list(labels), dtype=torch.long)
    return FusionBatch(visual, visual_mask, text, text_mask, enh, enh_mask, label_tensor)


class MemeEmotionModel(FusionParams):
    """Full classifier: optional visual projection, stage-1 and the configured fusion"""

    def __init__(self, d: int, num_classes: int,
                 variant: FusionVariant = FusionVariant.BIDIRECTIONAL_XATTN,
                 steps: Sequence[EnhancementStep] = (), d_k: Optional[int] = None, heads: int = 1,
                 visual_dim: Optional[int] = None, keep_stage1: bool = False):
        super().__init__(d, num_classes, variant, d_k, heads)
        self.steps = tuple(ordered_steps(steps))
        self.keep_stage1 = keep_stage1
        self.visual_dim = visual_dim or d
        # Text space stays fixed; only the visual side is projected when widths differ
        self.visual_proj = None
        if self.visual_dim != d:
            self.visual_proj = nn.Linear(self.visual_dim, d, bias=False)
            nn.init.xavier_uniform_(self.visual_proj.weight)

    @classmethod
    def from_config(cls, config: "RunConfig", d: int, num_classes: int,
                    visual_dim: Optional[int] = None) -> "MemeEmotionModel":
        d_k = config.fusion_d_k if config.fusion_d_k > 0 else None
        return cls(d=d, num_classes=num_classes, variant=config.variant, steps=config.steps,
                   d_k=d_k, heads=config.fusion_heads, visual_dim=visual_dim,
                   keep_stage1=config.fusion_keep_stage1)

    def forward(self, batch: FusionBatch) -> FusionOutput:
        visual = batch.visual if self.visual_proj is None else self.visual_proj(batch.visual)
        H_v_prime, mask_v = stage1_fuse(visual, batch.text, batch.visual_mask, batch.text_mask)
        v_tilde, tau_tilde, embedding = fuse_variant(
            self.variant, H_v_prime, batch.enhanced, self, mask_v, batch.enhanced_mask,
            visual=visual, visual_mask=batch.visual_mask, keep_stage1=self.keep_stage1,
        )
        logits, probabilities = classify(embedding, self)
        return FusionOutput(v_tilde, tau_tilde, embedding, logits, probabilities)


def parameter_count(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def parameter_checksum(model: nn.Module) -> str:
    """Digest of every parameter's bytes, in state-dict order"""
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]
