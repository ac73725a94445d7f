"""
Four-step textual enhancement of memes

Each meme is sent to a multimodal LLM four times, one request per step:

    ID   image only        what is visually observable
    TM   text only         meaning and tone of the overlaid text
    CIM  image and text    the intended message of the combination
    CA   image and text    the context someone would use the meme in

Steps are independent requests; earlier outputs are not fed into later ones.
DIRECT is a single-request comparison variant that asks for the emotion and
an explanation at once. Results go to an EnhancementCache so reruns are free.
"""

import hashlib
import io
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from .enhancement_cache import CacheEntry, EnhancementCache
from .errors import GenerationError, InputError, MemoDetectorError, PreprocessingError
from .manifest import DatasetManifest, LabelVocab, MemeInstance, image_bytes
from .mllm_client import ContentPart, guess_mime

logger = logging.getLogger(__name__)

DEFAULT_MAX_IMAGE_BYTES = 20 * 1024 * 1024


class EnhancementStep(str, Enum):
    """Prompting steps; DIRECT is the single-step comparison variant"""
    ID = "ID"
    TM = "TM"
    CIM = "CIM"
    CA = "CA"
    DIRECT = "DIRECT"


FOUR_STEPS: Tuple[EnhancementStep, ...] = (
    EnhancementStep.ID, EnhancementStep.TM, EnhancementStep.CIM, EnhancementStep.CA,
)

PROMPTS: Dict[EnhancementStep, str] = {
    EnhancementStep.ID: "Describe what is visually observable in this meme (ignore all text).",
    EnhancementStep.TM: "The meme text is {{{text}}}. Analyze the meaning, tone, or rhetorical use of this textual content.",
    EnhancementStep.CIM: "State the likely intended message when image and text are viewed together.",
    EnhancementStep.CA: "Suggest the possible context in which someone might use this meme.",
    # Reconstructed wording: infer the emotion and explain it in one response
    EnhancementStep.DIRECT: ("Infer the emotional tendency this meme is intended to convey, "
                             "and provide a single-step explanation of how the image and text express it."),
}

# Which modalities each step's request carries
STEP_MODALITIES: Dict[EnhancementStep, Tuple[bool, bool]] = {
    EnhancementStep.ID: (True, False),
    EnhancementStep.TM: (False, True),
    EnhancementStep.CIM: (True, True),
    EnhancementStep.CA: (True, True),
    EnhancementStep.DIRECT: (True, True),
}

ZERO_SHOT_PROMPT = ("Which emotion does this meme express? Choose exactly one of: {labels}. "
                    "Answer with the emotion name only.")
CHAIN_OF_THOUGHT_PROMPT = ("Think step by step: describe the image, interpret the text, and explain what "
                           "they mean together. Then decide which emotion this meme expresses, choosing "
                           "exactly one of: {labels}. Finish with 'Answer: <emotion>'.")


def build_prompt(step: EnhancementStep, meme_text: str) -> str:
    """Instruction text for a step; only TM interpolates the meme text"""
    step = EnhancementStep(step)
    template = PROMPTS[step]
    if step == EnhancementStep.TM:
        return template.format(text=meme_text)
    return template


def prompt_hash(step: EnhancementStep, meme_text: str) -> str:
    """Digest of the step template and the text that step's request carries"""
    step = EnhancementStep(step)
    carried = meme_text if STEP_MODALITIES[step][1] else ""
    blob = f"{step.value}\n{PROMPTS[step]}\n{carried}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_parts(step: EnhancementStep, meme_text: str, image: Optional[bytes]) -> List[ContentPart]:
    """Message content for one step request"""
    step = EnhancementStep(step)
    wants_image, wants_text = STEP_MODALITIES[step]
    parts = []
    if wants_image:
        if image is None:
            raise PreprocessingError(f"step {step.value} needs the meme image")
        parts.append(ContentPart.from_image(image, guess_mime(image)))
    if wants_text and step != EnhancementStep.TM:
        parts.append(ContentPart.from_text(f"Meme text: {meme_text}"))
    parts.append(ContentPart.from_text(build_prompt(step, meme_text)))
    return parts


@dataclass
class EnhancementRecord:
    """Generated texts for one meme, keyed by step"""
    meme_id: str
    texts: Dict[EnhancementStep, str] = field(default_factory=dict)
    model_id: str = ""
    prompt_hash: Dict[EnhancementStep, str] = field(default_factory=dict)
    temperature: float = 0.0

    @property
    def is_complete(self) -> bool:
        """Exactly the four chain steps, each non-empty"""
        return set(self.texts) == set(FOUR_STEPS) and all(self.texts[s] for s in FOUR_STEPS)

    def missing(self, steps: Iterable[EnhancementStep]) -> List[EnhancementStep]:
        return [s for s in steps if not self.texts.get(EnhancementStep(s))]


@dataclass
class EnhanceSummary:
    """Outcome of an enhance_all run"""
    hits: int = 0
    misses: int = 0
    failures: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def failure_count(self) -> int:
        return len(self.failures)

    def __str__(self) -> str:
        return f"hits={self.hits} misses={self.misses} failures={self.failure_count}"


def _checked_image(meme: MemeInstance, image_root: Optional[Path], max_image_bytes: int) -> bytes:
    data = image_bytes(meme, image_root)
    if len(data) > max_image_bytes:
        raise PreprocessingError(
            f"image for meme '{meme.id}' is {len(data)} bytes, above the {max_image_bytes}-byte limit")
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.verify()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise InputError(f"cannot decode image for meme '{meme.id}': {e}")
    return data


def enhance_step(client, meme: MemeInstance, step: EnhancementStep,
                 image_root: Optional[Path] = None,
                 max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES) -> str:
    """Run one step for one meme and return the stripped response

    An empty response is retried once; a second empty response raises
    GenerationError. Transport and auth failures surface as EndpointError.
    """
    step = EnhancementStep(step)
    image = _checked_image(meme, image_root, max_image_bytes) if STEP_MODALITIES[step][0] else None
    parts = build_parts(step, meme.text, image)

    for attempt in range(2):
        text = (client.generate(parts, step=step.value) or "").strip()
        if text:
            return text
        logger.debug("Empty response for %s/%s (attempt %d)", meme.id, step.value, attempt + 1)
    raise GenerationError(f"empty response for meme '{meme.id}' step {step.value} after retry")


def enhance_direct(client, meme: MemeInstance, image_root: Optional[Path] = None,
                   max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES) -> str:
    """Single-request emotion inference plus explanation"""
    return enhance_step(client, meme, EnhancementStep.DIRECT, image_root, max_image_bytes)


def _open_cache(cache: Union[str, Path, EnhancementCache]) -> EnhancementCache:
    return cache if isinstance(cache, EnhancementCache) else EnhancementCache(cache)


def _enhance_meme(client, cache: EnhancementCache, meme: MemeInstance, steps: Sequence[EnhancementStep],
                  image_root: Optional[Path], max_image_bytes: int) -> EnhanceSummary:
    summary = EnhanceSummary()
    for step in steps:
        digest = prompt_hash(step, meme.text)
        if cache.get(meme.id, step.value, client.model_id, digest) is not None:
            summary.hits += 1
            continue
        try:
            text = enhance_step(client, meme, step, image_root, max_image_bytes)
        except MemoDetectorError as e:
            logger.warning("Enhancement failed for %s/%s: %s", meme.id, step.value, e)
            summary.failures.append((meme.id, step.value))
            continue
        cache.put(CacheEntry(
            meme_id=meme.id,
            step=step.value,
            model_id=client.model_id,
            prompt_hash=digest,
            temperature=float(client.temperature),
            text=text,
            max_tokens=getattr(client, "max_tokens", None),
        ))
        summary.misses += 1
    return summary


def ordered_steps(steps: Iterable[EnhancementStep]) -> Tuple[EnhancementStep, ...]:
    wanted = {EnhancementStep(s) for s in steps}
    return tuple(s for s in FOUR_STEPS + (EnhancementStep.DIRECT,) if s in wanted)


def enhance_all(client, manifest: DatasetManifest, cache: Union[str, Path, EnhancementCache],
                steps: Iterable[EnhancementStep] = FOUR_STEPS, workers: int = 4,
                max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES) -> EnhanceSummary:
    """Generate every requested step for every meme, skipping cached entries

    Memes run in parallel across `workers` threads; the steps of one meme run
    in the order ID, TM, CIM, CA. Failures are collected, never raised.
    """
    cache = _open_cache(cache)
    steps = ordered_steps(steps)
    memes = list(manifest.instances)
    results: List[Optional[EnhanceSummary]] = [None] * len(memes)

    progress = tqdm(total=len(memes), desc="enhance", unit="meme",
                    disable=not logger.isEnabledFor(logging.INFO))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            pool.submit(_enhance_meme, client, cache, meme, steps, manifest.root, max_image_bytes): i
            for i, meme in enumerate(memes)
        }
        for future, i in futures.items():
            results[i] = future.result()
            progress.update(1)
    progress.close()

    summary = EnhanceSummary()
    for partial in results:
        summary.hits += partial.hits
        summary.misses += partial.misses
        summary.failures.extend(partial.failures)
    logger.info("Enhancement finished: %s", summary)
    return summary


def load_record(cache: Union[str, Path, EnhancementCache], meme_id: str,
                steps: Iterable[EnhancementStep] = FOUR_STEPS,
                model_id: Optional[str] = None, meme_text: Optional[str] = None) -> EnhancementRecord:
    """Assemble an EnhancementRecord from cached entries (absent steps are left out)

    With meme_text, only entries generated from the current prompt for that
    text count; output made for an earlier version of the meme text is ignored.
    """
    cache = _open_cache(cache)
    record = EnhancementRecord(meme_id=meme_id)
    for step in ordered_steps(steps):
        digest = None if meme_text is None else prompt_hash(step, meme_text)
        entry = cache.get(meme_id, step.value, model_id, digest)
        if entry is None:
            continue
        record.texts[step] = entry.text
        record.prompt_hash[step] = entry.prompt_hash
        record.model_id = entry.model_id
        record.temperature = entry.temperature
    return record


def coverage_gaps(cache: Union[str, Path, EnhancementCache], memes: Iterable[MemeInstance],
                  steps: Iterable[EnhancementStep], model_id: Optional[str] = None) -> List[Tuple[str, str]]:
    """(meme_id, step) pairs with no cached text for the meme's current prompt"""
    cache = _open_cache(cache)
    steps = ordered_steps(steps)
    return [(meme.id, step.value) for meme in memes for step in steps
            if cache.get(meme.id, step.value, model_id, prompt_hash(step, meme.text)) is None]


@dataclass(frozen=True)
class ZeroShotPrediction:
    meme_id: str
    label: int
    prediction: int
    response: str
    parsed: bool


def parse_label(response: str, vocab: LabelVocab) -> Optional[int]:
    """Index of the vocabulary name mentioned last in the response"""
    best = None
    best_pos = -1
    lowered = response.lower()
    for index, name in enumerate(vocab.names):
        for match in re.finditer(r"(?<!\w)" + re.escape(name.lower()) + r"(?!\w)", lowered):
            if match.start() > best_pos:
                best, best_pos = index, match.start()
    return best


def classify_zero_shot(client, meme: MemeInstance, vocab: LabelVocab, chain_of_thought: bool = False,
                       image_root: Optional[Path] = None,
                       max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES) -> ZeroShotPrediction:
    """Ask the MLLM for the label directly; unparseable answers fall back to class 0"""
    template = CHAIN_OF_THOUGHT_PROMPT if chain_of_thought else ZERO_SHOT_PROMPT
    image = _checked_image(meme, image_root, max_image_bytes)
    parts = [
        ContentPart.from_image(image, guess_mime(image)),
        ContentPart.from_text(f"Meme text: {meme.text}"),
        ContentPart.from_text(template.format(labels=", ".join(vocab.names))),
    ]
    response = (client.generate(parts, step="COT" if chain_of_thought else "ZERO_SHOT") or "").strip()
    index = parse_label(response, vocab)
    return ZeroShotPrediction(
        meme_id=meme.id,
        label=meme.label,
        prediction=0 if index is None else index,
        response=response,
        parsed=index is not None,
    )


def zero_shot_all(client, manifest: DatasetManifest, memes: Sequence[MemeInstance],
                  chain_of_thought: bool = False, workers: int = 4,
                  max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES) -> List[ZeroShotPrediction]:
    """Classify memes in parallel, returning predictions in input order"""
    def classify(meme):
        return classify_zero_shot(client, meme, manifest.vocab, chain_of_thought, manifest.root, max_image_bytes)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        iterator = pool.map(classify, memes)
        return list(tqdm(iterator, total=len(memes), desc="zeroshot", unit="meme",
                         disable=not logger.isEnabledFor(logging.INFO)))
