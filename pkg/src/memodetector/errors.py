"""
Exception hierarchy for memodetector

Every error the pipeline raises on purpose derives from MemoDetectorError, so
the CLI can turn them into exit code 1 with a readable message.
"""

from typing import List, Optional, Sequence, Tuple


class MemoDetectorError(Exception):
    """Base class for all memodetector errors"""
    pass


class ManifestParseError(MemoDetectorError):
    """A manifest line is not a well-formed record"""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ManifestValidationError(MemoDetectorError):
    """A manifest parsed but violates an invariant (duplicate id, unknown label, ...)"""

    def __init__(self, message: str, line_numbers: Optional[Sequence[int]] = None):
        if line_numbers:
            lines = ", ".join(str(n) for n in line_numbers)
            message = f"{message} (lines {lines})"
        super().__init__(message)
        self.line_numbers = list(line_numbers or [])


class ConfigError(MemoDetectorError):
    """Invalid or inconsistent configuration"""
    pass


class EndpointError(MemoDetectorError):
    """Transport or auth failure talking to the MLLM endpoint"""
    pass


class GenerationError(MemoDetectorError):
    """The MLLM answered, but with nothing usable"""
    pass


class PreprocessingError(MemoDetectorError):
    """An input could not be prepared for the MLLM (e.g. oversize image)"""
    pass


class InputError(MemoDetectorError):
    """An input could not be decoded (e.g. broken image file)"""
    pass


class ShapeError(MemoDetectorError):
    """Tensor shapes do not line up"""
    pass


class DegenerateInputError(MemoDetectorError):
    """A sequence that must have unmasked positions has none"""
    pass


class NumericError(MemoDetectorError):
    """NaN or Inf where finite values are required"""
    pass


class CoverageError(MemoDetectorError):
    """The enhancement cache is missing entries needed for a run"""

    def __init__(self, gaps: List[Tuple[str, str]]):
        shown = ", ".join(f"{meme_id}/{step}" for meme_id, step in gaps[:20])
        more = f" (+{len(gaps) - 20} more)" if len(gaps) > 20 else ""
        super().__init__(f"missing {len(gaps)} enhancement entries: {shown}{more}")
        self.gaps = list(gaps)


class VocabMismatchError(ManifestValidationError):
    """Two artifacts disagree on the label vocabulary"""
    pass


class ReportError(MemoDetectorError):
    """Report inputs are missing or inconsistent"""
    pass
