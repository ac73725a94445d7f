"""
Enhancement cache

Persists MLLM-generated texts as append-only JSON Lines, one entry per
(meme_id, step) generation, with an in-memory index for lookups. Entries are
never rewritten, so readers can load the file while a run is appending.
"""

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

ENTRY_FIELDS = ("meme_id", "step", "model_id", "prompt_hash", "temperature", "text", "ts")


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class CacheEntry:
    """One generated text with its provenance"""
    meme_id: str
    step: str
    model_id: str
    prompt_hash: str
    temperature: float
    text: str
    ts: str = field(default_factory=utc_timestamp)
    max_tokens: Optional[int] = None

    def to_json(self) -> str:
        data = {name: getattr(self, name) for name in ENTRY_FIELDS}
        if self.max_tokens is not None:
            data["max_tokens"] = self.max_tokens
        return json.dumps(data, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> "CacheEntry":
        missing = [k for k in ENTRY_FIELDS if k not in data]
        if missing:
            raise KeyError(", ".join(missing))
        return cls(
            meme_id=str(data["meme_id"]),
            step=str(data["step"]),
            model_id=str(data["model_id"]),
            prompt_hash=str(data["prompt_hash"]),
            temperature=float(data["temperature"]),
            text=str(data["text"]),
            ts=str(data["ts"]),
            max_tokens=data.get("max_tokens"),
        )


class EnhancementCache:
    """Append-only store of enhancement entries

    Lookups with a pinned model id and prompt hash match exactly. A prompt
    hash alone returns the latest entry made from that prompt; fully unpinned
    lookups return the most recently appended entry for (meme_id, step).
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._exact: Dict[Tuple[str, str, str, str], CacheEntry] = {}
        self._latest: Dict[Tuple[str, str], CacheEntry] = {}
        self._by_prompt: Dict[Tuple[str, str, str], CacheEntry] = {}
        self.skipped_lines = 0
        self._load()

    def _index(self, entry: CacheEntry):
        self._exact[(entry.meme_id, entry.step, entry.model_id, entry.prompt_hash)] = entry
        self._latest[(entry.meme_id, entry.step)] = entry
        self._by_prompt[(entry.meme_id, entry.step, entry.prompt_hash)] = entry

    def _load(self):
        if not self.path.exists():
            return
        with open(self.path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    self._index(CacheEntry.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    # A run killed mid-append leaves a truncated last line
                    self.skipped_lines += 1
                    logger.warning("Skipping unreadable cache line %d in %s: %s", line_number, self.path, e)
        logger.debug("Loaded %d cache entries from %s", len(self._exact), self.path)

    def __len__(self) -> int:
        return len(self._exact)

    def __contains__(self, key: Tuple[str, str]) -> bool:
        return tuple(key) in self._latest

    def get(self, meme_id: str, step: str, model_id: Optional[str] = None,
            prompt_hash: Optional[str] = None) -> Optional[CacheEntry]:
        """Find an entry; model_id and prompt_hash pin the lookup when given"""
        with self._lock:
            if model_id is not None and prompt_hash is not None:
                return self._exact.get((meme_id, step, model_id, prompt_hash))
            if prompt_hash is not None:
                return self._by_prompt.get((meme_id, step, prompt_hash))
            entry = self._latest.get((meme_id, step))
            if entry is not None and model_id is not None and entry.model_id != model_id:
                matches = [e for k, e in self._exact.items() if k[:3] == (meme_id, step, model_id)]
                return matches[-1] if matches else None
            return entry

    def put(self, entry: CacheEntry) -> CacheEntry:
        """Append an entry and index it"""
        line = entry.to_json() + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            self._index(entry)
        return entry

    def entries(self) -> Iterator[CacheEntry]:
        with self._lock:
            return iter(list(self._exact.values()))

    def steps_for(self, meme_id: str) -> List[str]:
        with self._lock:
            return sorted({step for (mid, step) in self._latest if mid == meme_id})

    def stats(self) -> Dict[str, int]:
        with self._lock:
            return {
                "entries": len(self._exact),
                "memes": len({mid for mid, _ in self._latest}),
                "skipped_lines": self.skipped_lines,
            }
