"""
Multimodal LLM client

Handles all communication with a chat-completions style endpoint, including:
- Authentication (bearer token read from an environment variable)
- Interleaved image + text message content
- Retries with exponential backoff
- Redaction of tokens and image payloads in debug logs

MockMllmClient is a deterministic stand-in used by --mock and the test suite.
"""

import base64
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import requests

from .errors import EndpointError

logger = logging.getLogger(__name__)

USER_AGENT = "memodetector/0.1"


@dataclass(frozen=True)
class ContentPart:
    """One piece of message content: text or an encoded image"""
    kind: str  # "text" | "image"
    text: str = ""
    data: bytes = b""
    mime: str = "image/png"

    @classmethod
    def from_text(cls, text: str) -> "ContentPart":
        return cls(kind="text", text=text)

    @classmethod
    def from_image(cls, data: bytes, mime: str = "image/png") -> "ContentPart":
        return cls(kind="image", data=data, mime=mime)

    def to_payload(self) -> Dict[str, Any]:
        if self.kind == "image":
            encoded = base64.b64encode(self.data).decode("ascii")
            return {"type": "image_url", "image_url": {"url": f"data:{self.mime};base64,{encoded}"}}
        return {"type": "text", "text": self.text}


@dataclass(frozen=True)
class MllmRequest:
    """What a client was asked, kept for provenance and tests"""
    step: Optional[str]
    parts: Sequence[ContentPart]

    @property
    def image_attached(self) -> bool:
        return any(p.kind == "image" for p in self.parts)

    @property
    def texts(self) -> List[str]:
        return [p.text for p in self.parts if p.kind == "text"]

    @property
    def prompt(self) -> str:
        texts = self.texts
        return texts[-1] if texts else ""


def guess_mime(data: bytes) -> str:
    """Image MIME type from magic bytes"""
    if data.startswith(b"\x89PNG"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if data.startswith(b"GIF8"):
        return "image/gif"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return "application/octet-stream"


class MllmClient:
    """Chat-completions client for a multimodal LLM endpoint"""

    def __init__(self, endpoint: str, model_id: str, token: Optional[str] = None,
                 temperature: float = 0.0, max_tokens: int = 512, timeout: float = 60.0,
                 max_retries: int = 3, backoff: float = 1.0):
        if not endpoint:
            raise EndpointError("no endpoint configured (set enhance.endpoint or use --mock)")
        self.endpoint = endpoint
        self.model_id = model_id
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_retries = max(1, max_retries)
        self.backoff = backoff
        self.calls = 0
        self._lock = threading.Lock()

        self.session = requests.Session()
        self.session.headers.update({
            "User-Agent": USER_AGENT,
            "Content-Type": "application/json",
        })
        if token:
            self.session.headers["Authorization"] = f"Bearer {token}"

    @classmethod
    def from_config(cls, config) -> "MllmClient":
        """Build from a RunConfig; the token is read from config.enhance_token_env"""
        token = os.environ.get(config.enhance_token_env) if config.enhance_token_env else None
        if not token:
            logger.warning("Environment variable %s is not set; sending requests without a token",
                           config.enhance_token_env)
        return cls(
            endpoint=config.enhance_endpoint,
            model_id=config.enhance_model,
            token=token,
            temperature=config.enhance_temperature,
            max_tokens=config.enhance_max_tokens,
            timeout=config.enhance_timeout,
            max_retries=config.enhance_max_retries,
            backoff=config.enhance_backoff,
        )

    def _filter_sensitive_headers(self, headers: Dict[str, str]) -> Dict[str, str]:
        """Filter out any potentially sensitive headers from debug output"""
        sensitive_headers = {"authorization", "x-api-key", "x-auth-token", "bearer", "api-key"}
        return {k: ("[REDACTED]" if k.lower() in sensitive_headers else v) for k, v in headers.items()}

    def _sanitize_debug_text(self, text: str) -> str:
        """Remove tokens and inline image data from debug text output"""
        text = re.sub(r"data:[\w/+.-]+;base64,[A-Za-z0-9+/=]+", "data:[IMAGE]", text)
        return re.sub(r"[A-Za-z0-9+/_-]{44,}={0,2}", "[REDACTED_TOKEN]", text)

    def build_payload(self, parts: Sequence[ContentPart]) -> Dict[str, Any]:
        return {
            "model": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": [p.to_payload() for p in parts]}],
        }

    def _extract_text(self, data: Any) -> str:
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EndpointError("Unexpected response shape from endpoint (no choices[0].message.content)")
        if content is None:
            return ""
        if isinstance(content, list):
            return "".join(c.get("text", "") for c in content if isinstance(c, dict))
        return str(content)

    def generate(self, parts: Sequence[ContentPart], step: Optional[str] = None) -> str:
        """Send one request with retries and return the raw response text"""
        payload = self.build_payload(parts)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("POST %s step=%s", self.endpoint, step)
            logger.debug("Request headers: %s", self._filter_sensitive_headers(dict(self.session.headers)))
            logger.debug("Request body: %s", self._sanitize_debug_text(json.dumps(payload, ensure_ascii=False))[:1000])

        last_error = None
        for attempt in range(self.max_retries):
            with self._lock:
                self.calls += 1
            try:
                response = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError, requests.RequestException) as e:
                last_error = e
                if attempt < self.max_retries - 1:
                    logger.debug("Request failed (attempt %d/%d): %s", attempt + 1, self.max_retries, e)
                    time.sleep(self.backoff * 2 ** attempt)
                    continue
                if isinstance(e, requests.Timeout):
                    raise EndpointError("Request timed out. Check the endpoint and enhance.timeout.")
                if isinstance(e, requests.ConnectionError):
                    raise EndpointError(f"Connection to {self.endpoint} failed. Check enhance.endpoint.")
                raise EndpointError(f"Request failed: {e}")

            logger.debug("Response status: %s", response.status_code)
            logger.debug("Response text: %s", self._sanitize_debug_text(response.text[:500]))

            if response.status_code in (401, 403):
                raise EndpointError(f"HTTP {response.status_code} - Access denied. Check the token in "
                                    f"the environment variable named by enhance.token_env.")
            if response.status_code == 429 or response.status_code >= 500:
                last_error = EndpointError(f"HTTP {response.status_code} from endpoint")
                if attempt < self.max_retries - 1:
                    delay = self.backoff * 2 ** attempt
                    logger.debug("HTTP %s, retrying in %.1fs", response.status_code, delay)
                    time.sleep(delay)
                    continue
                raise last_error
            if response.status_code >= 400:
                try:
                    error_msg = response.json().get("error", {}).get("message") or f"HTTP {response.status_code}"
                except (ValueError, AttributeError):
                    error_msg = f"HTTP {response.status_code}: {response.text[:100]}"
                raise EndpointError(self._sanitize_debug_text(str(error_msg)))

            try:
                data = response.json()
            except ValueError:
                raise EndpointError("Invalid JSON response from endpoint")
            return self._extract_text(data)

        raise EndpointError(f"Request failed after {self.max_retries} attempts: {last_error}")


class MockMllmClient:
    """Deterministic offline client

    mode "echo" returns the instruction prompt (the last text part). Canned
    responses map a step name (or "default") to a reply, or to a list of
    replies consumed in order with the last one repeating. Steps listed in
    fail_steps raise EndpointError.
    """

    def __init__(self, mode: str = "echo", responses: Optional[Dict[str, Union[str, List[str]]]] = None,
                 fail_steps: Sequence[str] = (), model_id: str = "mock-mllm",
                 temperature: float = 0.0, max_tokens: int = 512):
        self.mode = mode
        self.responses = {k: (list(v) if isinstance(v, list) else [v]) for k, v in (responses or {}).items()}
        self.fail_steps = {s.upper() for s in fail_steps}
        self.model_id = model_id
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.calls = 0
        self.requests: List[MllmRequest] = []
        self._cursor: Dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_fixture(cls, path: Union[str, Path], **kwargs) -> "MockMllmClient":
        """Load canned responses from a JSON object {step or 'default': reply}"""
        try:
            responses = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise EndpointError(f"cannot read mock fixture {path}: {e}")
        if not isinstance(responses, dict):
            raise EndpointError(f"mock fixture {path} must be a JSON object")
        return cls(mode="fixture", responses=responses, **kwargs)

    def generate(self, parts: Sequence[ContentPart], step: Optional[str] = None) -> str:
        request = MllmRequest(step, tuple(parts))
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            if step and step.upper() in self.fail_steps:
                raise EndpointError(f"mock endpoint failure for step {step}")
            key = step if step in self.responses else "default"
            if key in self.responses:
                replies = self.responses[key]
                i = self._cursor.get(key, 0)
                self._cursor[key] = i + 1
                return replies[min(i, len(replies) - 1)]
        return request.prompt
