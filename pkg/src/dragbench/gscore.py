"""Perceptual-quality scoring of edits through a multimodal model behind an HTTP endpoint.

The client posts ``{"model", "prompt", "images": [original, edited]}`` as JSON,
with images as base64 PNG, and reads the reply text from a ``"text"`` field
(falling back to the raw body). The score is the first number in the reply
that lies in [0, 10]. Pass an ``httpx.MockTransport`` to run without network.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import httpx
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
TRANSIENT_STATUS = frozenset({408, 429, 500, 502, 503, 504})
_NUMBER = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?")


class GscoreError(RuntimeError):
    pass


class GscoreNetworkError(GscoreError):
    """Transport failure or transient status that survived every retry."""


class GscoreAuthError(GscoreError):
    pass


class GscoreHTTPError(GscoreError):
    """Non-transient, non-auth HTTP failure."""


class GscoreParseError(GscoreError):
    pass


def load_prompt(version: str = PROMPT_VERSION) -> str:
    return resources.files("dragbench").joinpath(f"data/gscore_prompt_{version}.txt").read_text()


def encode_png(image: np.ndarray) -> str:
    """Base64 PNG of an (H, W) or (1, H, W) array with values in [0, 1]."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("only single-channel images are supported")
        a = a[0]
    img = Image.fromarray(np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _check_decodable(b64: str, what: str) -> None:
    try:
        with Image.open(io.BytesIO(base64.b64decode(b64, validate=True))) as im:
            im.verify()
    except Exception as exc:
        raise ValueError(f"{what} image is not a decodable base64 image: {exc}") from None


@dataclass(frozen=True)
class GscoreRequest:
    original: str
    edited: str
    prompt: str = field(default_factory=load_prompt)

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        _check_decodable(self.original, "original")
        _check_decodable(self.edited, "edited")

    @classmethod
    def from_arrays(cls, original: np.ndarray, edited: np.ndarray, prompt: str | None = None) -> GscoreRequest:
        return cls(encode_png(original), encode_png(edited), prompt if prompt is not None else load_prompt())


@dataclass(frozen=True)
class GscoreResult:
    score: float
    raw_response: str
    model_id: str


@dataclass(frozen=True)
class EndpointConfig:
    endpoint: str
    api_key: str | None = None
    model: str = "default"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    max_concurrency: int = 4

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> EndpointConfig:
        """Read a JSON config file (optional) then apply GSCORE_* environment overrides."""
        env = os.environ if env is None else env
        data = {}
        if path is not None:
            data = json.loads(Path(path).read_text())
        for key, var in (("endpoint", "GSCORE_ENDPOINT"), ("api_key", "GSCORE_API_KEY"), ("model", "GSCORE_MODEL")):
            if env.get(var):
                data[key] = env[var]
        if not data.get("endpoint"):
            raise GscoreError("no endpoint configured (set GSCORE_ENDPOINT or pass a config file)")
        return cls(**data)


def parse_score(text: str) -> float:
    for m in _NUMBER.finditer(text):
        v = float(m.group())
        if 0.0 <= v <= 10.0:
            return v
    raise GscoreParseError(f"no number in [0, 10] found in response: {text[:200]!r}")


def _response_text(resp: httpx.Response) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text
    if isinstance(body, dict) and isinstance(body.get("text"), str):
        return body["text"]
    return resp.text


class GscoreClient:
    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._http = httpx.Client(transport=transport, timeout=config.timeout, headers=headers)
        self._limit = threading.Semaphore(max(1, config.max_concurrency))

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def score(self, request: GscoreRequest) -> GscoreResult:
        payload = {"model": self.config.model, "prompt": request.prompt,
                   "images": [request.original, request.edited]}
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                with self._limit:
                    resp = self._http.post(self.config.endpoint, json=payload)
            except httpx.TransportError as exc:
                last = GscoreNetworkError(f"{type(exc).__name__}: {exc}")
                log.info("gscore attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code in (401, 403):
                raise GscoreAuthError(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code in TRANSIENT_STATUS:
                last = GscoreNetworkError(f"transient status {resp.status_code}")
                log.info("gscore attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise GscoreHTTPError(f"status {resp.status_code}: {resp.text[:200]}")
            text = _response_text(resp)
            return GscoreResult(parse_score(text), text, self.config.model)
        raise last

    def score_batch(self, requests: list[GscoreRequest], return_exceptions: bool = False) -> list:
        """Score in parallel (bounded by ``max_concurrency``), preserving input order.

        With ``return_exceptions`` a failed item yields its exception instead
        of aborting the batch.
        """
        def one(req):
            try:
                return self.score(req)
            except GscoreError as exc:
                if return_exceptions:
                    return exc
                raise

        with ThreadPoolExecutor(max_workers=max(1, self.config.max_concurrency)) as pool:
            return list(pool.map(one, requests))


def score(request: GscoreRequest, config: EndpointConfig, transport: httpx.BaseTransport | None = None,
          sleep: Callable[[float], None] = time.sleep) -> GscoreResult:
    with GscoreClient(config, transport, sleep) as client:
        return client.score(request)
