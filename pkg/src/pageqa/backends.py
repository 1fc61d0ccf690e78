"""Clients for the three model services (embedding, rerank, chat) plus offline mocks.

HTTP clients speak the common open inference API shape:

    POST {base_url}/embeddings        {"model", "input": [...]}
    POST {base_url}/rerank            {"model", "query", "documents": [...]}
    POST {base_url}/chat/completions  {"model", "messages", "temperature", ...}

The mock implementations are pure functions of their inputs and seed/script,
so full pipeline runs are reproducible byte-for-byte without any network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from . import errors
from .corpus import char_ngrams, word_tokens

logger = logging.getLogger(__name__)

DEFAULT_MOCK_DIMENSION = 64
DEFAULT_MOCK_SEED = 0


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one HTTP backend."""

    base_url: str
    model_name: str
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    retry_backoff: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise errors.ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise errors.ConfigError("max_retries must be >= 0")


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0
    max_tokens: int = 256
    want_option_scores: bool = True


@dataclass
class ChatResponse:
    text: str
    option_scores: dict[str, float] | None = None
    latency: float = 0.0


# -- HTTP plumbing ----------------------------------------------------------


class _HttpBackend:
    def __init__(self, config: BackendConfig):
        self.config = config
        self._session = requests.Session()
        self._gate = threading.Semaphore(config.max_in_flight)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def _post(self, endpoint: str, payload: dict) -> dict:
        """POST with bounded retries and exponential backoff.

        Retries transport failures, timeouts, 429 and 5xx. Other HTTP errors
        surface immediately as BackendError. Error messages never include
        the api key.
        """
        url = self.config.base_url.rstrip("/") + endpoint
        cfg = self.config
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.retry_backoff * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    response = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=cfg.timeout
                    )
            except requests.Timeout as exc:
                last = errors.TimeoutError(f"request to {url} timed out after {cfg.timeout}s")
                logger.warning("timeout talking to %s (attempt %d): %s", url, attempt + 1, exc)
                continue
            except requests.RequestException as exc:
                last = errors.TransportError(f"request to {url} failed: {exc.__class__.__name__}")
                logger.warning("transport error for %s (attempt %d)", url, attempt + 1)
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last = errors.TransportError(f"{url} answered HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise errors.BackendError(
                    f"{url} answered HTTP {response.status_code}: {response.text[:300]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise errors.BackendError(f"{url} returned non-JSON body") from exc
        assert last is not None
        raise last


class HttpEmbeddingBackend(_HttpBackend):
    """OpenAI-compatible /embeddings client."""

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        _check_embed_inputs(texts)
        data = self._post(
            "/embeddings", {"model": self.config.model_name, "input": list(texts)}
        )
        try:
            rows = sorted(data["data"], key=lambda item: item.get("index", 0))
            vectors = [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (KeyError, TypeError) as exc:
            raise errors.BackendError("malformed embeddings response") from exc
        if len(vectors) != len(texts):
            raise errors.LengthMismatch(
                f"asked for {len(texts)} embeddings, got {len(vectors)}"
            )
        dims = {v.shape[0] for v in vectors}
        if len(dims) > 1:
            raise errors.DimensionMismatch(f"mixed dimensions in response: {sorted(dims)}")
        if any(not np.all(np.isfinite(v)) for v in vectors):
            raise errors.BackendError("non-finite values in embeddings response")
        return vectors


class HttpRerankBackend(_HttpBackend):
    """Cross-encoder /rerank client; returns one score per candidate, input order."""

    def rerank(self, query: str, candidates: list[str]) -> list[float]:
        _check_rerank_inputs(candidates)
        data = self._post(
            "/rerank",
            {"model": self.config.model_name, "query": query, "documents": list(candidates)},
        )
        try:
            scores = [0.0] * len(candidates)
            seen = 0
            for item in data["results"]:
                scores[int(item["index"])] = float(item["relevance_score"])
                seen += 1
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise errors.BackendError("malformed rerank response") from exc
        if seen != len(candidates):
            raise errors.LengthMismatch(
                f"asked for {len(candidates)} scores, got {seen}"
            )
        if any(not math.isfinite(s) for s in scores):
            raise errors.BackendError("non-finite rerank score")
        return scores


class HttpChatBackend(_HttpBackend):
    """OpenAI-compatible /chat/completions client."""

    def chat(self, system_prompt: str, user_prompt: str, decode: DecodeConfig) -> ChatResponse:
        _check_chat_inputs(system_prompt, user_prompt)
        payload = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "temperature": decode.temperature,
            "max_tokens": decode.max_tokens,
        }
        if decode.want_option_scores:
            payload["logprobs"] = True
            payload["top_logprobs"] = 8
        started = time.monotonic()
        data = self._post("/chat/completions", payload)
        latency = time.monotonic() - started
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise errors.BackendError("malformed chat response") from exc
        option_scores = _extract_option_scores(choice) if decode.want_option_scores else None
        return ChatResponse(text=text, option_scores=option_scores, latency=latency)


def _extract_option_scores(choice: dict) -> dict[str, float] | None:
    """Pull per-letter log-scores from an OpenAI-style logprobs block, if any."""
    try:
        content = choice["logprobs"]["content"]
        top = content[0]["top_logprobs"]
    except (KeyError, IndexError, TypeError):
        return None
    scores: dict[str, float] = {}
    for item in top:
        token = str(item.get("token", "")).strip().strip(").:")
        if len(token) == 1 and token.isalpha() and token.upper() == token:
            value = float(item["logprob"])
            if math.isfinite(value):
                scores.setdefault(token, value)
    return scores or None


# -- input contracts shared by real and mock backends ------------------------


def _check_embed_inputs(texts) -> None:
    if not texts:
        raise ValueError("embed() requires a nonempty list of texts")
    if any(not t.strip() for t in texts):
        raise ValueError("embed() texts must be nonempty after trimming")


def _check_rerank_inputs(candidates) -> None:
    if not candidates:
        raise ValueError("rerank() requires a nonempty candidate list")


def _check_chat_inputs(system_prompt, user_prompt) -> None:
    if not system_prompt or not user_prompt:
        raise ValueError("chat() prompts must be nonempty")


# -- mocks ------------------------------------------------------------------


def mock_embed_vector(
    text: str,
    dimension: int = DEFAULT_MOCK_DIMENSION,
    seed: int = DEFAULT_MOCK_SEED,
) -> np.ndarray:
    """Deterministic bag-of-ngrams random projection, L2-normalized.

    Each char 3-gram of the text hashes (with the seed) to a +-1 pattern over
    the dimensions; patterns are scaled by the n-gram count and summed, so
    texts sharing more n-grams land closer in cosine. Empty text maps to the
    zero vector.
    """
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    vec = np.zeros(dimension, dtype=np.float64)
    n_bytes = (dimension + 7) // 8
    for gram, count in char_ngrams(text, (3, 3)).items():
        digest = hashlib.blake2b(
            gram.encode("utf-8"), digest_size=n_bytes, key=str(seed).encode("utf-8")
        ).digest()
        bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))[:dimension]
        vec += count * (bits.astype(np.float64) * 2.0 - 1.0)
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


class MockEmbeddingBackend:
    """Offline embed() double built on mock_embed_vector."""

    def __init__(self, dimension: int = DEFAULT_MOCK_DIMENSION, seed: int = DEFAULT_MOCK_SEED):
        self.dimension = dimension
        self.seed = seed

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        _check_embed_inputs(texts)
        return [mock_embed_vector(t, self.dimension, self.seed) for t in texts]


class TokenOverlapReranker:
    """Scores a candidate as |query tokens ∩ candidate tokens| / |query tokens|."""

    def rerank(self, query: str, candidates: list[str]) -> list[float]:
        _check_rerank_inputs(candidates)
        query_tokens = set(word_tokens(query, (1, 1)))
        if not query_tokens:
            return [0.0] * len(candidates)
        scores = []
        for candidate in candidates:
            overlap = query_tokens & set(word_tokens(candidate, (1, 1)))
            scores.append(len(overlap) / len(query_tokens))
        return scores


class MappingReranker:
    """Scripted reranker: looks candidate texts up in a fixed score table."""

    def __init__(self, scores: dict[str, float], default: float = 0.0):
        self.scores = dict(scores)
        self.default = default

    def rerank(self, query: str, candidates: list[str]) -> list[float]:
        _check_rerank_inputs(candidates)
        return [self.scores.get(c, self.default) for c in candidates]


@dataclass
class ScriptedReply:
    text: str
    option_scores: dict[str, float] | None = None
    delay: float = 0.0


@dataclass
class ScriptRule:
    """Matches when `match` is a substring of the user prompt (and
    `system_match`, if set, a substring of the system prompt). Successive
    matching calls consume `replies` in order; the last reply repeats."""

    match: str
    replies: list[ScriptedReply]
    system_match: str | None = None
    calls: int = field(default=0, init=False)


class ScriptedChatBackend:
    """Deterministic chat double driven by substring-matching rules.

    Given the same sequence of calls per rule, outputs are identical across
    runs; rule state is guarded by a lock so concurrent questions stay
    deterministic as long as they match distinct rules.
    """

    def __init__(
        self,
        rules: list[ScriptRule] | None = None,
        default: ScriptedReply | None = None,
        timeout: float | None = None,
    ):
        self.rules = list(rules or [])
        self.default = default or ScriptedReply(text="")
        self.timeout = timeout
        self.call_count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_json(cls, path, timeout: float | None = None) -> "ScriptedChatBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            ScriptRule(
                match=rule["match"],
                system_match=rule.get("system_match"),
                replies=[
                    ScriptedReply(
                        text=reply["text"],
                        option_scores=reply.get("option_scores"),
                        delay=float(reply.get("delay", 0.0)),
                    )
                    for reply in rule["responses"]
                ],
            )
            for rule in data["rules"]
        ]
        default = None
        if data.get("default"):
            default = ScriptedReply(
                text=data["default"]["text"],
                option_scores=data["default"].get("option_scores"),
            )
        return cls(rules, default=default, timeout=timeout)

    def _next_reply(self, system_prompt: str, user_prompt: str) -> ScriptedReply:
        with self._lock:
            self.call_count += 1
            for rule in self.rules:
                if rule.match not in user_prompt:
                    continue
                if rule.system_match and rule.system_match not in system_prompt:
                    continue
                reply = rule.replies[min(rule.calls, len(rule.replies) - 1)]
                rule.calls += 1
                return reply
            return self.default

    def chat(self, system_prompt: str, user_prompt: str, decode: DecodeConfig) -> ChatResponse:
        _check_chat_inputs(system_prompt, user_prompt)
        reply = self._next_reply(system_prompt, user_prompt)
        if reply.delay:
            if self.timeout is not None and reply.delay > self.timeout:
                raise errors.TimeoutError(
                    f"scripted delay {reply.delay}s exceeds timeout {self.timeout}s"
                )
            time.sleep(reply.delay)
        scores = dict(reply.option_scores) if reply.option_scores else None
        return ChatResponse(text=reply.text, option_scores=scores, latency=reply.delay)


class EchoChatBackend:
    """Returns the user prompt verbatim; handy for identity-rephrase tests."""

    def chat(self, system_prompt: str, user_prompt: str, decode: DecodeConfig) -> ChatResponse:
        _check_chat_inputs(system_prompt, user_prompt)
        return ChatResponse(text=user_prompt)
