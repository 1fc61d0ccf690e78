"""Engine configuration: one YAML document capturing every knob of a run.

Relative paths inside the file resolve against the config file's directory,
so runs reproduce regardless of the working directory. For ``http``
backends, the environment variables ENGINE_EMBED_URL, ENGINE_RERANK_URL,
ENGINE_CHAT_URL and ENGINE_API_KEY override the file values; mock backends
ignore them so offline fixtures stay deterministic.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import backends
from .agent import AgentConfig
from .dense import CascadeConfig
from .errors import ConfigError
from .evaluation import ProximityConfig
from .sparse import SparseConfig

ENV_URLS = {
    "embed": "ENGINE_EMBED_URL",
    "rerank": "ENGINE_RERANK_URL",
    "chat": "ENGINE_CHAT_URL",
}
ENV_API_KEY = "ENGINE_API_KEY"


@dataclass
class RetrievalSettings:
    first_stage: str = "sparse"
    variant: str = "char"
    word_ngrams: tuple[int, int] = (1, 2)
    char_ngrams: tuple[int, int] = (3, 5)
    hybrid_weight: float = 0.5
    first_stage_k: int = 50
    rerank_k: int = 10
    context_pages: int = 3
    rerank_char_budget: int = 4000
    use_reranker: bool = True

    def sparse_config(self) -> SparseConfig:
        return SparseConfig(
            word_ngrams=tuple(self.word_ngrams),
            char_ngrams=tuple(self.char_ngrams),
            hybrid_weight=self.hybrid_weight,
        )

    def cascade_config(self) -> CascadeConfig:
        return CascadeConfig(
            first_stage=self.first_stage,
            first_stage_k=self.first_stage_k,
            rerank_k=self.rerank_k,
            context_pages=self.context_pages,
            rerank_char_budget=self.rerank_char_budget,
        )


@dataclass
class BackendSettings:
    kind: str = "mock"
    base_url: str = ""
    model_name: str = ""
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    dimension: int = backends.DEFAULT_MOCK_DIMENSION
    seed: int | None = None
    script: str | None = None

    def http_config(self) -> backends.BackendConfig:
        if not self.base_url:
            raise ConfigError("http backend needs a base_url (config or environment)")
        return backends.BackendConfig(
            base_url=self.base_url,
            model_name=self.model_name,
            api_key=self.api_key,
            timeout=self.timeout,
            max_retries=self.max_retries,
        )


@dataclass
class QaSettings:
    templates: str = "default"
    n_context: int = 3
    enable_similarity_fallback: bool = True
    confidence_source: str = "auto"
    self_consistency_samples: int = 3
    self_consistency_temperature: float = 0.7
    max_tokens: int = 256
    temperature: float = 0.0


@dataclass
class EngineConfig:
    corpus: str = ""
    questions: str = ""
    output_dir: str = "out"
    seed: int = 0
    allow_empty_pages: bool = False
    workers: int = 1
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    backends: dict = field(default_factory=dict)
    qa: QaSettings = field(default_factory=QaSettings)
    agent: AgentConfig = field(default_factory=AgentConfig)
    proximity: ProximityConfig = field(default_factory=ProximityConfig)

    def backend_settings(self, role: str) -> BackendSettings:
        return self.backends.get(role, BackendSettings())


def _build(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {context}: {exc}") from exc


def load_config(path, validate_paths: bool = True) -> EngineConfig:
    """Parse a YAML config file and apply environment overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")

    top_keys = {f.name for f in dataclasses.fields(EngineConfig)}
    unknown = set(data) - top_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    backend_data = data.pop("backends", {}) or {}
    if not isinstance(backend_data, dict):
        raise ConfigError("backends must be a mapping of role -> settings")
    unknown_roles = set(backend_data) - set(ENV_URLS)
    if unknown_roles:
        raise ConfigError(f"unknown backend roles: {sorted(unknown_roles)}")
    backend_settings = {
        role: _build(BackendSettings, raw or {}, f"backends.{role}")
        for role, raw in backend_data.items()
    }

    config = EngineConfig(
        retrieval=_build(RetrievalSettings, data.pop("retrieval", {}) or {}, "retrieval"),
        qa=_build(QaSettings, data.pop("qa", {}) or {}, "qa"),
        agent=_build(AgentConfig, data.pop("agent", {}) or {}, "agent"),
        proximity=_build(ProximityConfig, data.pop("proximity", {}) or {}, "proximity"),
        backends=backend_settings,
        **data,
    )

    base = path.parent
    config.corpus = str((base / config.corpus).resolve()) if config.corpus else ""
    config.questions = str((base / config.questions).resolve()) if config.questions else ""
    if not Path(config.output_dir).is_absolute():
        config.output_dir = str((base / config.output_dir).resolve())
    for settings in config.backends.values():
        if settings.script:
            settings.script = str((base / settings.script).resolve())
    if config.qa.templates not in ("", "default"):
        config.qa.templates = str((base / config.qa.templates).resolve())

    _apply_env_overrides(config)

    if validate_paths:
        if not config.corpus or not Path(config.corpus).is_file():
            raise ConfigError(f"corpus file not found: {config.corpus or '(unset)'}")
        if not config.questions or not Path(config.questions).is_file():
            raise ConfigError(f"questions file not found: {config.questions or '(unset)'}")
        for role, settings in config.backends.items():
            if settings.kind == "scripted" and settings.script:
                if not Path(settings.script).is_file():
                    raise ConfigError(f"{role} script not found: {settings.script}")
    return config


def _apply_env_overrides(config: EngineConfig) -> None:
    for role, env_name in ENV_URLS.items():
        url = os.environ.get(env_name)
        if url and role in config.backends and config.backends[role].kind == "http":
            config.backends[role].base_url = url
    api_key = os.environ.get(ENV_API_KEY)
    if api_key:
        for settings in config.backends.values():
            if settings.kind == "http" and settings.api_key is None:
                settings.api_key = api_key


# -- backend factories --------------------------------------------------------


def make_embed_backend(config: EngineConfig):
    settings = config.backend_settings("embed")
    if settings.kind == "mock":
        seed = settings.seed if settings.seed is not None else config.seed
        return backends.MockEmbeddingBackend(dimension=settings.dimension, seed=seed)
    if settings.kind == "http":
        return backends.HttpEmbeddingBackend(settings.http_config())
    raise ConfigError(f"unknown embed backend kind {settings.kind!r}")


def make_rerank_backend(config: EngineConfig):
    settings = config.backend_settings("rerank")
    if settings.kind in ("mock", "token_overlap"):
        return backends.TokenOverlapReranker()
    if settings.kind == "http":
        return backends.HttpRerankBackend(settings.http_config())
    raise ConfigError(f"unknown rerank backend kind {settings.kind!r}")


def make_chat_backend(config: EngineConfig):
    settings = config.backend_settings("chat")
    if settings.kind == "scripted":
        if not settings.script:
            raise ConfigError("scripted chat backend needs a script path")
        return backends.ScriptedChatBackend.from_json(settings.script, timeout=settings.timeout)
    if settings.kind == "http":
        return backends.HttpChatBackend(settings.http_config())
    raise ConfigError(f"unknown chat backend kind {settings.kind!r}")
