"""Brute-force cosine vector store plus the retrieve-then-rerank cascade.

The store is an exact full-scan index: small shared-task corpora make ANN
structures unnecessary and exactness keeps oracle testing trivial.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, DimensionMismatch, EmptyCorpus, LengthMismatch, ParseError
from .sparse import RetrievalResult, TfidfIndex, rank_scores

logger = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1

DEFAULT_EMBED_BATCH = 64


@dataclass(frozen=True)
class CascadeConfig:
    """Two-stage retrieval settings: stage-1 candidate pool, rerank depth,
    and how many reranked pages feed the prompt."""

    first_stage: str = "sparse"
    first_stage_k: int = 50
    rerank_k: int = 10
    context_pages: int = 3
    rerank_char_budget: int = 4000

    def __post_init__(self):
        if self.first_stage not in ("sparse", "dense"):
            raise ConfigError(f"unknown first stage {self.first_stage!r}")
        if not 1 <= self.rerank_k <= self.first_stage_k:
            raise ConfigError("need 1 <= rerank_k <= first_stage_k")
        if not 1 <= self.context_pages <= self.rerank_k:
            raise ConfigError("need 1 <= context_pages <= rerank_k")
        if self.rerank_char_budget < 1:
            raise ConfigError("rerank_char_budget must be >= 1")


class VectorStore:
    """Page embeddings as rows of an L2-normalized matrix."""

    def __init__(self, keys, matrix: np.ndarray):
        if len(keys) != matrix.shape[0]:
            raise LengthMismatch(f"{len(keys)} keys vs {matrix.shape[0]} vectors")
        self.keys = [tuple(k) for k in keys]
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.dimension = int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.keys)

    def save(self, path) -> None:
        data = {
            "format_version": STORE_FORMAT_VERSION,
            "kind": "vector_store",
            "dimension": self.dimension,
            "keys": [[doc, page] for doc, page in self.keys],
            "vectors": [[float(x) for x in row] for row in self.matrix],
        }
        Path(path).write_text(
            json.dumps(data, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "VectorStore":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("kind") != "vector_store":
            raise ParseError("not a vector store file", path)
        if data.get("format_version") != STORE_FORMAT_VERSION:
            raise ParseError(
                f"unsupported store format version {data.get('format_version')!r}", path
            )
        keys = [(doc, int(page)) for doc, page in data["keys"]]
        matrix = np.asarray(data["vectors"], dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != int(data["dimension"]):
            raise ParseError("vector data does not match declared dimension", path)
        return cls(keys, matrix)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0  # empty pages keep their zero vector
    return matrix / norms


def build_store(corpus: Corpus, embed_backend, batch_size: int = DEFAULT_EMBED_BATCH) -> VectorStore:
    """Embed every page (batched) into a normalized store, keys in corpus order."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot embed an empty corpus")
    keys = list(corpus.keys())
    texts = [page.text for page in corpus]
    vectors: list[np.ndarray | None] = [None] * len(texts)
    pending = [i for i, t in enumerate(texts) if t.strip()]
    dimension: int | None = None
    for start in range(0, len(pending), batch_size):
        batch = pending[start : start + batch_size]
        embedded = embed_backend.embed([texts[i] for i in batch])
        if len(embedded) != len(batch):
            raise LengthMismatch(
                f"backend returned {len(embedded)} vectors for {len(batch)} texts"
            )
        for i, vec in zip(batch, embedded):
            vec = np.asarray(vec, dtype=np.float64)
            if dimension is None:
                dimension = int(vec.shape[0])
            elif vec.shape[0] != dimension:
                raise DimensionMismatch(f"expected dimension {dimension}, got {vec.shape[0]}")
            vectors[i] = vec
    if dimension is None:
        raise EmptyCorpus("corpus holds only empty pages; nothing to embed")
    matrix = np.zeros((len(texts), dimension), dtype=np.float64)
    for i, vec in enumerate(vectors):
        if vec is not None:
            matrix[i] = vec
    return VectorStore(keys, _normalize_rows(matrix))


def dense_query(store: VectorStore, query_text: str, k: int, embed_backend) -> RetrievalResult:
    """Exact top-k cosine over all stored pages."""
    if len(store) == 0:
        raise EmptyCorpus("empty vector store")
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = np.asarray(embed_backend.embed([query_text])[0], dtype=np.float64)
    if qvec.shape[0] != store.dimension:
        raise DimensionMismatch(
            f"query dimension {qvec.shape[0]} vs store dimension {store.dimension}"
        )
    norm = float(np.linalg.norm(qvec))
    if norm > 0.0:
        qvec = qvec / norm
    scores = store.matrix @ qvec
    return rank_scores(store.keys, [float(s) for s in scores], k)


def cascade_retrieve(
    question_text: str,
    config: CascadeConfig,
    corpus: Corpus,
    rerank_backend,
    sparse_index: TfidfIndex | None = None,
    store: VectorStore | None = None,
    embed_backend=None,
) -> RetrievalResult:
    """Stage 1 retrieves a candidate pool; the reranker reorders the head of it.

    Result holds rerank_k entries (fewer on small corpora), ordered by
    reranker score with the standard tie-break; the entry set is always a
    subset of the stage-1 candidates.
    """
    if config.first_stage == "sparse":
        if sparse_index is None:
            raise ConfigError("cascade configured for a sparse first stage but no index given")
        stage1 = sparse_index.query(question_text, config.first_stage_k)
    else:
        if store is None or embed_backend is None:
            raise ConfigError(
                "cascade configured for a dense first stage but store/backend missing"
            )
        stage1 = dense_query(store, question_text, config.first_stage_k, embed_backend)

    head = stage1.entries[: config.rerank_k]
    texts = []
    for entry in head:
        page = corpus.get(entry.doc_id, entry.page_number)
        if page is None:
            raise ConfigError(
                f"stage-1 candidate {(entry.doc_id, entry.page_number)} missing from corpus"
            )
        texts.append(page.text[: config.rerank_char_budget])
    scores = rerank_backend.rerank(question_text, texts)
    if len(scores) != len(texts):
        raise LengthMismatch(f"reranker returned {len(scores)} scores for {len(texts)} texts")
    keys = [(entry.doc_id, entry.page_number) for entry in head]
    return rank_scores(keys, scores, len(keys))
