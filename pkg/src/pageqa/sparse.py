"""TF-IDF retrieval over pages: word, char, and late-fusion hybrid variants.

Weighting is pinned so results are exactly reproducible:

    tf  = 1 + ln(count)
    idf = ln((1 + N) / (1 + df)) + 1
    w   = tf * idf, vectors L2-normalized

Queries use the same weighting with the index idf; unseen terms are ignored.
The hybrid variant keeps independent word and char sub-indices and fuses
their cosines at query time: ``w * word + (1 - w) * char``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from .corpus import Corpus, char_ngrams, word_tokens
from .errors import EmptyCorpus, ParseError

INDEX_FORMAT_VERSION = 1

VARIANTS = ("word", "char", "hybrid")


@dataclass(frozen=True)
class SparseConfig:
    word_ngrams: tuple[int, int] = (1, 2)
    char_ngrams: tuple[int, int] = (3, 5)
    hybrid_weight: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.hybrid_weight <= 1.0:
            raise ValueError(f"hybrid_weight must lie in [0,1], got {self.hybrid_weight}")


class ScoredPage(NamedTuple):
    doc_id: str
    page_number: int
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked pages, descending score, ties by (doc_id, page_number) ascending."""

    entries: tuple[ScoredPage, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def top(self) -> ScoredPage:
        if not self.entries:
            raise IndexError("empty retrieval result")
        return self.entries[0]

    def keys(self) -> tuple[tuple[str, int], ...]:
        return tuple((e.doc_id, e.page_number) for e in self.entries)


def rank_scores(keys, scores, k: int) -> RetrievalResult:
    """Top-k by descending score; ties broken by ascending (doc_id, page)."""
    order = sorted(range(len(keys)), key=lambda i: (-scores[i], keys[i][0], keys[i][1]))
    entries = tuple(
        ScoredPage(keys[i][0], keys[i][1], float(scores[i])) for i in order[: max(k, 0)]
    )
    return RetrievalResult(entries)


class _SubIndex:
    """One analyzer space: vocabulary, idf, normalized page vectors, postings."""

    __slots__ = ("vocabulary", "idf", "vectors", "postings")

    def __init__(self, vocabulary, idf, vectors):
        self.vocabulary = vocabulary
        self.idf = idf
        self.vectors = vectors
        postings: dict[int, list[tuple[int, float]]] = {}
        for page_idx, vec in enumerate(vectors):
            for tid, weight in vec.items():
                postings.setdefault(tid, []).append((page_idx, weight))
        self.postings = postings

    @classmethod
    def build(cls, page_counters: list[Counter]) -> "_SubIndex":
        n_pages = len(page_counters)
        df: Counter = Counter()
        for counter in page_counters:
            df.update(counter.keys())
        vocabulary = {term: tid for tid, term in enumerate(sorted(df))}
        idf = [0.0] * len(vocabulary)
        for term, tid in vocabulary.items():
            idf[tid] = math.log((1 + n_pages) / (1 + df[term])) + 1.0
        vectors = [cls._vectorize(counter, vocabulary, idf) for counter in page_counters]
        return cls(vocabulary, idf, vectors)

    @staticmethod
    def _vectorize(counter: Counter, vocabulary, idf) -> dict[int, float]:
        # Accumulate the norm in ascending term-id order so scores are
        # bit-reproducible against a naive reimplementation of the formulas.
        items = sorted(
            (vocabulary[t], c) for t, c in counter.items() if t in vocabulary
        )
        weights = [(tid, (1.0 + math.log(c)) * idf[tid]) for tid, c in items]
        norm_sq = 0.0
        for _, w in weights:
            norm_sq += w * w
        if norm_sq == 0.0:
            return {}
        norm = math.sqrt(norm_sq)
        return {tid: w / norm for tid, w in weights}

    def vectorize(self, counter: Counter) -> dict[int, float]:
        return self._vectorize(counter, self.vocabulary, self.idf)

    def scores(self, query_counter: Counter, n_pages: int) -> list[float]:
        qvec = self.vectorize(query_counter)
        scores = [0.0] * n_pages
        for tid in sorted(qvec):
            qw = qvec[tid]
            for page_idx, weight in self.postings.get(tid, ()):
                scores[page_idx] += qw * weight
        return scores

    def to_dict(self) -> dict:
        return {
            "vocabulary": {t: tid for t, tid in sorted(self.vocabulary.items())},
            "idf": self.idf,
            "vectors": [
                [[tid, w] for tid, w in sorted(vec.items())] for vec in self.vectors
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "_SubIndex":
        vectors = [{int(tid): float(w) for tid, w in vec} for vec in data["vectors"]]
        return cls(dict(data["vocabulary"]), [float(x) for x in data["idf"]], vectors)


class TfidfIndex:
    """Sparse page index in one of the three variants."""

    def __init__(self, variant: str, keys, config: SparseConfig, word=None, char=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.keys = list(keys)
        self.config = config
        self._word = word
        self._char = char

    def _counters(self, text: str) -> tuple[Counter | None, Counter | None]:
        wc = word_tokens(text, self.config.word_ngrams) if self._word else None
        cc = char_ngrams(text, self.config.char_ngrams) if self._char else None
        return wc, cc

    def _all_scores(self, text: str) -> list[float]:
        n = len(self.keys)
        wc, cc = self._counters(text)
        if self.variant == "word":
            return self._word.scores(wc, n)
        if self.variant == "char":
            return self._char.scores(cc, n)
        hw = self.config.hybrid_weight
        word_scores = self._word.scores(wc, n)
        char_scores = self._char.scores(cc, n)
        return [hw * ws + (1.0 - hw) * cs for ws, cs in zip(word_scores, char_scores)]

    def query(self, text: str, k: int) -> RetrievalResult:
        """Top-k pages by cosine; a query with no known terms scores all pages 0."""
        if k < 1:
            raise ValueError("k must be >= 1")
        return rank_scores(self.keys, self._all_scores(text), k)

    def similarity(self, text_a: str, text_b: str) -> float:
        """Cosine between two arbitrary texts in this index's weighting space."""

        def sub_cosine(sub: _SubIndex, ca: Counter, cb: Counter) -> float:
            va, vb = sub.vectorize(ca), sub.vectorize(cb)
            if len(vb) < len(va):
                va, vb = vb, va
            return sum(w * vb.get(tid, 0.0) for tid, w in sorted(va.items()))

        wa, ca = self._counters(text_a)
        wb, cb = self._counters(text_b)
        if self.variant == "word":
            return sub_cosine(self._word, wa, wb)
        if self.variant == "char":
            return sub_cosine(self._char, ca, cb)
        hw = self.config.hybrid_weight
        return hw * sub_cosine(self._word, wa, wb) + (1.0 - hw) * sub_cosine(
            self._char, ca, cb
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        data = {
            "format_version": INDEX_FORMAT_VERSION,
            "kind": "tfidf_index",
            "variant": self.variant,
            "config": {
                "word_ngrams": list(self.config.word_ngrams),
                "char_ngrams": list(self.config.char_ngrams),
                "hybrid_weight": self.config.hybrid_weight,
            },
            "keys": [[doc, page] for doc, page in self.keys],
        }
        if self._word is not None:
            data["word"] = self._word.to_dict()
        if self._char is not None:
            data["char"] = self._char.to_dict()
        return data

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":")),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "TfidfIndex":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("kind") != "tfidf_index":
            raise ParseError("not a tfidf index file", path)
        if data.get("format_version") != INDEX_FORMAT_VERSION:
            raise ParseError(
                f"unsupported index format version {data.get('format_version')!r}", path
            )
        cfg = SparseConfig(
            tuple(data["config"]["word_ngrams"]),
            tuple(data["config"]["char_ngrams"]),
            float(data["config"]["hybrid_weight"]),
        )
        keys = [(doc, int(page)) for doc, page in data["keys"]]
        word = _SubIndex.from_dict(data["word"]) if "word" in data else None
        char = _SubIndex.from_dict(data["char"]) if "char" in data else None
        return cls(data["variant"], keys, cfg, word=word, char=char)


def build_index(corpus: Corpus, variant: str, config: SparseConfig | None = None) -> TfidfIndex:
    """Build a TF-IDF index over all corpus pages."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    config = config or SparseConfig()
    texts = [page.text for page in corpus]
    word = char = None
    if variant in ("word", "hybrid"):
        word = _SubIndex.build([word_tokens(t, config.word_ngrams) for t in texts])
    if variant in ("char", "hybrid"):
        char = _SubIndex.build([char_ngrams(t, config.char_ngrams) for t in texts])
    return TfidfIndex(variant, corpus.keys(), config, word=word, char=char)
