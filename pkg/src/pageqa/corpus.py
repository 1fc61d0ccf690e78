"""Page-level corpus and question loading, plus the tokenizers used by sparse retrieval.

Corpus files are UTF-8 JSONL with fields ``doc_id`` (string), ``page``
(integer >= 1) and ``text`` (string). Question files are JSONL with
``question_id``, ``question``, ``options`` (list of option texts, labeled
implicitly A, B, C, ... , or a list of ``{"label", "text"}`` objects) and an
optional ``gold`` object ``{"answer", "doc_id", "page"}``.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    BadOptionLabels,
    DuplicatePage,
    DuplicateQuestionId,
    EmptyCorpus,
    ParseError,
)

# Letters and digits, any script; underscore excluded on purpose.
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

# Padding codepoint added on both sides of each token before char n-grams.
BOUNDARY_MARKER = "_"

OPTION_LABELS = string.ascii_uppercase


@dataclass(frozen=True)
class Page:
    doc_id: str
    page_number: int
    text: str

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.page_number)


@dataclass(frozen=True)
class GoldLabel:
    answer: str
    doc_id: str
    page_number: int


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str
    options: tuple[tuple[str, str], ...]
    gold: GoldLabel | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def option_text(self, label: str) -> str:
        for lab, text in self.options:
            if lab == label:
                return text
        raise KeyError(label)


class Corpus:
    """Immutable collection of pages, iterated in (doc_id, page_number) order."""

    def __init__(self, pages):
        seen: set[tuple[str, int]] = set()
        for page in pages:
            if page.key in seen:
                raise DuplicatePage(f"duplicate page {page.key}")
            seen.add(page.key)
        self._pages = tuple(sorted(pages, key=lambda p: p.key))
        self._by_key = {p.key: p for p in self._pages}
        doc_index: dict[str, set[int]] = {}
        for page in self._pages:
            doc_index.setdefault(page.doc_id, set()).add(page.page_number)
        self._doc_index = doc_index

    @property
    def pages(self) -> tuple[Page, ...]:
        return self._pages

    @property
    def doc_index(self) -> dict[str, set[int]]:
        return {doc: set(nums) for doc, nums in self._doc_index.items()}

    def __len__(self) -> int:
        return len(self._pages)

    def __iter__(self):
        return iter(self._pages)

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self._pages == other._pages

    def get(self, doc_id: str, page_number: int) -> Page | None:
        return self._by_key.get((doc_id, page_number))

    def keys(self) -> tuple[tuple[str, int], ...]:
        return tuple(p.key for p in self._pages)


def _parse_line(raw: str, path, lineno: int) -> dict:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, lineno) from exc
    if not isinstance(record, dict):
        raise ParseError("record is not an object", path, lineno)
    return record


def load_corpus(path, allow_empty_pages: bool = False) -> Corpus:
    """Load and validate a JSONL page corpus.

    Raises ParseError on malformed lines, DuplicatePage on repeated
    (doc_id, page) keys, and EmptyCorpus when the file holds no pages.
    """
    path = Path(path)
    pages: list[Page] = []
    seen: set[tuple[str, int]] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            record = _parse_line(raw, path, lineno)
            try:
                doc_id = record["doc_id"]
                page_number = record["page"]
                text = record["text"]
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", path, lineno) from exc
            if not isinstance(doc_id, str) or not doc_id:
                raise ParseError("doc_id must be a nonempty string", path, lineno)
            if not isinstance(page_number, int) or isinstance(page_number, bool) or page_number < 1:
                raise ParseError("page must be an integer >= 1", path, lineno)
            if not isinstance(text, str):
                raise ParseError("text must be a string", path, lineno)
            if not text and not allow_empty_pages:
                raise ParseError("empty page text (allow_empty_pages is off)", path, lineno)
            key = (doc_id, page_number)
            if key in seen:
                raise DuplicatePage(f"duplicate page {key} at {path}:{lineno}")
            seen.add(key)
            pages.append(Page(doc_id, page_number, text))
    if not pages:
        raise EmptyCorpus(f"no pages in {path}")
    return Corpus(pages)


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus back to JSONL; load(save(c)) == c."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for page in corpus:
            record = {"doc_id": page.doc_id, "page": page.page_number, "text": page.text}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def _parse_options(raw_options, path, lineno) -> tuple[tuple[str, str], ...]:
    if not isinstance(raw_options, list) or len(raw_options) < 2:
        raise BadOptionLabels(f"need at least 2 options ({path}:{lineno})")
    if len(raw_options) > len(OPTION_LABELS):
        raise BadOptionLabels(f"more than {len(OPTION_LABELS)} options ({path}:{lineno})")
    options: list[tuple[str, str]] = []
    for i, item in enumerate(raw_options):
        if isinstance(item, str):
            options.append((OPTION_LABELS[i], item))
        elif isinstance(item, dict) and "label" in item and "text" in item:
            options.append((str(item["label"]), str(item["text"])))
        else:
            raise ParseError(f"option {i} must be a string or a label/text object", path, lineno)
    labels = [label for label, _ in options]
    expected = list(OPTION_LABELS[: len(labels)])
    if labels != expected:
        raise BadOptionLabels(
            f"option labels {labels} are not consecutive from A ({path}:{lineno})"
        )
    return tuple(options)


def load_questions(path) -> list[Question]:
    """Load multiple-choice questions in file order, validating labels and ids."""
    path = Path(path)
    questions: list[Question] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            record = _parse_line(raw, path, lineno)
            try:
                qid = record["question_id"]
                text = record["question"]
                raw_options = record["options"]
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", path, lineno) from exc
            if not isinstance(qid, str) or not qid:
                raise ParseError("question_id must be a nonempty string", path, lineno)
            if qid in seen_ids:
                raise DuplicateQuestionId(f"duplicate question_id {qid!r} at {path}:{lineno}")
            seen_ids.add(qid)
            if not isinstance(text, str) or not text:
                raise ParseError("question must be a nonempty string", path, lineno)
            options = _parse_options(raw_options, path, lineno)
            gold = None
            if record.get("gold") is not None:
                g = record["gold"]
                if not isinstance(g, dict):
                    raise ParseError("gold must be an object", path, lineno)
                try:
                    gold = GoldLabel(str(g["answer"]), str(g["doc_id"]), int(g["page"]))
                except KeyError as exc:
                    raise ParseError(
                        f"gold missing field {exc.args[0]!r}", path, lineno
                    ) from exc
                if gold.answer not in [label for label, _ in options]:
                    raise BadOptionLabels(
                        f"gold answer {gold.answer!r} not among option labels ({path}:{lineno})"
                    )
            questions.append(Question(qid, text, options, gold))
    return questions


def word_tokens(text: str, ngram_range: tuple[int, int] = (1, 1)) -> Counter:
    """Lowercased word n-grams, joined with single spaces.

    Words are maximal runs of Unicode letters/digits; casefolding handles
    Cyrillic correctly. Returns a multiset (Counter) of n-gram strings.
    """
    lo, hi = ngram_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad ngram_range {ngram_range}")
    words = _WORD_RE.findall(text.casefold())
    grams: Counter = Counter()
    for n in range(lo, hi + 1):
        for i in range(len(words) - n + 1):
            grams[" ".join(words[i : i + n])] += 1
    return grams


def char_ngrams(
    text: str,
    ngram_range: tuple[int, int] = (3, 3),
    marker: str = BOUNDARY_MARKER,
) -> Counter:
    """Character n-grams over each whitespace token, padded with a boundary marker.

    Each token of the casefolded text gets one marker codepoint prepended and
    appended, so n-grams capture prefixes and suffixes ("_кі", "іт_").
    """
    lo, hi = ngram_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad ngram_range {ngram_range}")
    grams: Counter = Counter()
    for token in text.casefold().split():
        padded = marker + token + marker
        for n in range(lo, hi + 1):
            for i in range(len(padded) - n + 1):
                grams[padded[i : i + n]] += 1
    return grams
