"""Prompt construction, answer parsing, confidence, and the similarity baseline.

Everything here is a pure function of its inputs apart from the optional
backend calls, so per-question processing can run concurrently.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .backends import DecodeConfig, mock_embed_vector
from .corpus import Corpus, Question
from .errors import MissingPage, NoConfidenceSignal, UnparseableAnswer
from .sparse import RetrievalResult, TfidfIndex

PROMPT_VARIANTS = ("base", "retry_instructions", "rephrased_query")

ANSWER_SOURCES = ("parsed_letter", "similarity_fallback", "baseline")

CONTEXT_HEADER = "[{doc_id}, стор. {page}]"

_PREFIXED_LETTER_RE = re.compile(
    r"(?:відповідь|answer)\s*[:\-–—]?\s*[\(\[«\"']?([A-Za-zА-Яа-я])(?!\w)",
    re.IGNORECASE,
)
_STANDALONE_LETTER_RE = re.compile(r"(?<!\w)([A-Za-z])(?!\w)")

# Models answering in Ukrainian often type visually identical Cyrillic
# letters for the Latin option labels.
_CYR_TO_LAT = str.maketrans("АВСЕНІКМОРТХ", "ABCEHIKMOPTX")


@dataclass(frozen=True)
class AnswerAttempt:
    """One answer for one question: the chosen label and how it was obtained."""

    label: str
    confidence: float
    source: str
    prompt_variant: str
    raw_text: str

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0 or not math.isfinite(self.confidence):
            raise ValueError(f"confidence {self.confidence} outside [0,1]")
        if self.source not in ANSWER_SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    user_prompt: str
    context_pages_used: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class TemplateSet:
    system_qa: str
    user_qa: str
    retry_suffix: str
    system_rephrase: str
    user_rephrase: str


def load_templates(source: str | Path = "default") -> TemplateSet:
    """Load prompt templates from the packaged defaults or a directory."""

    def read(name: str) -> str:
        if source == "default":
            ref = resources.files("pageqa") / "templates" / f"{name}.txt"
            return ref.read_text(encoding="utf-8").rstrip("\n")
        return (Path(source) / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")

    return TemplateSet(
        system_qa=read("system_qa"),
        user_qa=read("user_qa"),
        retry_suffix=read("retry_suffix"),
        system_rephrase=read("system_rephrase"),
        user_rephrase=read("user_rephrase"),
    )


def build_prompt(
    question: Question,
    context: RetrievalResult | None,
    corpus: Corpus,
    n_context: int,
    variant: str = "base",
    templates: TemplateSet | None = None,
) -> PromptBundle:
    """Render the deterministic QA prompt.

    Passing ``context=None`` produces the no-context (LLM-only) prompt.
    Raises MissingPage when a context entry is absent from the corpus.
    """
    if variant not in PROMPT_VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    templates = templates or load_templates()

    context_block = ""
    used: tuple[tuple[str, int], ...] = ()
    if context is not None:
        if not context.entries:
            raise ValueError("context retrieval result is empty")
        head = context.entries[: max(n_context, 1)]
        blocks = []
        keys = []
        for entry in head:
            page = corpus.get(entry.doc_id, entry.page_number)
            if page is None:
                raise MissingPage(f"page {(entry.doc_id, entry.page_number)} not in corpus")
            header = CONTEXT_HEADER.format(doc_id=entry.doc_id, page=entry.page_number)
            blocks.append(f"{header}\n{page.text}")
            keys.append((entry.doc_id, entry.page_number))
        context_block = "Контекст:\n" + "\n\n".join(blocks) + "\n\n"
        used = tuple(keys)

    options_block = "\n".join(f"{label}) {text}" for label, text in question.options)
    labels = ", ".join(question.labels)
    user_prompt = templates.user_qa.format(
        context_block=context_block,
        question=question.text,
        options=options_block,
        labels=labels,
    )
    if variant == "retry_instructions":
        user_prompt = user_prompt + "\n\n" + templates.retry_suffix
    return PromptBundle(templates.system_qa, user_prompt, used)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def parse_answer(
    raw_text: str,
    question: Question,
    embed_backend=None,
    variant: str = "base",
    allow_fallback: bool = True,
) -> AnswerAttempt:
    """Map raw model output to an option label; first matching rule wins.

    1. A standalone option letter, optionally punctuation-wrapped or behind
       an answer prefix ("Відповідь:", "Answer:").
    2. Case-folded full text of an option appearing inside the raw text.
    3. Highest embedding cosine between the raw text and each option text
       (mock projection when no backend is given).
    """
    labels = question.labels

    match = _PREFIXED_LETTER_RE.search(raw_text)
    if match:
        letter = match.group(1).upper().translate(_CYR_TO_LAT)
        if letter in labels:
            return AnswerAttempt(letter, 0.0, "parsed_letter", variant, raw_text)
    for match in _STANDALONE_LETTER_RE.finditer(raw_text):
        letter = match.group(1).upper()
        if letter in labels:
            return AnswerAttempt(letter, 0.0, "parsed_letter", variant, raw_text)

    folded = raw_text.casefold()
    hits = []
    for label, text in question.options:
        needle = text.casefold().strip()
        if needle:
            pos = folded.find(needle)
            if pos >= 0:
                hits.append((pos, label))
    if hits:
        hits.sort(key=lambda item: (item[0], labels.index(item[1])))
        return AnswerAttempt(hits[0][1], 0.0, "parsed_letter", variant, raw_text)

    if not allow_fallback:
        raise UnparseableAnswer(f"no rule matched: {raw_text[:120]!r}")

    def embed_one(text: str) -> np.ndarray | None:
        if not text.strip():
            return None
        if embed_backend is not None:
            return np.asarray(embed_backend.embed([text])[0], dtype=np.float64)
        return mock_embed_vector(text)

    raw_vec = embed_one(raw_text)
    best_label, best_score = labels[0], -math.inf
    for label, text in question.options:
        vec = embed_one(text)
        score = _cosine(raw_vec, vec) if raw_vec is not None and vec is not None else 0.0
        if score > best_score:
            best_label, best_score = label, score
    return AnswerAttempt(best_label, 0.0, "similarity_fallback", variant, raw_text)


def softmax_scores(option_scores: dict[str, float]) -> dict[str, float]:
    """Softmax over the provided option scores; probabilities sum to 1."""
    peak = max(option_scores.values())
    exps = {label: math.exp(value - peak) for label, value in option_scores.items()}
    total = sum(exps.values())
    return {label: value / total for label, value in exps.items()}


def attempt_confidence(response, attempt_label: str, samples=None) -> float:
    """Confidence in [0,1] for one attempt.

    Backend option scores win when present (softmax probability of the
    label); otherwise self-consistency: the fraction of samples agreeing
    with the majority label.
    """
    if response is not None and response.option_scores:
        probs = softmax_scores(response.option_scores)
        return probs.get(attempt_label, 0.0)
    if samples:
        votes = Counter(sample.label for sample in samples)
        majority, count = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        return count / len(samples)
    raise NoConfidenceSignal("no option scores and no consistency samples")


def consistency_samples(
    chat_backend,
    bundle: PromptBundle,
    question: Question,
    n_samples: int,
    temperature: float,
    embed_backend=None,
) -> list[AnswerAttempt]:
    """Draw extra sampled answers for the self-consistency confidence path."""
    decode = DecodeConfig(temperature=temperature, max_tokens=16, want_option_scores=False)
    samples = []
    for _ in range(n_samples):
        response = chat_backend.chat(bundle.system_prompt, bundle.user_prompt, decode)
        samples.append(parse_answer(response.text, question, embed_backend))
    return samples


def similarity_baseline(
    question: Question,
    context: RetrievalResult,
    corpus: Corpus,
    scorer,
) -> AnswerAttempt:
    """Answer by matching option texts against the top retrieved page.

    ``scorer`` is either a TfidfIndex (its weighting space scores the pair)
    or an embedding backend. Confidence is the winning option's share of the
    total score mass; ties go to the earliest label.
    """
    if not context.entries:
        raise ValueError("similarity baseline needs a nonempty retrieval result")
    top = context.top()
    page = corpus.get(top.doc_id, top.page_number)
    if page is None:
        raise MissingPage(f"page {(top.doc_id, top.page_number)} not in corpus")

    if isinstance(scorer, TfidfIndex):
        raw = [scorer.similarity(text, page.text) for _, text in question.options]
    else:
        option_vecs = [
            np.asarray(scorer.embed([text])[0], dtype=np.float64) if text.strip() else None
            for _, text in question.options
        ]
        page_vec = (
            np.asarray(scorer.embed([page.text])[0], dtype=np.float64)
            if page.text.strip()
            else None
        )
        raw = [
            _cosine(vec, page_vec) if vec is not None and page_vec is not None else 0.0
            for vec in option_vecs
        ]

    scores = [max(0.0, s) for s in raw]
    best_idx = max(range(len(scores)), key=lambda i: (scores[i], -i))
    total = sum(scores)
    confidence = scores[best_idx] / total if total > 0.0 else 0.0
    label = question.labels[best_idx]
    return AnswerAttempt(label, confidence, "baseline", "base", raw_text="")


def with_confidence(attempt: AnswerAttempt, confidence: float) -> AnswerAttempt:
    return replace(attempt, confidence=confidence)
