"""Confidence-gated retry control flow and the wall-clock budget governor.

Per question the controller runs: base retrieval and answer; if confidence
is below threshold and budget allows, a query rephrase with a second
retrieval pass; if still low, re-prompts with retry instructions. The final
answer is the attempt with maximal confidence (ties to the earliest), and
the predicted page comes from the retrieval pass paired with that attempt.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import qa
from .backends import DecodeConfig
from .corpus import Corpus, Question
from .errors import ConfigError, EngineError, NoConfidenceSignal
from .qa import AnswerAttempt, TemplateSet
from .sparse import RetrievalResult

logger = logging.getLogger(__name__)

PAGE_ATTRIBUTION_MODES = ("selected", "base")


@dataclass(frozen=True)
class AgentConfig:
    enable_rephrase: bool = True
    enable_retry: bool = True
    confidence_threshold: float = 0.5
    max_answer_attempts: int = 3
    total_budget: float = 32400.0  # seconds; models the offline 9-hour cap
    per_question_reserve: float = 1.0
    page_attribution: str = "selected"

    def __post_init__(self):
        if self.max_answer_attempts < 1:
            raise ConfigError("max_answer_attempts must be >= 1")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0,1]")
        if self.per_question_reserve > self.total_budget:
            raise ConfigError("per_question_reserve cannot exceed total_budget")
        if self.page_attribution not in PAGE_ATTRIBUTION_MODES:
            raise ConfigError(f"unknown page_attribution {self.page_attribution!r}")


@dataclass(frozen=True)
class Prediction:
    question_id: str
    label: str
    doc_id: str
    page_number: int


@dataclass
class QuestionTrace:
    question_id: str
    attempts: list[AnswerAttempt]
    retrievals: list[tuple[str, RetrievalResult]]
    attempt_retrieval: list[int]  # per attempt: index into retrievals
    final: Prediction
    budget_exhausted: bool = False
    fallback_used: bool = False
    elapsed: float = 0.0


class BudgetGovernor:
    """Shared monotonic-clock budget check.

    Optional steps are allowed only while the remaining budget still covers
    a per-question reserve for every unfinished question. Thread-safe;
    checks and the unfinished counter share one lock.
    """

    def __init__(self, total_budget: float, per_question_reserve: float, clock=time.monotonic):
        self.total_budget = total_budget
        self.per_question_reserve = per_question_reserve
        self._clock = clock
        self._lock = threading.Lock()
        self._started_at = clock()
        self._unfinished = 0

    def start(self, n_questions: int) -> None:
        with self._lock:
            self._started_at = self._clock()
            self._unfinished = n_questions

    def allow_optional(self) -> bool:
        with self._lock:
            remaining = self.total_budget - (self._clock() - self._started_at)
            return remaining - self._unfinished * self.per_question_reserve > 0.0

    def question_done(self) -> None:
        with self._lock:
            self._unfinished = max(0, self._unfinished - 1)


@dataclass
class QaComponents:
    """Everything answer_question needs besides the retriever."""

    chat_backend: object
    templates: TemplateSet
    embed_backend: object | None = None
    n_context: int = 3
    include_context: bool = True
    allow_fallback: bool = True
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    confidence_source: str = "auto"  # auto | option_scores | self_consistency
    self_consistency_samples: int = 3
    self_consistency_temperature: float = 0.7
    baseline_scorer: object | None = None


def rephrase_query(question: Question, chat_backend, templates: TemplateSet) -> str:
    """Ask the chat backend for a reformulation; degrade to the original text.

    Never raises: transport or backend failures, and empty outputs, all fall
    back to the question as asked.
    """
    user_prompt = templates.user_rephrase.format(question=question.text)
    decode = DecodeConfig(temperature=0.0, max_tokens=128, want_option_scores=False)
    try:
        response = chat_backend.chat(templates.system_rephrase, user_prompt, decode)
    except EngineError as exc:
        logger.warning("rephrase failed for %s: %s", question.question_id, exc)
        return question.text
    text = response.text.strip().strip('"«»')
    return text or question.text


def _confidence_for(
    response,
    attempt: AnswerAttempt,
    bundle: qa.PromptBundle,
    question: Question,
    components: QaComponents,
) -> float:
    """Resolve confidence per the configured source, degrading to 0.0."""
    source = components.confidence_source
    use_scores = source in ("auto", "option_scores") and bool(response.option_scores)
    if use_scores:
        return qa.attempt_confidence(response, attempt.label)
    if source in ("auto", "self_consistency") and components.self_consistency_samples > 0:
        samples = qa.consistency_samples(
            components.chat_backend,
            bundle,
            question,
            components.self_consistency_samples,
            components.self_consistency_temperature,
            components.embed_backend,
        )
        return qa.attempt_confidence(response, attempt.label, samples=samples)
    try:
        return qa.attempt_confidence(response, attempt.label)
    except NoConfidenceSignal:
        logger.warning(
            "no confidence signal for %s; treating attempt as low confidence",
            question.question_id,
        )
        return 0.0


def _make_attempt(
    question: Question,
    context: RetrievalResult | None,
    corpus: Corpus,
    components: QaComponents,
    variant: str,
) -> AnswerAttempt:
    bundle = qa.build_prompt(
        question,
        context if components.include_context else None,
        corpus,
        components.n_context,
        variant=variant,
        templates=components.templates,
    )
    response = components.chat_backend.chat(
        bundle.system_prompt, bundle.user_prompt, components.decode
    )
    attempt = qa.parse_answer(
        response.text,
        question,
        embed_backend=components.embed_backend,
        variant=variant,
        allow_fallback=components.allow_fallback,
    )
    confidence = _confidence_for(response, attempt, bundle, question, components)
    return qa.with_confidence(attempt, confidence)


def answer_question(
    question: Question,
    corpus: Corpus,
    retriever,
    components: QaComponents,
    config: AgentConfig,
    governor: BudgetGovernor,
) -> QuestionTrace:
    """Run the full per-question loop and return its trace.

    ``retriever`` maps query text to a RetrievalResult. The mandatory first
    attempt always runs; rephrase and retry are optional steps gated on both
    confidence and the budget governor.
    """
    started = time.monotonic()
    budget_exhausted = not governor.allow_optional()

    base_query = question.text
    retrievals: list[tuple[str, RetrievalResult]] = [(base_query, retriever(base_query))]
    attempts: list[AnswerAttempt] = []
    attempt_retrieval: list[int] = []

    attempts.append(_make_attempt(question, retrievals[0][1], corpus, components, "base"))
    attempt_retrieval.append(0)

    def below_threshold() -> bool:
        return max(a.confidence for a in attempts) < config.confidence_threshold

    def optional_allowed() -> bool:
        nonlocal budget_exhausted
        if not governor.allow_optional():
            budget_exhausted = True
            return False
        return True

    if (
        below_threshold()
        and config.enable_rephrase
        and len(attempts) < config.max_answer_attempts
        and optional_allowed()
    ):
        new_query = rephrase_query(question, components.chat_backend, components.templates)
        retrievals.append((new_query, retriever(new_query)))
        attempts.append(
            _make_attempt(question, retrievals[-1][1], corpus, components, "rephrased_query")
        )
        attempt_retrieval.append(len(retrievals) - 1)

    while (
        below_threshold()
        and config.enable_retry
        and len(attempts) < config.max_answer_attempts
        and optional_allowed()
    ):
        context = retrievals[attempt_retrieval[-1]][1]
        attempts.append(
            _make_attempt(question, context, corpus, components, "retry_instructions")
        )
        attempt_retrieval.append(attempt_retrieval[-1])

    best_idx = max(range(len(attempts)), key=lambda i: (attempts[i].confidence, -i))
    if config.page_attribution == "base":
        page_source = retrievals[0][1]
    else:
        page_source = retrievals[attempt_retrieval[best_idx]][1]
    top = page_source.top()
    final = Prediction(question.question_id, attempts[best_idx].label, top.doc_id, top.page_number)
    return QuestionTrace(
        question_id=question.question_id,
        attempts=attempts,
        retrievals=retrievals,
        attempt_retrieval=attempt_retrieval,
        final=final,
        budget_exhausted=budget_exhausted,
        elapsed=time.monotonic() - started,
    )


def _fallback_trace(
    question: Question,
    corpus: Corpus,
    retriever,
    components: QaComponents,
    governor: BudgetGovernor,
    reason: Exception,
) -> QuestionTrace:
    """Similarity-baseline answer used when every chat attempt failed."""
    if components.baseline_scorer is None:
        raise reason
    started = time.monotonic()
    try:
        result = retriever(question.text)
    except EngineError:
        scorer = components.baseline_scorer
        if not hasattr(scorer, "query"):
            raise reason
        result = scorer.query(question.text, k=max(components.n_context, 1))
    attempt = qa.similarity_baseline(question, result, corpus, components.baseline_scorer)
    top = result.top()
    logger.warning(
        "question %s fell back to the similarity baseline: %s", question.question_id, reason
    )
    return QuestionTrace(
        question_id=question.question_id,
        attempts=[attempt],
        retrievals=[(question.text, result)],
        attempt_retrieval=[0],
        final=Prediction(question.question_id, attempt.label, top.doc_id, top.page_number),
        budget_exhausted=not governor.allow_optional(),
        fallback_used=True,
        elapsed=time.monotonic() - started,
    )


def run_pipeline(
    questions: list[Question],
    corpus: Corpus,
    retriever,
    components: QaComponents,
    config: AgentConfig,
    workers: int = 1,
    governor: BudgetGovernor | None = None,
) -> list[QuestionTrace]:
    """Process all questions, reassembling traces in input order.

    Questions run concurrently up to ``workers``; the governor is shared.
    A question whose attempts all fail degrades to the similarity baseline
    so the prediction file is always complete.
    """
    governor = governor or BudgetGovernor(config.total_budget, config.per_question_reserve)
    governor.start(len(questions))

    def process(question: Question) -> QuestionTrace:
        try:
            try:
                return answer_question(
                    question, corpus, retriever, components, config, governor
                )
            except EngineError as exc:
                return _fallback_trace(
                    question, corpus, retriever, components, governor, exc
                )
        finally:
            governor.question_done()

    if workers <= 1:
        return [process(q) for q in questions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(process, questions))


def write_trace_log(traces: list[QuestionTrace], path) -> None:
    """Line-delimited trace records for post-hoc analysis."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for trace in traces:
            record = {
                "question_id": trace.question_id,
                "final": {
                    "answer": trace.final.label,
                    "doc_id": trace.final.doc_id,
                    "page": trace.final.page_number,
                },
                "budget_exhausted": trace.budget_exhausted,
                "fallback_used": trace.fallback_used,
                "elapsed_ms": round(trace.elapsed * 1000.0, 3),
                "attempts": [
                    {
                        "label": a.label,
                        "confidence": round(a.confidence, 6),
                        "source": a.source,
                        "prompt_variant": a.prompt_variant,
                    }
                    for a in trace.attempts
                ],
                "retrievals": [
                    {
                        "query": query,
                        "top": [[e.doc_id, e.page_number, round(e.score, 6)] for e in result.entries[:3]],
                    }
                    for query, result in trace.retrievals
                ],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
