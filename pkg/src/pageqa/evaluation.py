"""Composite scoring of predictions and ablation report rendering.

The final score weights answer accuracy at 0.5 and document correctness and
page proximity at 0.25 each:

    final = 0.5 * mean_a + 0.25 * mean_d + 0.25 * mean_p

Page proximity decays linearly with page distance inside the correct
document and is zero otherwise. The decay window W is a knob (default 10)
and is reported in every output header: scores are comparable only at
equal W.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from .agent import Prediction
from .corpus import Question
from .errors import (
    DuplicatePrediction,
    MissingGold,
    MissingPrediction,
    ParseError,
    ScoringError,
    UnknownQuestionId,
)

DEFAULT_PROXIMITY_WINDOW = 10


@dataclass(frozen=True)
class ProximityConfig:
    window: int = DEFAULT_PROXIMITY_WINDOW

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("proximity window must be >= 1")


class QuestionScore(NamedTuple):
    question_id: str
    answer_correct: int
    doc_correct: int
    page_score: float


@dataclass(frozen=True)
class ScoreBreakdown:
    per_question: tuple[QuestionScore, ...]
    mean_a: float
    mean_d: float
    mean_p: float
    final: float
    window: int


def combine_means(mean_a: float, mean_d: float, mean_p: float) -> float:
    return 0.5 * mean_a + 0.25 * mean_d + 0.25 * mean_p


def page_proximity(
    pred: tuple[str, int], gold: tuple[str, int], cfg: ProximityConfig | None = None
) -> float:
    """Linear page-distance credit inside the right document, 0 otherwise."""
    cfg = cfg or ProximityConfig()
    if pred[0] != gold[0]:
        return 0.0
    return max(0.0, 1.0 - abs(pred[1] - gold[1]) / cfg.window)


def score(
    predictions: list[Prediction],
    questions: list[Question],
    cfg: ProximityConfig | None = None,
    lenient: bool = False,
) -> ScoreBreakdown:
    """Score one prediction per gold question.

    Strict mode rejects missing predictions (silent zero-filling hides
    pipeline bugs); ``lenient=True`` zero-fills them instead. Predictions
    for unknown question ids always fail.
    """
    cfg = cfg or ProximityConfig()
    if not questions:
        raise ScoringError("no questions to score")
    by_id: dict[str, Prediction] = {}
    for pred in predictions:
        if pred.question_id in by_id:
            raise DuplicatePrediction(f"two predictions for {pred.question_id!r}")
        by_id[pred.question_id] = pred
    known = {q.question_id for q in questions}
    for qid in by_id:
        if qid not in known:
            raise UnknownQuestionId(f"prediction for unknown question {qid!r}")

    rows: list[QuestionScore] = []
    for question in questions:
        if question.gold is None:
            raise MissingGold(f"question {question.question_id!r} has no gold labels")
        pred = by_id.get(question.question_id)
        if pred is None:
            if not lenient:
                raise MissingPrediction(f"no prediction for {question.question_id!r}")
            rows.append(QuestionScore(question.question_id, 0, 0, 0.0))
            continue
        gold = question.gold
        a = int(pred.label == gold.answer)
        d = int(pred.doc_id == gold.doc_id)
        p = page_proximity(
            (pred.doc_id, pred.page_number), (gold.doc_id, gold.page_number), cfg
        )
        rows.append(QuestionScore(question.question_id, a, d, p))

    n = len(rows)
    mean_a = sum(r.answer_correct for r in rows) / n
    mean_d = sum(r.doc_correct for r in rows) / n
    mean_p = sum(r.page_score for r in rows) / n
    return ScoreBreakdown(
        per_question=tuple(rows),
        mean_a=mean_a,
        mean_d=mean_d,
        mean_p=mean_p,
        final=combine_means(mean_a, mean_d, mean_p),
        window=cfg.window,
    )


# -- predictions file I/O ----------------------------------------------------


def write_predictions(predictions: list[Prediction], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for pred in predictions:
            record = {
                "question_id": pred.question_id,
                "answer": pred.label,
                "doc_id": pred.doc_id,
                "page": pred.page_number,
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_predictions(path) -> list[Prediction]:
    path = Path(path)
    predictions = []
    with path.open(encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
                predictions.append(
                    Prediction(
                        question_id=str(record["question_id"]),
                        label=str(record["answer"]),
                        doc_id=str(record["doc_id"]),
                        page_number=int(record["page"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad prediction record: {exc}", path, lineno) from exc
    return predictions


# -- ablation reports ---------------------------------------------------------


def _fmt(value: float | None) -> str:
    return f"{value:.4f}" if value is not None else "n/a"


def ablation_report(runs, fmt: str = "text", window: int | None = None):
    """Render named runs as an ablation table.

    ``runs`` is an ordered list of (name, payload) where payload is a
    ScoreBreakdown, a retrieval-only (mean_d, mean_p) pair, or None for a
    failed run. ``fmt`` selects plain text or a structured dict.
    """
    if not runs:
        raise ValueError("need at least one run")
    rows = []
    retrieval_only = True
    for name, payload in runs:
        if payload is None:
            rows.append({"method": name, "status": "FAILED"})
            continue
        if isinstance(payload, ScoreBreakdown):
            retrieval_only = False
            if window is None:
                window = payload.window
            rows.append(
                {
                    "method": name,
                    "status": "ok",
                    "mean_a": payload.mean_a,
                    "mean_d": payload.mean_d,
                    "mean_p": payload.mean_p,
                    "final": payload.final,
                }
            )
        else:
            mean_d, mean_p = payload
            rows.append(
                {"method": name, "status": "ok", "mean_d": mean_d, "mean_p": mean_p}
            )

    window = window if window is not None else DEFAULT_PROXIMITY_WINDOW
    if fmt == "structured":
        return {"proximity_window": window, "rows": rows}
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    if retrieval_only:
        columns = [("Mean d_i", "mean_d"), ("Mean p_i", "mean_p")]
    else:
        columns = [
            ("Mean a_i", "mean_a"),
            ("Mean d_i", "mean_d"),
            ("Mean p_i", "mean_p"),
            ("Final metric", "final"),
        ]
    name_width = max(len("Method"), max(len(r["method"]) for r in rows))
    header = ["Method".ljust(name_width)] + [label for label, _ in columns]
    lines = [f"# proximity window W={window}", " | ".join(header)]
    lines.append("-" * len(lines[1]))
    for row in rows:
        if row["status"] == "FAILED":
            cells = ["FAILED".rjust(len(label)) for label, _ in columns]
        else:
            cells = [_fmt(row.get(key)).rjust(len(label)) for label, key in columns]
        lines.append(" | ".join([row["method"].ljust(name_width)] + cells))
    return "\n".join(lines) + "\n"
