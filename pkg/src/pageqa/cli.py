"""Command-line entry point: index, run, score, and compare subcommands.

Exit codes are stable: 0 success, 1 runtime failure, 2 usage/config error.
All artifacts land in the configured output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import agent, config as config_mod, dense, evaluation, qa, sparse
from .corpus import load_corpus, load_questions
from .errors import ConfigError, CorpusError, EngineError

logger = logging.getLogger(__name__)

MODES = ("baseline", "llm_only", "rag", "agentic")

ABLATION_ROWS = (
    ("base", False, False),
    ("+rephrase", True, False),
    ("+retry", False, True),
    ("+both", True, True),
)


class Runtime:
    """Everything a run needs, assembled once from an EngineConfig."""

    def __init__(self, cfg: config_mod.EngineConfig):
        self.config = cfg
        self.corpus = load_corpus(cfg.corpus, cfg.allow_empty_pages)
        self.questions = load_questions(cfg.questions)
        self.templates = qa.load_templates(cfg.qa.templates or "default")

        retrieval = cfg.retrieval
        self.sparse_index = None
        self.store = None
        self.embed_backend = None
        if retrieval.first_stage == "sparse":
            self.sparse_index = sparse.build_index(
                self.corpus, retrieval.variant, retrieval.sparse_config()
            )
        else:
            self.embed_backend = config_mod.make_embed_backend(cfg)
            self.store = dense.build_store(self.corpus, self.embed_backend)
        if self.embed_backend is None and cfg.backend_settings("embed").kind == "mock":
            self.embed_backend = config_mod.make_embed_backend(cfg)
        self.rerank_backend = (
            config_mod.make_rerank_backend(cfg) if retrieval.use_reranker else None
        )
        self.chat_backend = config_mod.make_chat_backend(cfg)

        # Offline answer-page similarity scorer; doubles as the failure
        # fallback, so it exists for every mode.
        if retrieval.first_stage == "sparse" and retrieval.variant == "char":
            self.baseline_index = self.sparse_index
        else:
            self.baseline_index = sparse.build_index(
                self.corpus, "char", retrieval.sparse_config()
            )

    def retriever(self, query_text: str):
        retrieval = self.config.retrieval
        if self.rerank_backend is not None:
            return dense.cascade_retrieve(
                query_text,
                retrieval.cascade_config(),
                self.corpus,
                self.rerank_backend,
                sparse_index=self.sparse_index,
                store=self.store,
                embed_backend=self.embed_backend,
            )
        if self.sparse_index is not None:
            return self.sparse_index.query(query_text, retrieval.rerank_k)
        return dense.dense_query(
            self.store, query_text, retrieval.rerank_k, self.embed_backend
        )

    def components(self, include_context: bool = True) -> agent.QaComponents:
        qa_cfg = self.config.qa
        from .backends import DecodeConfig

        return agent.QaComponents(
            chat_backend=self.chat_backend,
            templates=self.templates,
            embed_backend=self.embed_backend,
            n_context=qa_cfg.n_context,
            include_context=include_context,
            allow_fallback=qa_cfg.enable_similarity_fallback,
            decode=DecodeConfig(
                temperature=qa_cfg.temperature,
                max_tokens=qa_cfg.max_tokens,
                want_option_scores=True,
            ),
            confidence_source=qa_cfg.confidence_source,
            self_consistency_samples=qa_cfg.self_consistency_samples,
            self_consistency_temperature=qa_cfg.self_consistency_temperature,
            baseline_scorer=self.baseline_index,
        )


def _agent_config_for_mode(cfg: config_mod.EngineConfig, mode: str) -> agent.AgentConfig:
    base = cfg.agent
    if mode == "agentic":
        return base
    return dataclasses.replace(
        base, enable_rephrase=False, enable_retry=False, max_answer_attempts=1
    )


def run_mode(runtime: Runtime, mode: str, workers: int | None = None) -> list[agent.QuestionTrace]:
    """Execute one pipeline mode over all questions, traces in input order."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    cfg = runtime.config
    n_workers = workers if workers is not None else cfg.workers

    if mode == "baseline":
        traces = []
        for question in runtime.questions:
            result = runtime.retriever(question.text)
            attempt = qa.similarity_baseline(
                question, result, runtime.corpus, runtime.baseline_index
            )
            top = result.top()
            traces.append(
                agent.QuestionTrace(
                    question_id=question.question_id,
                    attempts=[attempt],
                    retrievals=[(question.text, result)],
                    attempt_retrieval=[0],
                    final=agent.Prediction(
                        question.question_id, attempt.label, top.doc_id, top.page_number
                    ),
                )
            )
        return traces

    components = runtime.components(include_context=(mode != "llm_only"))
    agent_cfg = _agent_config_for_mode(cfg, mode)
    return agent.run_pipeline(
        runtime.questions,
        runtime.corpus,
        runtime.retriever,
        components,
        agent_cfg,
        workers=n_workers,
    )


# -- subcommands ---------------------------------------------------------------


def cmd_index(args) -> int:
    cfg = config_mod.load_config(args.config)
    out_dir = Path(args.output_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg.corpus, cfg.allow_empty_pages)

    what = args.what
    if what == "auto":
        what = "sparse" if cfg.retrieval.first_stage == "sparse" else "dense"

    if what in ("sparse", "both"):
        index = sparse.build_index(corpus, cfg.retrieval.variant, cfg.retrieval.sparse_config())
        path = out_dir / "sparse_index.json"
        index.save(path)
        vocab_sizes = {
            name: len(sub.vocabulary)
            for name, sub in (("word", index._word), ("char", index._char))
            if sub is not None
        }
        print(
            f"sparse index ({index.variant}): {len(corpus)} pages, "
            f"vocab {vocab_sizes} -> {path}"
        )
    if what in ("dense", "both"):
        embed_backend = config_mod.make_embed_backend(cfg)
        store = dense.build_store(corpus, embed_backend)
        path = out_dir / "vector_store.json"
        store.save(path)
        print(f"vector store: {len(store)} pages, dimension {store.dimension} -> {path}")
    return 0


def cmd_run(args) -> int:
    cfg = config_mod.load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    runtime = Runtime(cfg)
    started = time.monotonic()
    traces = run_mode(runtime, args.mode, workers=args.workers)
    elapsed = time.monotonic() - started

    predictions = [t.final for t in traces]
    predictions_path = out_dir / "predictions.jsonl"
    evaluation.write_predictions(predictions, predictions_path)
    trace_path = out_dir / "trace.jsonl"
    agent.write_trace_log(traces, trace_path)

    n_attempts = sum(len(t.attempts) for t in traces)
    n_fallback = sum(t.fallback_used for t in traces)
    print(
        f"mode={args.mode}: {len(traces)} questions, {n_attempts} attempts, "
        f"{n_fallback} fallbacks, {elapsed:.2f}s"
    )
    print(f"predictions -> {predictions_path}")
    print(f"trace       -> {trace_path}")
    return 0


def cmd_score(args) -> int:
    predictions = evaluation.read_predictions(args.predictions)
    questions = load_questions(args.questions)
    cfg = evaluation.ProximityConfig(window=args.window)
    breakdown = evaluation.score(predictions, questions, cfg, lenient=args.lenient)

    print(f"# proximity window W={breakdown.window}")
    print(f"mean_a = {breakdown.mean_a:.4f}")
    print(f"mean_d = {breakdown.mean_d:.4f}")
    print(f"mean_p = {breakdown.mean_p:.4f}")
    print(f"final  = {breakdown.final:.4f}")

    out_path = Path(args.out) if args.out else Path(str(args.predictions) + ".breakdown.json")
    payload = {
        "proximity_window": breakdown.window,
        "mean_a": breakdown.mean_a,
        "mean_d": breakdown.mean_d,
        "mean_p": breakdown.mean_p,
        "final": breakdown.final,
        "per_question": [
            {
                "question_id": row.question_id,
                "a": row.answer_correct,
                "d": row.doc_correct,
                "p": row.page_score,
            }
            for row in breakdown.per_question
        ],
    }
    out_path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"breakdown -> {out_path}")
    return 0


def cmd_compare(args) -> int:
    config_paths = args.config
    rows = []
    first_cfg = config_mod.load_config(config_paths[0])
    if args.output_dir:
        first_cfg.output_dir = args.output_dir
    out_dir = Path(first_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if len(config_paths) == 1:
        runs = [
            (name, config_paths[0], rephrase, retry)
            for name, rephrase, retry in ABLATION_ROWS
        ]
    else:
        runs = [(Path(p).stem, p, None, None) for p in config_paths]

    window = None
    for name, path, rephrase, retry in runs:
        try:
            cfg = config_mod.load_config(path)
            if rephrase is not None:
                cfg.agent = dataclasses.replace(
                    cfg.agent, enable_rephrase=rephrase, enable_retry=retry
                )
            runtime = Runtime(cfg)
            traces = run_mode(runtime, "agentic", workers=args.workers)
            breakdown = evaluation.score(
                [t.final for t in traces], runtime.questions, cfg.proximity
            )
            window = breakdown.window
            rows.append((name, breakdown))
        except EngineError as exc:
            logger.error("run %s failed: %s", name, exc)
            rows.append((name, None))

    report_text = evaluation.ablation_report(rows, fmt="text", window=window)
    report_data = evaluation.ablation_report(rows, fmt="structured", window=window)
    (out_dir / "report.txt").write_text(report_text, encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(report_data, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(report_text, end="")
    print(f"report -> {out_dir / 'report.txt'}")
    return 0


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pageqa",
        description="Retrieval-augmented multiple-choice QA over page-level corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build and persist retrieval indices")
    p_index.add_argument("--config", required=True)
    p_index.add_argument("--what", choices=("auto", "sparse", "dense", "both"), default="auto")
    p_index.add_argument("--output-dir", default=None)
    p_index.set_defaults(func=cmd_index)

    p_run = sub.add_parser("run", help="answer all questions in one mode")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--mode", choices=MODES, default="agentic")
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_score = sub.add_parser("score", help="score a predictions file against gold questions")
    p_score.add_argument("--predictions", required=True)
    p_score.add_argument("--questions", required=True)
    p_score.add_argument("--window", type=int, default=evaluation.DEFAULT_PROXIMITY_WINDOW)
    p_score.add_argument("--lenient", action="store_true")
    p_score.add_argument("--out", default=None)
    p_score.set_defaults(func=cmd_score)

    p_compare = sub.add_parser(
        "compare", help="run ablations (or several configs) and emit a report"
    )
    p_compare.add_argument(
        "--config", nargs="+", required=True,
        help="one config expands into the 4 standard agentic ablations",
    )
    p_compare.add_argument("--output-dir", default=None)
    p_compare.add_argument("--workers", type=int, default=None)
    p_compare.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except CorpusError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
