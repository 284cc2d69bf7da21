"""The retrieve-answer-validate loop, plus the no-retrieval and single-shot baselines.

One trace is strictly sequential; traces for different questions may run
concurrently (records are immutable once emitted, and backends handle their
own synchronization). The pipeline never sees reference answers: nothing in
this module takes them as input, so leakage is impossible by construction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .bm25 import Index, ScoredDoc, retrieve_top_k
from .llm import BinaryVerdict, GenParams, LlmBackend, forced_choice
from .prompts import (
    KeywordParseError,
    PromptTemplate,
    dedupe_keywords,
    format_documents,
    format_keywords,
    parse_cot_verdict,
    parse_keyword_list,
    render,
)

STEP_QUERY_EXPANSION = "query_expansion"
STEP_RETRIEVAL = "retrieval"
STEP_ANSWER = "answer_generation"
STEP_VALIDATION = "answer_validation"

REGEN_MODES = ("keywords_only", "docwise")
VALIDATION_MODES = ("plain", "cot")

STOP_VALIDATED = "validated_true"
STOP_BUDGET = "budget_exhausted"

METHOD_ITERATIVE = "iterative"
METHOD_RAG = "rag"
METHOD_VANILLA = "vanilla"


@dataclass
class StepBackends:
    """Backends per step; any subset may share one object."""

    keyword_gen: LlmBackend
    answer_gen: LlmBackend
    validate: LlmBackend

    @classmethod
    def shared(cls, backend: LlmBackend) -> "StepBackends":
        return cls(keyword_gen=backend, answer_gen=backend, validate=backend)


@dataclass
class RunConfig:
    max_iterations: int = 5
    top_k: int = 3
    regen_mode: str = "keywords_only"
    validation_mode: str = "plain"
    early_stop: bool = True
    # When set, the validation prompt sees every document retrieved so far
    # instead of only the current iteration's.
    accumulate_validation_docs: bool = False
    save_raw: bool = False
    keyword_params: GenParams = field(default_factory=lambda: GenParams(max_tokens=50))
    answer_params: GenParams = field(default_factory=lambda: GenParams(max_tokens=50))
    validation_params: GenParams = field(default_factory=lambda: GenParams(max_tokens=30))
    templates: dict[str, PromptTemplate] | None = None

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.regen_mode not in REGEN_MODES:
            raise ValueError(f"regen_mode must be one of {REGEN_MODES}, got {self.regen_mode!r}")
        if self.validation_mode not in VALIDATION_MODES:
            raise ValueError(
                f"validation_mode must be one of {VALIDATION_MODES}, got {self.validation_mode!r}"
            )


@dataclass
class IterationRecord:
    index: int
    keywords: list[str]
    expanded_query: str
    retrieved: list[ScoredDoc]
    answer: str
    verdict: BinaryVerdict | None
    new_keywords: int
    new_docs: int
    wall_time_ms: dict[str, float]
    flags: list[str] = field(default_factory=list)
    raw: list[dict] | None = None


@dataclass
class RunTrace:
    question: str
    method: str
    iterations: list[IterationRecord]
    stop_reason: str | None
    final_answer: str
    early_stop: bool
    error: str | None = None


def expand_query(question: str, keywords: list[str]) -> str:
    """Question followed by the keywords, single-space separated; empty set → question."""
    if not keywords:
        return question
    return question.rstrip() + " " + " ".join(keywords)


class _Timer:
    def __init__(self) -> None:
        self.ms: dict[str, float] = {}

    def time(self, step: str):
        return _Timed(self, step)


class _Timed:
    def __init__(self, timer: _Timer, step: str):
        self._timer = timer
        self._step = step

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        elapsed = (time.perf_counter() - self._t0) * 1000.0
        self._timer.ms[self._step] = self._timer.ms.get(self._step, 0.0) + elapsed
        return False


def _record_raw(raws: list[dict] | None, step: str, messages, completion: str) -> None:
    if raws is None:
        return
    raws.append(
        {
            "step": step,
            "system": messages[0].content,
            "user": messages[1].content,
            "completion": completion,
        }
    )


def _keywords_initial(question, backends, config, flags, raws) -> list[str]:
    messages = render("step1_keywords", {"q": question}, config.templates)
    for attempt in (0, 1):
        reply = backends.keyword_gen.complete(messages, config.keyword_params)
        _record_raw(raws, "keyword_generation", messages, reply)
        try:
            return parse_keyword_list(reply)
        except KeywordParseError:
            if attempt == 0:
                flags.append("keyword_parse_retry")
    flags.append("keyword_parse_failed")
    return []


def _keywords_regen(question, prev_keywords, backends, config, flags, raws) -> list[str]:
    template_id = "step4_regen_cot" if config.validation_mode == "cot" else "step4_regen"
    messages = render(
        template_id, {"q": question, "K": format_keywords(prev_keywords)}, config.templates
    )
    for attempt in (0, 1):
        reply = backends.keyword_gen.complete(messages, config.keyword_params)
        _record_raw(raws, "keyword_regeneration", messages, reply)
        try:
            return parse_keyword_list(reply)
        except KeywordParseError:
            if attempt == 0:
                flags.append("keyword_parse_retry")
    # Keep the loop moving with the previous set rather than dropping to nothing.
    flags.append("keyword_parse_failed_reused_previous")
    return list(prev_keywords)


def _keywords_regen_docwise(
    question, prev_keywords, prev_doc_texts, backends, config, flags, raws
) -> list[str]:
    merged: list[str] = []
    for doc_text in prev_doc_texts:
        messages = render(
            "step4_regen_docwise",
            {
                "q": question,
                "K": format_keywords(prev_keywords),
                "Docs": format_documents([doc_text]),
            },
            config.templates,
        )
        reply = backends.keyword_gen.complete(messages, config.keyword_params)
        _record_raw(raws, "keyword_regeneration_docwise", messages, reply)
        try:
            merged.extend(parse_keyword_list(reply))
        except KeywordParseError:
            flags.append("docwise_parse_failed")
    keywords = dedupe_keywords(merged)
    if not keywords:
        flags.append("keyword_parse_failed_reused_previous")
        return list(prev_keywords)
    return keywords


def _validate(question, answer, doc_texts, backends, config, raws) -> BinaryVerdict:
    docs_rendered = format_documents(doc_texts)
    if config.validation_mode == "cot":
        messages = render(
            "step3_validate_cot",
            {"q": question, "a": answer, "Docs": docs_rendered},
            config.templates,
        )
        reply = backends.validate.complete(messages, config.validation_params)
        _record_raw(raws, "answer_validation", messages, reply)
        return parse_cot_verdict(reply)
    messages = render(
        "step3_validate", {"q": question, "a": answer, "Docs": docs_rendered}, config.templates
    )
    verdict = forced_choice(backends.validate, messages, params=config.validation_params)
    _record_raw(raws, "answer_validation", messages, f"verdict={verdict.choice}")
    return verdict


def run_iterative(
    question: str,
    index: Index,
    backends: StepBackends,
    config: RunConfig | None = None,
) -> RunTrace:
    """Run the keyword loop: generate keywords, retrieve, answer, validate, refine.

    Stops on a True verdict (unless early stopping is disabled) or after
    max_iterations. The final answer is always the last iteration's answer.
    """
    config = config or RunConfig()
    records: list[IterationRecord] = []
    seen_keywords: set[str] = set()
    seen_docs: set[str] = set()
    prev_keywords: list[str] = []
    prev_doc_texts: list[str] = []
    all_doc_texts: list[str] = []

    for i in range(config.max_iterations):
        timer = _Timer()
        flags: list[str] = []
        raws: list[dict] | None = [] if config.save_raw else None

        with timer.time(STEP_QUERY_EXPANSION):
            if i == 0:
                keywords = _keywords_initial(question, backends, config, flags, raws)
            elif config.regen_mode == "docwise":
                keywords = _keywords_regen_docwise(
                    question, prev_keywords, prev_doc_texts, backends, config, flags, raws
                )
            else:
                keywords = _keywords_regen(question, prev_keywords, backends, config, flags, raws)

        expanded = expand_query(question, keywords)
        with timer.time(STEP_RETRIEVAL):
            retrieved = retrieve_top_k(index, expanded, config.top_k)
        doc_texts = [index.text_of(doc.chunk_id) for doc in retrieved]
        for text in doc_texts:
            if text not in all_doc_texts:
                all_doc_texts.append(text)

        with timer.time(STEP_ANSWER):
            messages = render(
                "step2_answer",
                {"q": question, "D": format_documents(doc_texts)},
                config.templates,
            )
            answer = backends.answer_gen.complete(messages, config.answer_params).strip()
            _record_raw(raws, "answer_generation", messages, answer)

        validation_docs = all_doc_texts if config.accumulate_validation_docs else doc_texts
        with timer.time(STEP_VALIDATION):
            verdict = _validate(question, answer, validation_docs, backends, config, raws)
        if verdict.flagged:
            flags.append("verdict_unparsed")

        new_keywords = sum(1 for kw in keywords if kw.casefold() not in seen_keywords)
        seen_keywords.update(kw.casefold() for kw in keywords)
        new_docs = sum(1 for doc in retrieved if doc.chunk_id not in seen_docs)
        seen_docs.update(doc.chunk_id for doc in retrieved)

        records.append(
            IterationRecord(
                index=i,
                keywords=keywords,
                expanded_query=expanded,
                retrieved=retrieved,
                answer=answer,
                verdict=verdict,
                new_keywords=new_keywords,
                new_docs=new_docs,
                wall_time_ms=timer.ms,
                flags=flags,
                raw=raws,
            )
        )

        if verdict.choice and config.early_stop:
            break
        prev_keywords = keywords
        prev_doc_texts = doc_texts

    last = records[-1]
    stop_reason = STOP_VALIDATED if (last.verdict and last.verdict.choice) else STOP_BUDGET
    return RunTrace(
        question=question,
        method=METHOD_ITERATIVE,
        iterations=records,
        stop_reason=stop_reason,
        final_answer=last.answer,
        early_stop=config.early_stop,
    )


def run_vanilla(
    question: str,
    backend: LlmBackend,
    params: GenParams | None = None,
    *,
    save_raw: bool = False,
    templates: dict[str, PromptTemplate] | None = None,
) -> RunTrace:
    """Answer with a single LLM call and no retrieval at all."""
    params = params or GenParams(max_tokens=50)
    timer = _Timer()
    raws: list[dict] | None = [] if save_raw else None
    with timer.time(STEP_ANSWER):
        messages = render("vanilla_answer", {"q": question}, templates)
        answer = backend.complete(messages, params).strip()
        _record_raw(raws, "answer_generation", messages, answer)
    record = IterationRecord(
        index=0,
        keywords=[],
        expanded_query=question,
        retrieved=[],
        answer=answer,
        verdict=None,
        new_keywords=0,
        new_docs=0,
        wall_time_ms=timer.ms,
        raw=raws,
    )
    return RunTrace(
        question=question,
        method=METHOD_VANILLA,
        iterations=[record],
        stop_reason=None,
        final_answer=answer,
        early_stop=False,
    )


def run_rag_once(
    question: str,
    index: Index,
    backend: LlmBackend,
    config: RunConfig | None = None,
) -> RunTrace:
    """Single retrieval with the raw question, one answer call, no validation."""
    config = config or RunConfig()
    timer = _Timer()
    flags: list[str] = []
    raws: list[dict] | None = [] if config.save_raw else None
    with timer.time(STEP_RETRIEVAL):
        retrieved = retrieve_top_k(index, question, config.top_k)
    if not retrieved:
        flags.append("empty_retrieval")
    doc_texts = [index.text_of(doc.chunk_id) for doc in retrieved]
    with timer.time(STEP_ANSWER):
        messages = render(
            "step2_answer", {"q": question, "D": format_documents(doc_texts)}, config.templates
        )
        answer = backend.complete(messages, config.answer_params).strip()
        _record_raw(raws, "answer_generation", messages, answer)
    record = IterationRecord(
        index=0,
        keywords=[],
        expanded_query=question,
        retrieved=retrieved,
        answer=answer,
        verdict=None,
        new_keywords=0,
        new_docs=len(retrieved),
        wall_time_ms=timer.ms,
        flags=flags,
        raw=raws,
    )
    return RunTrace(
        question=question,
        method=METHOD_RAG,
        iterations=[record],
        stop_reason=None,
        final_answer=answer,
        early_stop=False,
    )


# --- trace (de)serialization -------------------------------------------------

TRACE_SCHEMA_VERSION = 1


def _verdict_to_dict(verdict: BinaryVerdict | None) -> dict | None:
    if verdict is None:
        return None
    return {
        "choice": verdict.choice,
        "p_true": verdict.p_true,
        "p_false": verdict.p_false,
        "method": verdict.method,
        "flagged": verdict.flagged,
    }


def _verdict_from_dict(d: dict | None) -> BinaryVerdict | None:
    if d is None:
        return None
    return BinaryVerdict(
        choice=d["choice"],
        p_true=d.get("p_true"),
        p_false=d.get("p_false"),
        method=d.get("method", "text-fallback"),
        flagged=d.get("flagged", False),
    )


def trace_to_dict(trace: RunTrace, qid: int | None = None) -> dict:
    d = {
        "v": TRACE_SCHEMA_VERSION,
        "question": trace.question,
        "method": trace.method,
        "stop_reason": trace.stop_reason,
        "final_answer": trace.final_answer,
        "early_stop": trace.early_stop,
        "error": trace.error,
        "iterations": [
            {
                "index": rec.index,
                "keywords": rec.keywords,
                "expanded_query": rec.expanded_query,
                "retrieved": [{"chunk_id": s.chunk_id, "score": s.score} for s in rec.retrieved],
                "answer": rec.answer,
                "verdict": _verdict_to_dict(rec.verdict),
                "new_keywords": rec.new_keywords,
                "new_docs": rec.new_docs,
                "wall_time_ms": rec.wall_time_ms,
                "flags": rec.flags,
                **({"raw": rec.raw} if rec.raw is not None else {}),
            }
            for rec in trace.iterations
        ],
    }
    if qid is not None:
        d["qid"] = qid
    return d


def trace_from_dict(d: dict) -> RunTrace:
    iterations = [
        IterationRecord(
            index=rec["index"],
            keywords=list(rec["keywords"]),
            expanded_query=rec["expanded_query"],
            retrieved=[ScoredDoc(s["chunk_id"], s["score"]) for s in rec["retrieved"]],
            answer=rec["answer"],
            verdict=_verdict_from_dict(rec.get("verdict")),
            new_keywords=rec["new_keywords"],
            new_docs=rec["new_docs"],
            wall_time_ms=dict(rec.get("wall_time_ms", {})),
            flags=list(rec.get("flags", [])),
            raw=rec.get("raw"),
        )
        for rec in d["iterations"]
    ]
    return RunTrace(
        question=d["question"],
        method=d.get("method", METHOD_ITERATIVE),
        iterations=iterations,
        stop_reason=d.get("stop_reason"),
        final_answer=d.get("final_answer", ""),
        early_stop=d.get("early_stop", True),
        error=d.get("error"),
    )
