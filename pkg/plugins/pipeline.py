import os
import time
import asyncio
import logging
from dataclasses import dataclass, field

from info import ConfigError
from database.bm25_index import MANIFEST, build_index, load_index, save_index
from database.corpus_store import load_corpus
from database.records_db import RecordStore
from plugins.answer_generation import UNPARSED, sample_answers
from plugins.knowledge_filtering import POOL_ORDER_RULE, filter_all, union_direct, union_filtered
from plugins.llm_gateway import AuthFailure, ScriptedBackend, ScriptRule, make_gateway
from plugins.prompts import PromptSet
from plugins.query_blending import DELIMITER, QueryBundle, build_bundle, external_augment
from plugins.retrieval import EMPTY_QUERY, retrieve
from web.retriever_client import RemoteRetriever
from utils import gather_or_cancel

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────
# 🧩 DEPENDENCIES
# ─────────────────────────────────────────
@dataclass
class Deps:
    retriever: object
    gateway: object
    prompts: PromptSet
    content_hashes: dict = field(default_factory=dict)

    async def close(self):
        await self.gateway.close()
        if hasattr(self.retriever, "close"):
            await self.retriever.close()


def open_local_index(spec):
    """Saved index when index_dir holds one, else a fresh build from the corpus (saved when index_dir is set)."""
    corpus = load_corpus(spec.corpus_path) if spec.corpus_path else None
    if spec.index_dir and os.path.exists(os.path.join(spec.index_dir, MANIFEST)):
        return load_index(spec.index_dir, corpus, spec.k1, spec.b)
    if corpus is None:
        raise ConfigError(f"no saved index in {spec.index_dir} and no corpus to build one from")
    params = {name: value for name, value in (("k1", spec.k1), ("b", spec.b)) if value is not None}
    index = build_index(corpus, **params)
    if spec.index_dir:
        save_index(index, spec.index_dir)
    return index


async def build_deps(config, backend=None, check: bool = True) -> Deps:
    """Load prompts, open the retriever and the LLM backend for `config`."""
    prompts = PromptSet.load(config.prompts_dir, config.dataset_family)
    hashes = dict(prompts.hashes)
    if config.retriever.kind == "remote":
        retriever = RemoteRetriever(
            config.retriever.url,
            timeout=config.retriever.timeout,
            retries=config.retriever.retries,
            max_in_flight=config.retriever.max_in_flight,
        )
        if check:
            await retriever.ping()
    else:
        retriever = open_local_index(config.retriever)
        hashes["corpus"] = retriever.corpus_checksum
    gateway = make_gateway(config.llm, config.cache_dir if config.use_cache else None, backend)
    script_hash = getattr(gateway.backend, "script_hash", "")
    if script_hash:
        hashes["script"] = script_hash
    if check and hasattr(gateway.backend, "ping"):
        await gateway.backend.ping()
    return Deps(retriever, gateway, prompts, hashes)


# ─────────────────────────────────────────
# 🎥 PER-QUESTION RECORDING
# ─────────────────────────────────────────
class RecordingRetriever:
    def __init__(self, backend):
        self.backend = backend
        self.count = 0
        self.warnings = []
        self.sets = []

    async def retrieve(self, query_text: str, k: int, query_kind: str = "baseline"):
        self.count += 1
        rset = await retrieve(self.backend, query_text, k, query_kind)
        if rset.warning == EMPTY_QUERY:
            self.warnings.append({"kind": EMPTY_QUERY, "stage": query_kind, "detail": query_text[:80]})
        self.sets.append(rset)
        return rset


class RecordingGateway:
    def __init__(self, gateway):
        self.gateway = gateway
        self.count = 0
        self.transcripts = []

    async def call(self, prompt: str, stage: str, top_p: float | None = None):
        self.count += 1
        transcript = await self.gateway.call(prompt, stage, top_p=top_p)
        self.transcripts.append(transcript)
        return transcript


class StageClock:
    def __init__(self):
        self.timings = {}
        self.started = time.perf_counter()
        self._mark = self.started

    def lap(self, stage: str):
        now = time.perf_counter()
        self.timings[stage] = round(now - self._mark, 6)
        self._mark = now

    def finish(self) -> dict:
        self.timings["total"] = round(time.perf_counter() - self.started, 6)
        return self.timings


@dataclass
class RunRecord:
    qid: str
    question: str
    task_kind: str
    method: str
    config_fingerprint: str = ""
    status: str = "ok"
    error: str | None = None
    bundle: QueryBundle | None = None
    retrievals: list = field(default_factory=list)
    filters: list = field(default_factory=list)
    pool: object = None
    direct_pool: object = None
    answers: list = field(default_factory=list)
    calls: dict = field(default_factory=lambda: {"llm": 0, "retrieval": 0})
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    partial: dict | None = None
    recorders: tuple | None = field(default=None, repr=False, compare=False)

    def mark_failed(self, error: Exception):
        """Drop half-built stage results; keep what the recorders saw before the failure."""
        self.status = "failed"
        self.error = f"{type(error).__name__}: {error}"
        self.bundle, self.pool, self.direct_pool = None, None, None
        self.retrievals, self.filters, self.answers = [], [], []
        if self.recorders is None:
            return
        retr, llm = self.recorders
        self.calls = {"llm": llm.count, "retrieval": retr.count}
        self.warnings = list(retr.warnings)
        self.partial = {
            "retrievals": [r.to_dict() for r in retr.sets],
            "transcripts": [t.to_dict() for t in llm.transcripts],
        }

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "question": self.question,
            "task_kind": self.task_kind,
            "method": self.method,
            "config_fingerprint": self.config_fingerprint,
            "status": self.status,
            "error": self.error,
            "delimiter": DELIMITER,
            "pool_order": POOL_ORDER_RULE,
            "bundle": self.bundle.to_dict() if self.bundle else None,
            "retrievals": [r.to_dict() for r in self.retrievals],
            "filters": [f.to_dict() for f in self.filters],
            "pool": self.pool.to_dict() if self.pool is not None else None,
            "direct_pool": self.direct_pool.to_dict() if self.direct_pool is not None else None,
            "answers": [a.to_dict() for a in self.answers],
            "calls": dict(self.calls),
            "warnings": list(self.warnings),
            "timings": dict(self.timings),
            "partial": self.partial,
        }


def _collect_warnings(record: RunRecord, retr: RecordingRetriever):
    warnings = list(retr.warnings)
    if record.bundle is not None:
        for hop in record.bundle.external_trace:
            for doc_id in hop.truncated:
                warnings.append({"kind": "truncation", "stage": f"external_aug[{hop.hop}]", "detail": doc_id})
    for outcome in record.filters:
        if outcome.fallback_applied:
            warnings.append({"kind": "fallback", "stage": f"filter:{outcome.query_kind}", "detail": "kept all"})
        for doc_id in outcome.truncated:
            warnings.append({"kind": "truncation", "stage": f"filter:{outcome.query_kind}", "detail": doc_id})
    for answer in record.answers:
        stage = f"answer[top_p={answer.sampling[1]}]"
        for doc_id in answer.truncated:
            warnings.append({"kind": "truncation", "stage": stage, "detail": doc_id})
        if answer.extracted_answer == UNPARSED:
            warnings.append({"kind": "unparsed_answer", "stage": stage, "detail": answer.transcripts[-1].response[:80]})
    record.warnings = warnings


# ─────────────────────────────────────────
# 🔥 METHODS
# ─────────────────────────────────────────
async def run_blendfilter(example, config, deps: Deps, fingerprint: str = "",
                          record: RunRecord | None = None) -> RunRecord:
    record = record or RunRecord(example.qid, example.question, example.task_kind, "blendfilter", fingerprint)
    retr = RecordingRetriever(deps.retriever)
    llm = RecordingGateway(deps.gateway)
    record.recorders = (retr, llm)
    clock = StageClock()
    ablations = set(config.ablations)
    q = example.question

    bundle = await build_bundle(q, config, retr, llm, deps.prompts)
    record.bundle = bundle
    clock.lap("blending")

    # the first external hop already retrieved with q itself
    reused = bundle.external_trace[0].retrieval if bundle.external_trace else None
    queries = [(kind, text) for kind, text in bundle.queries() if not (kind == "original" and "no_q" in ablations)]

    async def _fetch(kind, text):
        if kind == "original" and reused is not None:
            return reused
        return await retr.retrieve(text, config.k, kind)

    record.retrievals = await gather_or_cancel(*(_fetch(kind, text) for kind, text in queries))
    clock.lap("retrieval")

    record.direct_pool = union_direct(record.retrievals)
    if "no_filter" in ablations:
        record.pool = record.direct_pool
    else:
        record.filters = await filter_all(
            q, record.retrievals, llm, deps.prompts, config.strategy, config.per_doc_char_budget
        )
        record.pool = union_filtered(record.filters, record.retrievals)
    clock.lap("filtering")

    record.answers = await sample_answers(
        q, record.pool, llm, deps.prompts, example.task_kind, config.sampling, config.per_doc_char_budget
    )
    clock.lap("answer")

    record.calls = {"llm": llm.count, "retrieval": retr.count}
    _collect_warnings(record, retr)
    record.timings = clock.finish()
    return record


async def run_baseline(example, config, deps: Deps, fingerprint: str = "",
                       record: RunRecord | None = None) -> RunRecord:
    method = config.method
    record = record or RunRecord(example.qid, example.question, example.task_kind, method, fingerprint)
    retr = RecordingRetriever(deps.retriever)
    llm = RecordingGateway(deps.gateway)
    record.recorders = (retr, llm)
    clock = StageClock()
    q = example.question
    mode = "direct" if method.startswith("direct") else "cot"
    pool = None

    if method == "retgen":
        bundle = QueryBundle(original=q, hops=config.hops)
        query = q
        if config.hops > 1:
            query, bundle.external_context, bundle.external_trace = await external_augment(
                q, retr, llm, deps.prompts, config.k, config.hops - 1, config.per_doc_char_budget
            )
            bundle.external_aug = query
        record.bundle = bundle
        clock.lap("blending")
        record.retrievals = [await retr.retrieve(query, config.k, "baseline")]
    elif method in ("direct_retrieval", "cot_retrieval"):
        record.retrievals = [await retr.retrieve(q, config.k, "baseline")]
    clock.lap("retrieval")

    if record.retrievals:
        pool = union_direct(record.retrievals)
        record.pool = record.direct_pool = pool

    record.answers = await sample_answers(
        q, pool, llm, deps.prompts, example.task_kind, config.sampling, config.per_doc_char_budget, mode
    )
    clock.lap("answer")

    record.calls = {"llm": llm.count, "retrieval": retr.count}
    _collect_warnings(record, retr)
    record.timings = clock.finish()
    return record


async def run_question(example, config, deps: Deps, fingerprint: str = "") -> dict:
    """One question, fail-soft: backend trouble marks the record failed."""
    runner = run_blendfilter if config.method == "blendfilter" else run_baseline
    record = RunRecord(example.qid, example.question, example.task_kind, config.method, fingerprint)
    try:
        await runner(example, config, deps, fingerprint, record)
    except (ConfigError, AuthFailure):
        raise
    except Exception as e:
        logger.warning(f"⚠️ Question {example.qid} failed: {e!r}")
        record.mark_failed(e)
    return record.to_dict()


# ─────────────────────────────────────────
# 📦 BATCH
# ─────────────────────────────────────────
@dataclass
class BatchSummary:
    total: int = 0
    skipped: int = 0
    ok: int = 0
    failed: int = 0
    llm_calls: int = 0
    retrievals: int = 0
    elapsed: float = 0.0
    fingerprint: str = ""
    out_path: str = ""


async def run_batch(dataset, config, deps: Deps, out_path: str, limit: int | None = None) -> BatchSummary:
    examples = list(dataset)[:limit] if limit else list(dataset)
    fingerprint = config.fingerprint(deps.content_hashes)
    store = RecordStore(out_path)
    await store.open(fingerprint, config.to_dict())
    done = store.completed_qids()
    todo = [ex for ex in examples if ex.qid not in done]
    summary = BatchSummary(total=len(examples), skipped=len(examples) - len(todo),
                           fingerprint=fingerprint, out_path=out_path)
    if summary.skipped:
        logger.info(f"Resuming {out_path}: {summary.skipped} questions already done")

    semaphore = asyncio.Semaphore(config.concurrency_limit)
    started = time.perf_counter()

    async def worker(example):
        async with semaphore:
            record = await run_question(example, config, deps, fingerprint)
        await store.append(record)
        if record["status"] == "ok":
            summary.ok += 1
        else:
            summary.failed += 1
        summary.llm_calls += record["calls"]["llm"]
        summary.retrievals += record["calls"]["retrieval"]

    await asyncio.gather(*(worker(ex) for ex in todo))
    summary.elapsed = time.perf_counter() - started
    return summary


# ─────────────────────────────────────────
# 🔁 REPLAY
# ─────────────────────────────────────────
def record_transcripts(record: dict) -> list:
    """Every (prompt, response) pair a record holds, in pipeline order."""
    out = []
    bundle = record.get("bundle") or {}
    out.extend(h["transcript"] for h in bundle.get("external_trace") or [])
    if bundle.get("internal_transcript"):
        out.append(bundle["internal_transcript"])
    for outcome in record.get("filters") or []:
        out.extend(outcome["transcripts"])
    for answer in record.get("answers") or []:
        out.extend(answer["transcripts"])
    # failed records keep only what finished before the error
    out.extend((record.get("partial") or {}).get("transcripts") or [])
    return out


def replay_backend(records) -> ScriptedBackend:
    """Scripted backend answering each recorded prompt with its recorded response."""
    backend = ScriptedBackend()
    seen = set()
    for record in records:
        for t in record_transcripts(record):
            if t["prompt"] in seen:
                continue
            seen.add(t["prompt"])
            backend.rules.append(ScriptRule(t["prompt"], t["response"], match="exact",
                                            finish_reason=t.get("finish_reason", "stop")))
    return backend
