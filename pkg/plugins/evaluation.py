import re
import string
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, asdict

from database.corpus_store import load_dataset, title_key
from database.records_db import load_records

logger = logging.getLogger(__name__)

ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
RETRIEVAL_STAGES = ("pool", "direct_union", "original", "external_aug", "internal_aug", "baseline")
REPORT_LABELS = {
    "normalization": "squad (lowercase, punctuation, articles, whitespace)",
    "averaging": "macro (per question, then mean)",
}


class EvaluationError(Exception):
    pass


class UnknownQid(EvaluationError):
    def __init__(self, qid):
        super().__init__(f"record qid {qid!r} is not in the dataset")
        self.qid = qid


class EmptyRecords(EvaluationError):
    def __init__(self, path=""):
        super().__init__(f"no run records in {path}".strip())


# ─────────────────────────────────────────
# 📏 ANSWER METRICS
# ─────────────────────────────────────────
def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def normalize_answer(s: str) -> str:
    s = (s or "").lower()
    s = "".join(ch for ch in s if not _is_punct(ch))
    s = ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, golds) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_tokens: list, gold_tokens: list) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds) -> float:
    pred_tokens = normalize_answer(pred).split()
    return max(_f1(pred_tokens, normalize_answer(g).split()) for g in golds)


# ─────────────────────────────────────────
# 🔎 RETRIEVAL METRICS
# ─────────────────────────────────────────
def retrieval_metrics(retrieved_titles, gold_titles) -> tuple:
    """(recall, precision, s_precision) for one question; gold must be non-empty."""
    retrieved = {title_key(t) for t in retrieved_titles}
    gold = {title_key(t) for t in gold_titles}
    if not gold:
        raise ValueError("gold_titles must be non-empty")
    hit = len(retrieved & gold)
    recall = hit / len(gold)
    precision = hit / len(retrieved) if retrieved else 0.0
    return recall, precision, float(retrieved == gold)


def _answer_of(record) -> str:
    if isinstance(record, dict):
        return record.get("extracted_answer", "")
    if isinstance(record, str):
        return record
    return record.extracted_answer


def aggregate_best_of_n(records, golds) -> tuple:
    """Best sample wins: EM is 1 if any sample is right, F1 is the highest."""
    records = list(records)
    if not records:
        raise ValueError("need at least one sample")
    answers = [_answer_of(r) for r in records]
    return max(exact_match(a, golds) for a in answers), max(token_f1(a, golds) for a in answers)


# ─────────────────────────────────────────
# 📊 REPORT
# ─────────────────────────────────────────
@dataclass
class ReportOptions:
    retrieval_stage: str = "pool"


@dataclass
class MetricsReport:
    n: int = 0
    em: float = 0.0
    f1: float = 0.0
    accuracy: float | None = None
    recall: float = 0.0
    precision: float = 0.0
    s_precision: float = 0.0
    fallback_rate: float = 0.0
    failed: int = 0
    without_gold_titles: int = 0
    retrieval_stage: str = "pool"
    per_sampling: list = field(default_factory=list)
    per_question: list = field(default_factory=list)
    labels: dict = field(default_factory=lambda: dict(REPORT_LABELS))

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def stage_titles(record: dict, stage: str) -> list | None:
    """Titles a record retrieved at `stage`; None if the stage never ran."""
    if stage == "pool":
        pool = record.get("pool")
        return pool["titles"] if pool else ([] if record.get("status") == "failed" else None)
    if stage == "direct_union":
        pool = record.get("direct_pool")
        return pool["titles"] if pool else None
    for rset in record.get("retrievals") or []:
        if rset["query_kind"] == stage:
            return [d["title"] for d in rset["docs"]]
    return None


def fallback_fired(record: dict) -> bool:
    return any(f.get("fallback_applied") for f in record.get("filters") or [])


def evaluate(records, examples, options: ReportOptions | None = None) -> MetricsReport:
    options = options or ReportOptions()
    if options.retrieval_stage not in RETRIEVAL_STAGES:
        raise EvaluationError(f"unknown retrieval stage {options.retrieval_stage!r}")
    records = list(records)
    if not records:
        raise EmptyRecords()
    by_qid = {ex.qid: ex for ex in examples}
    report = MetricsReport(n=len(records), retrieval_stage=options.retrieval_stage)
    yes_no_em = []
    retrieval_rows = []
    sample_rows = {}

    for record in records:
        qid = record.get("qid")
        example = by_qid.get(qid)
        if example is None:
            raise UnknownQid(qid)
        answers = record.get("answers") or []
        row = {"qid": qid, "status": record.get("status", "ok"), "task_kind": example.task_kind}
        if answers:
            em, f1 = aggregate_best_of_n(answers, example.gold_answers)
        else:
            em, f1 = 0, 0.0
        if row["status"] != "ok":
            report.failed += 1
        row["em"], row["f1"] = em, f1
        row["predictions"] = [a.get("extracted_answer", "") for a in answers]
        for i, answer in enumerate(answers):
            top_p = answer.get("sampling", {}).get("top_p")
            cell = sample_rows.setdefault(i, {"top_p": top_p, "em": [], "f1": []})
            cell["em"].append(exact_match(answer.get("extracted_answer", ""), example.gold_answers))
            cell["f1"].append(token_f1(answer.get("extracted_answer", ""), example.gold_answers))
        if example.task_kind == "yes_no":
            yes_no_em.append(em)

        row["fallback"] = fallback_fired(record)
        titles = stage_titles(record, options.retrieval_stage)
        if not example.gold_titles:
            report.without_gold_titles += 1
            row["recall"] = row["precision"] = row["s_precision"] = None
        elif titles is None:
            row["recall"] = row["precision"] = row["s_precision"] = None
        else:
            row["recall"], row["precision"], row["s_precision"] = retrieval_metrics(titles, example.gold_titles)
            retrieval_rows.append(row)
        report.per_question.append(row)

    rows = report.per_question
    report.em = _mean(r["em"] for r in rows)
    report.f1 = _mean(r["f1"] for r in rows)
    report.accuracy = _mean(yes_no_em) if yes_no_em else None
    report.recall = _mean(r["recall"] for r in retrieval_rows)
    report.precision = _mean(r["precision"] for r in retrieval_rows)
    report.s_precision = _mean(r["s_precision"] for r in retrieval_rows)
    report.fallback_rate = _mean(float(r["fallback"]) for r in rows)
    report.per_sampling = [
        {"top_p": cell["top_p"], "em": _mean(cell["em"]), "f1": _mean(cell["f1"]), "n": len(cell["em"])}
        for _, cell in sorted(sample_rows.items())
    ]
    return report


def report(records_path: str, dataset_path: str, options: ReportOptions | None = None) -> MetricsReport:
    _, records = load_records(records_path)
    if not records:
        raise EmptyRecords(records_path)
    examples = load_dataset(dataset_path)
    result = evaluate(records, examples, options)
    logger.info(f"Evaluated {result.n} records from {records_path}: EM={result.em:.3f} F1={result.f1:.3f}")
    return result


def retrieval_table(records, examples) -> dict:
    """Recall/Precision/S-Precision for every stage present in the records."""
    table = {}
    for stage in RETRIEVAL_STAGES:
        result = evaluate(records, examples, ReportOptions(retrieval_stage=stage))
        scored = [r for r in result.per_question if r["recall"] is not None]
        if scored:
            table[stage] = {
                "n": len(scored),
                "recall": result.recall,
                "precision": result.precision,
                "s_precision": result.s_precision,
            }
    return table
