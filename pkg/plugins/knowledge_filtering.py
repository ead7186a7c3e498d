import re
import logging
from dataclasses import dataclass, field

from plugins.prompts import numbered_knowledge
from utils import gather_or_cancel

logger = logging.getLogger(__name__)

# Union order: first contributing kind wins, then rank within that set.
KIND_ORDER = ("original", "external_aug", "internal_aug", "baseline")
POOL_ORDER_RULE = "first_kind(original>external_aug>internal_aug),rank"

# standalone integers or "knowledge N"; digits inside words ("2nd") do not count
ID_RE = re.compile(r"knowledge\s*(\d+)\b|\b(\d+)\b", re.IGNORECASE)
NO_RELEVANCE_RE = re.compile(r"none|no relevant", re.IGNORECASE)

STAGES = {
    "two_stage_topic": ("filter_topic", "filter_discuss", "filter_ids"),
    "single_stage": ("filter_discuss_single", "filter_ids_single"),
}


class FilterError(Exception):
    pass


class MisalignedInputs(FilterError):
    pass


@dataclass
class FilterOutcome:
    query_kind: str
    input_docs: list
    kept_indices: set = field(default_factory=set)
    transcripts: list = field(default_factory=list)
    fallback_applied: bool = False
    strategy: str = "two_stage_topic"
    truncated: list = field(default_factory=list)

    @property
    def kept_doc_ids(self) -> list:
        return [self.input_docs[i] for i in sorted(self.kept_indices)]

    def to_dict(self) -> dict:
        return {
            "query_kind": self.query_kind,
            "strategy": self.strategy,
            "input_docs": list(self.input_docs),
            "kept_indices": sorted(self.kept_indices),
            "fallback_applied": self.fallback_applied,
            "transcripts": [t.to_dict() for t in self.transcripts],
            "truncated": list(self.truncated),
        }


@dataclass
class KnowledgePool:
    docs: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.docs)

    @property
    def documents(self) -> list:
        return list(self.docs)

    @property
    def doc_ids(self) -> list:
        return [d.doc_id for d in self.docs]

    @property
    def titles(self) -> list:
        return [d.title for d in self.docs]

    def to_dict(self) -> dict:
        return {
            "doc_ids": self.doc_ids,
            "titles": self.titles,
            "provenance": {k: sorted(v, key=KIND_ORDER.index) for k, v in self.provenance.items()},
            "order": POOL_ORDER_RULE,
        }


def _id_value(digits: str, m: int):
    """Digit run as an index below m, or None. Long runs never reach int()."""
    digits = digits.lstrip("0") or "0"
    if len(digits) > len(str(m)):
        return None
    try:
        value = int(digits)
    except ValueError:
        return None
    return value if value < m else None


def parse_kept_ids(raw: str, m: int) -> tuple:
    """Ids the filter kept, plus whether the keep-everything fallback fired. Never raises."""
    if m < 1:
        return set(), False
    text = raw or ""
    found = [a or b for a, b in ID_RE.findall(text)]
    if found:
        values = (_id_value(n, m) for n in found)
        return {v for v in values if v is not None}, False
    if NO_RELEVANCE_RE.search(text):
        return set(), False
    return set(range(m)), True


async def filter_set(q: str, rset, llm, prompts, strategy: str = "two_stage_topic",
                     budget: int = 1200) -> FilterOutcome:
    if strategy not in STAGES:
        raise FilterError(f"unknown filter strategy {strategy!r}")
    outcome = FilterOutcome(rset.query_kind, rset.doc_ids, strategy=strategy)
    m = len(rset)
    if m == 0:
        return outcome

    knowledge, outcome.truncated = numbered_knowledge(rset.documents, budget)
    max_id = m - 1
    if strategy == "two_stage_topic":
        topic_t = await llm.call(prompts.render("filter_topic", question=q), stage="filter_topic")
        topic = topic_t.response.strip().rstrip(".").strip() or q
        discuss_t = await llm.call(
            prompts.render("filter_discuss", topic=topic, knowledge=knowledge, question=q, max_id=max_id),
            stage="filter_discuss",
        )
        ids_t = await llm.call(
            prompts.render("filter_ids", context=discuss_t.response.strip(), question=q,
                           knowledge=knowledge, max_id=max_id),
            stage="filter_ids",
        )
        outcome.transcripts = [topic_t, discuss_t, ids_t]
    else:
        discuss_t = await llm.call(
            prompts.render("filter_discuss_single", question=q, knowledge=knowledge, max_id=max_id),
            stage="filter_discuss",
        )
        ids_t = await llm.call(
            prompts.render("filter_ids_single", context=discuss_t.response.strip(), question=q,
                           knowledge=knowledge, max_id=max_id),
            stage="filter_ids",
        )
        outcome.transcripts = [discuss_t, ids_t]

    outcome.kept_indices, outcome.fallback_applied = parse_kept_ids(ids_t.response, m)
    if outcome.fallback_applied:
        logger.warning(f"⚠️ Filter output for {rset.query_kind} had no ids, keeping all {m} docs")
    return outcome


async def filter_all(q: str, rsets, llm, prompts, strategy: str, budget: int = 1200) -> list:
    """One independent filter per retrieved set; sets never see each other's documents."""
    return await gather_or_cancel(*(filter_set(q, r, llm, prompts, strategy, budget) for r in rsets))


def _union(pairs) -> KnowledgePool:
    pool = KnowledgePool()
    seen = {}
    for rset, kept in sorted(pairs, key=lambda p: KIND_ORDER.index(p[0].query_kind)):
        for i in sorted(kept):
            doc = rset.docs[i].document
            if doc.doc_id not in seen:
                seen[doc.doc_id] = doc
                pool.docs.append(doc)
                pool.provenance[doc.doc_id] = set()
            pool.provenance[doc.doc_id].add(rset.query_kind)
    return pool


def union_filtered(outcomes, rsets) -> KnowledgePool:
    outcomes, rsets = list(outcomes), list(rsets)
    if len(outcomes) != len(rsets):
        raise MisalignedInputs(f"{len(outcomes)} outcomes for {len(rsets)} retrieved sets")
    by_kind = {}
    for rset in rsets:
        if rset.query_kind in by_kind:
            raise MisalignedInputs(f"two retrieved sets for {rset.query_kind}")
        by_kind[rset.query_kind] = rset
    pairs = []
    for outcome in outcomes:
        rset = by_kind.get(outcome.query_kind)
        if rset is None or rset.doc_ids != list(outcome.input_docs):
            raise MisalignedInputs(f"no retrieved set matches the {outcome.query_kind} outcome")
        if any(not 0 <= i < len(rset) for i in outcome.kept_indices):
            raise MisalignedInputs(f"{outcome.query_kind} outcome keeps an index outside its set")
        pairs.append((rset, outcome.kept_indices))
    return _union(pairs)


def union_direct(rsets) -> KnowledgePool:
    rsets = list(rsets)
    kinds = [r.query_kind for r in rsets]
    if len(set(kinds)) != len(kinds):
        raise MisalignedInputs("two retrieved sets share a query kind")
    return _union([(r, set(range(len(r)))) for r in rsets])
