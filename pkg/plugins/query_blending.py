import logging
from dataclasses import dataclass, field

from plugins.prompts import knowledge_lines
from plugins.retrieval import retrieve
from utils import gather_or_cancel

logger = logging.getLogger(__name__)

DELIMITER = "\n"


class QueryError(Exception):
    pass


class EmptyQuestion(QueryError):
    def __init__(self):
        super().__init__("question is empty")


@dataclass
class HopTrace:
    hop: int
    retrieval: object
    transcript: object
    truncated: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "hop": self.hop,
            "retrieval": self.retrieval.to_dict(),
            "transcript": self.transcript.to_dict(),
            "truncated": list(self.truncated),
        }


@dataclass
class QueryBundle:
    original: str
    external_aug: str | None = None
    internal_aug: str | None = None
    external_context: str | None = None
    internal_context: str | None = None
    hops: int = 1
    external_trace: list = field(default_factory=list)
    internal_transcript: object = None

    def queries(self) -> list:
        """Enabled (query_kind, text) pairs in fixed order."""
        pairs = [("original", self.original)]
        if self.external_aug is not None:
            pairs.append(("external_aug", self.external_aug))
        if self.internal_aug is not None:
            pairs.append(("internal_aug", self.internal_aug))
        return pairs

    @property
    def transcripts(self) -> list:
        out = [h.transcript for h in self.external_trace]
        if self.internal_transcript is not None:
            out.append(self.internal_transcript)
        return out

    def to_dict(self) -> dict:
        return {
            "original": self.original,
            "external_aug": self.external_aug,
            "internal_aug": self.internal_aug,
            "external_context": self.external_context,
            "internal_context": self.internal_context,
            "hops": self.hops,
            "delimiter": DELIMITER,
            "external_trace": [h.to_dict() for h in self.external_trace],
            "internal_transcript": self.internal_transcript.to_dict() if self.internal_transcript else None,
        }


def concat_query(context: str, q: str) -> str:
    """Context first, one newline, then the question."""
    if not q or not q.strip():
        raise EmptyQuestion()
    context = (context or "").rstrip()
    if not context:
        return q
    return f"{context}{DELIMITER}{q}"


async def external_augment(q: str, retriever, llm, prompts, k: int, hops: int = 1,
                           budget: int = 1200) -> tuple:
    """Retrieve, reason over the knowledge, re-query with the reasoning. `hops` rounds."""
    if not q or not q.strip():
        raise EmptyQuestion()
    if hops < 1 or k < 1:
        raise ValueError("hops and k must be >= 1")
    query = q
    answer = ""
    trace = []
    for hop in range(hops):
        rset = await retrieve(retriever, query, k, "original" if hop == 0 else "external_aug")
        block, truncated = knowledge_lines(rset.documents, budget)
        prompt = prompts.render("external_aug", knowledge=block, question=q)
        transcript = await llm.call(prompt, stage="external_aug")
        answer = transcript.response
        query = concat_query(answer, q)
        trace.append(HopTrace(hop, rset, transcript, truncated))
    return query, answer, trace


async def internal_augment(q: str, llm, prompts) -> tuple:
    if not q or not q.strip():
        raise EmptyQuestion()
    prompt = prompts.render("internal_aug", question=q)
    transcript = await llm.call(prompt, stage="internal_aug")
    return concat_query(transcript.response, q), transcript.response, transcript


async def build_bundle(q: str, config, retriever, llm, prompts) -> QueryBundle:
    if not q or not q.strip():
        raise EmptyQuestion()
    ablations = set(config.ablations)
    use_external = "no_q_ex" not in ablations
    use_internal = "no_q_in" not in ablations
    bundle = QueryBundle(original=q, hops=config.hops)

    async def _external():
        if use_external:
            return await external_augment(
                q, retriever, llm, prompts, config.k, config.hops, config.per_doc_char_budget
            )

    async def _internal():
        if use_internal:
            return await internal_augment(q, llm, prompts)

    external, internal = await gather_or_cancel(_external(), _internal())
    if external is not None:
        bundle.external_aug, bundle.external_context, bundle.external_trace = external
    if internal is not None:
        bundle.internal_aug, bundle.internal_context, bundle.internal_transcript = internal
    return bundle
