import logging
from dataclasses import dataclass, field

from database.bm25_index import InvertedIndex, tokenize
from database.corpus_store import Document

logger = logging.getLogger(__name__)

QUERY_KINDS = ("original", "external_aug", "internal_aug", "baseline")
EMPTY_QUERY = "empty_query"


class RetrievalError(Exception):
    pass


class MalformedResponse(RetrievalError):
    pass


@dataclass(frozen=True)
class RetrievedDoc:
    document: Document
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {
            "doc_id": self.document.doc_id,
            "title": self.document.title,
            "score": self.score,
            "rank": self.rank,
        }


@dataclass
class RetrievedSet:
    query_kind: str
    query_text: str
    docs: list = field(default_factory=list)
    warning: str | None = None

    def __len__(self):
        return len(self.docs)

    @property
    def documents(self) -> list:
        return [rd.document for rd in self.docs]

    @property
    def doc_ids(self) -> list:
        return [rd.document.doc_id for rd in self.docs]

    @property
    def titles(self) -> list:
        return [rd.document.title for rd in self.docs]

    def to_dict(self) -> dict:
        return {
            "query_kind": self.query_kind,
            "query_text": self.query_text,
            "docs": [rd.to_dict() for rd in self.docs],
            "warning": self.warning,
        }


def local_retrieve(index: InvertedIndex, query_text: str, k: int, query_kind: str = "baseline") -> RetrievedSet:
    if not tokenize(query_text):
        logger.warning(f"⚠️ Query tokenizes to nothing, returning an empty set: {query_text[:60]!r}")
        return RetrievedSet(query_kind, query_text, [], warning=EMPTY_QUERY)
    docs = [
        RetrievedDoc(index.corpus.documents[internal_id], score, rank)
        for rank, (internal_id, score) in enumerate(index.search(query_text, k))
    ]
    return RetrievedSet(query_kind, query_text, docs)


async def retrieve(backend, query_text: str, k: int, query_kind: str = "baseline") -> RetrievedSet:
    """Top-k documents for a query from the local BM25 index or a remote retriever."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(backend, InvertedIndex):
        return local_retrieve(backend, query_text, k, query_kind)
    return await backend.retrieve(query_text, k, query_kind)
