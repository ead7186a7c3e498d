import asyncio
import logging

import aiohttp

from database.corpus_store import Document
from plugins.retrieval import EMPTY_QUERY, MalformedResponse, RetrievedDoc, RetrievedSet
from database.bm25_index import tokenize
from utils import BackendUnavailable, backoff_delay

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class RemoteRetriever:
    """Client for `POST /retrieve` → `{"documents": [...]}` retrievers (e.g. a ColBERT server)."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 max_in_flight: int = 8, backoff: float = 0.5):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = aiohttp.ClientTimeout(total=timeout)
        self.retries = retries
        self.backoff = backoff
        self.semaphore = asyncio.Semaphore(max_in_flight)
        self.session: aiohttp.ClientSession | None = None

    @property
    def url(self) -> str:
        if self.endpoint.endswith("/retrieve"):
            return self.endpoint
        return f"{self.endpoint}/retrieve"

    async def _session(self) -> aiohttp.ClientSession:
        if self.session is None or self.session.closed:
            self.session = aiohttp.ClientSession(timeout=self.timeout)
        return self.session

    async def close(self):
        if self.session and not self.session.closed:
            await self.session.close()

    async def _post(self, payload: dict) -> dict:
        session = await self._session()
        last_error = None
        for attempt in range(self.retries + 1):
            retry_after = None
            try:
                async with self.semaphore:
                    async with session.post(self.url, json=payload) as resp:
                        if resp.status == 200:
                            try:
                                return await resp.json(content_type=None)
                            except ValueError as e:
                                raise MalformedResponse(f"response is not JSON: {e}") from None
                        if resp.status not in RETRYABLE_STATUS:
                            body = await resp.text()
                            raise BackendUnavailable(f"retriever returned HTTP {resp.status}: {body[:200]}")
                        retry_after = resp.headers.get("Retry-After")
                        last_error = f"HTTP {resp.status}"
            except (aiohttp.ClientError, asyncio.TimeoutError) as e:
                last_error = repr(e)
            if attempt < self.retries:
                delay = backoff_delay(attempt, self.backoff, retry_after)
                logger.warning(f"⚠️ Retriever {last_error}, retry {attempt + 1}/{self.retries} in {delay:.2f}s")
                await asyncio.sleep(delay)
        raise BackendUnavailable(f"retriever {self.url} unavailable after {self.retries} retries: {last_error}")

    async def retrieve(self, query_text: str, k: int, query_kind: str = "baseline") -> RetrievedSet:
        if not tokenize(query_text):
            logger.warning("⚠️ Query tokenizes to nothing, skipping remote call")
            return RetrievedSet(query_kind, query_text, [], warning=EMPTY_QUERY)
        payload = await self._post({"query": query_text, "k": k})
        return RetrievedSet(query_kind, query_text, parse_documents(payload, k))

    async def ping(self):
        """Startup check; raises BackendUnavailable if the endpoint is down."""
        await self._post({"query": "ping", "k": 1})


def parse_documents(payload, k: int) -> list:
    if not isinstance(payload, dict) or not isinstance(payload.get("documents"), list):
        raise MalformedResponse("response has no 'documents' list")
    docs = []
    seen = set()
    last_score = None
    for rank, item in enumerate(payload["documents"][:k]):
        if not isinstance(item, dict):
            raise MalformedResponse(f"document {rank} is not an object")
        try:
            doc_id, title, text = item["doc_id"], item["title"], item["text"]
            score = float(item["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedResponse(f"document {rank} is missing a field: {e}") from None
        if not all(isinstance(v, str) for v in (doc_id, title, text)):
            raise MalformedResponse(f"document {rank} has non-string fields")
        if doc_id in seen:
            raise MalformedResponse(f"duplicate doc_id {doc_id!r}")
        if last_score is not None and score > last_score:
            raise MalformedResponse("documents are not in descending-score order")
        seen.add(doc_id)
        last_score = score
        docs.append(RetrievedDoc(Document(str(doc_id), title, text), score, rank))
    return docs
