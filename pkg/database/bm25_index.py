import os
import re
import json
import math
import logging
from collections import Counter
from dataclasses import dataclass, field

from database.corpus_store import Corpus, Document, EmptyCorpus, UnknownDoc
from utils import atomic_write_text_sync

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 2
MANIFEST = "manifest.json"
POSTINGS = "postings.json"
DOC_TABLE = "doctable.json"


class IndexStoreError(Exception):
    pass


class StaleIndex(IndexStoreError):
    """Index on disk was built from a different corpus."""


class IndexFormatError(IndexStoreError):
    pass


# ─────────────────────────────────────────
# 🧠 TOKENIZER
# ─────────────────────────────────────────
TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list:
    """Case-folded alphanumeric runs; no stemming, no stopwords."""
    return TOKEN_RE.findall(text.casefold())


def unique_terms(terms) -> list:
    return list(dict.fromkeys(terms))


# ─────────────────────────────────────────
# 🗂 INVERTED INDEX
# ─────────────────────────────────────────
@dataclass
class InvertedIndex:
    postings: dict
    doc_lengths: list
    avg_doc_length: float
    doc_count: int
    k1: float = 1.2
    b: float = 0.75
    doc_ids: list = field(default_factory=list)
    corpus_checksum: str = ""
    corpus: Corpus | None = None

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1 + (self.doc_count - df + 0.5) / (df + 0.5))

    def term_score(self, idf: float, tf: int, dl: int) -> float:
        k1, b = self.k1, self.b
        return idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / self.avg_doc_length))

    def search(self, query_text: str, k: int) -> list:
        """Top-k (internal_id, score) pairs; zero-score docs are never returned."""
        terms = unique_terms(tokenize(query_text))
        scores = {}
        for term in terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc, tf in plist:
                scores[doc] = scores.get(doc, 0.0) + self.term_score(idf, tf, self.doc_lengths[doc])
        ranked = sorted(((d, s) for d, s in scores.items() if s > 0), key=lambda x: (-x[1], x[0]))
        return ranked[:k]


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    if corpus is None or len(corpus) == 0:
        raise EmptyCorpus()
    postings = {}
    doc_lengths = []
    for internal_id, doc in enumerate(corpus):
        terms = tokenize(doc.title + " " + doc.text)
        doc_lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((internal_id, tf))
    doc_count = len(doc_lengths)
    index = InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=sum(doc_lengths) / doc_count,
        doc_count=doc_count,
        k1=k1,
        b=b,
        doc_ids=[doc.doc_id for doc in corpus],
        corpus_checksum=corpus.checksum,
        corpus=corpus,
    )
    logger.info(f"Built BM25 index: {doc_count} docs, {len(postings)} terms, avgdl={index.avg_doc_length:.2f}")
    return index


def bm25_score(index: InvertedIndex, query_terms, doc: int) -> float:
    if not isinstance(doc, int) or not 0 <= doc < index.doc_count:
        raise UnknownDoc(doc)
    dl = index.doc_lengths[doc]
    score = 0.0
    for term in unique_terms(query_terms):
        for d, tf in index.postings.get(term, ()):
            if d == doc:
                score += index.term_score(index.idf(term), tf, dl)
                break
    return score


# ─────────────────────────────────────────
# 💾 PERSISTENCE
# ─────────────────────────────────────────
def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def save_index(index: InvertedIndex, directory: str):
    """Deterministic layout: identical inputs give byte-identical files."""
    os.makedirs(directory, exist_ok=True)
    postings = {term: [[d, tf] for d, tf in plist] for term, plist in index.postings.items()}
    atomic_write_text_sync(os.path.join(directory, POSTINGS), _dumps(postings))
    documents = list(index.corpus) if index.corpus is not None else []
    atomic_write_text_sync(
        os.path.join(directory, DOC_TABLE),
        _dumps({
            "doc_ids": index.doc_ids,
            "doc_lengths": index.doc_lengths,
            "titles": [d.title for d in documents],
            "texts": [d.text for d in documents],
        }),
    )
    manifest = {
        "format_version": INDEX_FORMAT_VERSION,
        "k1": index.k1,
        "b": index.b,
        "corpus_checksum": index.corpus_checksum,
        "doc_count": index.doc_count,
        "term_count": len(index.postings),
        "files": [POSTINGS, DOC_TABLE],
    }
    atomic_write_text_sync(os.path.join(directory, MANIFEST), _dumps(manifest))
    logger.info(f"Index saved to {directory}")


def read_manifest(directory: str) -> dict:
    try:
        with open(os.path.join(directory, MANIFEST), encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise IndexFormatError(f"no {MANIFEST} in {directory}") from None
    except json.JSONDecodeError as e:
        raise IndexFormatError(f"corrupt manifest in {directory}: {e}") from None


def _table_corpus(directory: str, table: dict) -> Corpus:
    titles, texts = table.get("titles"), table.get("texts")
    if titles is None or texts is None or not len(titles) == len(texts) == len(table["doc_ids"]):
        raise IndexFormatError(f"doc table in {directory} holds no documents; pass the corpus")
    return Corpus(Document(i, t, x) for i, t, x in zip(table["doc_ids"], titles, texts))


def load_index(directory: str, corpus: Corpus | None = None,
               k1: float | None = None, b: float | None = None) -> InvertedIndex:
    """Saved index; documents come from `corpus` when given, else from the doc table.

    Asking for k1/b other than the ones the index was built with raises StaleIndex.
    """
    manifest = read_manifest(directory)
    if manifest.get("format_version") != INDEX_FORMAT_VERSION:
        raise IndexFormatError(f"index format {manifest.get('format_version')} != {INDEX_FORMAT_VERSION}")
    if corpus is not None and manifest.get("corpus_checksum") != corpus.checksum:
        raise StaleIndex(f"index in {directory} was built from a different corpus; rebuild it")
    for name, wanted in (("k1", k1), ("b", b)):
        if wanted is not None and float(wanted) != float(manifest[name]):
            raise StaleIndex(
                f"index in {directory} was built with {name}={manifest[name]}, {name}={wanted} requested; rebuild it"
            )
    try:
        with open(os.path.join(directory, POSTINGS), encoding="utf-8") as f:
            raw_postings = json.load(f)
        with open(os.path.join(directory, DOC_TABLE), encoding="utf-8") as f:
            table = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IndexFormatError(f"cannot read index files in {directory}: {e}") from None
    if corpus is None:
        corpus = _table_corpus(directory, table)
        if corpus.checksum != manifest.get("corpus_checksum"):
            raise StaleIndex(f"doc table in {directory} does not match its manifest")
    doc_lengths = table["doc_lengths"]
    if len(doc_lengths) != manifest["doc_count"] or table["doc_ids"] != [d.doc_id for d in corpus]:
        raise StaleIndex(f"doc table in {directory} does not match the corpus")
    postings = {term: [(d, tf) for d, tf in plist] for term, plist in raw_postings.items()}
    return InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=sum(doc_lengths) / len(doc_lengths),
        doc_count=manifest["doc_count"],
        k1=manifest["k1"],
        b=manifest["b"],
        doc_ids=table["doc_ids"],
        corpus_checksum=manifest["corpus_checksum"],
        corpus=corpus,
    )
