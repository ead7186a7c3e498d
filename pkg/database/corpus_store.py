import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from utils import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

TASK_KINDS = ("extractive", "yes_no")


# ─────────────────────────────────────────
# ❗ ERRORS
# ─────────────────────────────────────────
class CorpusError(Exception):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateDocId(CorpusError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id {doc_id!r}")
        self.doc_id = doc_id


class DuplicateQid(CorpusError):
    def __init__(self, qid: str):
        super().__init__(f"duplicate qid {qid!r}")
        self.qid = qid


class EmptyCorpus(CorpusError):
    def __init__(self):
        super().__init__("corpus has no documents")


class UnknownDoc(CorpusError):
    def __init__(self, doc):
        super().__init__(f"unknown document {doc!r}")
        self.doc = doc


# ─────────────────────────────────────────
# 📄 TYPES
# ─────────────────────────────────────────
@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class QaExample:
    qid: str
    question: str
    gold_answers: tuple
    gold_titles: tuple = ()
    task_kind: str = "extractive"

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "question": self.question,
            "gold_answers": list(self.gold_answers),
            "gold_titles": list(self.gold_titles),
            "task_kind": self.task_kind,
        }


def title_key(title: str) -> str:
    """Retrieval metrics compare titles exactly after trimming."""
    return title.strip()


class Corpus:
    """Immutable knowledge base with lookup by doc_id and by title."""

    def __init__(self, documents):
        self.documents = list(documents)
        if not self.documents:
            raise EmptyCorpus()
        self.by_id = {}
        self.by_title = defaultdict(list)
        for doc in self.documents:
            if doc.doc_id in self.by_id:
                raise DuplicateDocId(doc.doc_id)
            self.by_id[doc.doc_id] = doc
            self.by_title[title_key(doc.title)].append(doc.doc_id)
        self.by_title = dict(self.by_title)
        self.checksum = sha256_hex("\n".join(canonical_json(d.to_dict()) for d in self.documents))

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def lookup(self, doc_id: str) -> Document:
        try:
            return self.by_id[doc_id]
        except KeyError:
            raise UnknownDoc(doc_id) from None

    def ids_for_title(self, title: str) -> list:
        return list(self.by_title.get(title_key(title), []))

    def has_title(self, title: str) -> bool:
        return title_key(title) in self.by_title


# ─────────────────────────────────────────
# 🧰 JSONL READING
# ─────────────────────────────────────────
def _iter_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON ({e.msg})") from None
            if not isinstance(record, dict):
                raise MalformedRecord(line_no, "record is not a JSON object")
            yield line_no, record


def _require_str(record, key, line_no, allow_empty=False):
    value = record.get(key)
    if not isinstance(value, str):
        raise MalformedRecord(line_no, f"missing or non-string {key!r}")
    if not allow_empty and not value.strip():
        raise MalformedRecord(line_no, f"empty {key!r}")
    return value


def _require_str_list(record, key, line_no, min_len=0):
    value = record.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise MalformedRecord(line_no, f"missing or non-string-list {key!r}")
    if len(value) < min_len:
        raise MalformedRecord(line_no, f"{key!r} needs at least {min_len} entries")
    return value


# ─────────────────────────────────────────
# 📚 CORPUS
# ─────────────────────────────────────────
def load_corpus(path) -> Corpus:
    documents = []
    seen = set()
    for line_no, record in _iter_jsonl(path):
        doc = Document(
            doc_id=_require_str(record, "doc_id", line_no),
            title=_require_str(record, "title", line_no),
            text=_require_str(record, "text", line_no),
        )
        if doc.doc_id in seen:
            raise DuplicateDocId(doc.doc_id)
        seen.add(doc.doc_id)
        documents.append(doc)
    if not documents:
        raise EmptyCorpus()
    corpus = Corpus(documents)
    logger.info(f"Loaded corpus {path}: {len(corpus)} documents, {len(corpus.by_title)} titles")
    return corpus


def dump_corpus(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc in corpus:
            f.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")


# ─────────────────────────────────────────
# ❓ DATASETS
# ─────────────────────────────────────────
@dataclass
class LoadSummary:
    n: int = 0
    unresolved_titles: int = 0
    without_gold_titles: int = 0
    unresolved: list = field(default_factory=list)


def load_dataset(path) -> list:
    examples = []
    seen = set()
    for line_no, record in _iter_jsonl(path):
        qid = _require_str(record, "qid", line_no)
        question = _require_str(record, "question", line_no)
        gold_answers = _require_str_list(record, "gold_answers", line_no, min_len=1)
        gold_titles = _require_str_list(record, "gold_titles", line_no) if "gold_titles" in record else []
        task_kind = record.get("task_kind", "extractive")
        if task_kind not in TASK_KINDS:
            raise MalformedRecord(line_no, f"task_kind must be one of {TASK_KINDS}")
        if task_kind == "yes_no" and any(a.strip().casefold() not in ("yes", "no") for a in gold_answers):
            raise MalformedRecord(line_no, "yes_no gold answers must be 'yes' or 'no'")
        if qid in seen:
            raise DuplicateQid(qid)
        seen.add(qid)
        examples.append(QaExample(qid, question, tuple(gold_answers), tuple(gold_titles), task_kind))
    logger.info(f"Loaded dataset {path}: {len(examples)} questions")
    return examples


def summarize_dataset(examples, corpus: Corpus | None) -> LoadSummary:
    """Count gold titles the corpus cannot resolve; examples are never dropped."""
    summary = LoadSummary(n=len(examples))
    for ex in examples:
        if not ex.gold_titles:
            summary.without_gold_titles += 1
            continue
        if corpus is None:
            continue
        for title in ex.gold_titles:
            if not corpus.has_title(title):
                summary.unresolved_titles += 1
                summary.unresolved.append((ex.qid, title))
    if summary.unresolved_titles:
        logger.warning(f"⚠️ {summary.unresolved_titles} gold titles do not resolve in the corpus")
    return summary
