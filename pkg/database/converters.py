import json
import logging

from database.corpus_store import CorpusError, Document, QaExample

logger = logging.getLogger(__name__)

RAW_FORMATS = ("hotpotqa", "2wiki", "strategyqa")


class ConversionError(CorpusError):
    pass


def read_raw(path: str) -> list:
    """JSON array or JSON-lines; both shapes appear in the upstream releases."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped[0] == "[":
        return json.loads(stripped)
    items = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                items.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConversionError(f"{path} line {line_no}: {e.msg}") from None
    return items


def _supporting_titles(item) -> tuple:
    facts = item.get("supporting_facts") or []
    # datasets-library layout: {"title": [...], "sent_id": [...]}
    if isinstance(facts, dict):
        titles = [t for t in facts.get("title") or [] if t]
    else:
        titles = [fact[0] for fact in facts if fact]
    return tuple(dict.fromkeys(t.strip() for t in titles))


def _context_paragraphs(item):
    context = item.get("context") or []
    # datasets-library layout: {"title": [...], "sentences": [[...]]}
    if isinstance(context, dict):
        yield from zip(context.get("title", []), context.get("sentences", []))
        return
    for entry in context:
        if len(entry) == 2:
            yield entry[0], entry[1]


def convert_multihop(item, task_kind_from_answer: bool = True) -> QaExample:
    qid = str(item.get("_id") or item.get("id") or "")
    question = item.get("question")
    answer = item.get("answer")
    if not qid or not question or answer is None:
        raise ConversionError(f"record {qid or '?'} lacks _id, question or answer")
    answer = str(answer).strip()
    aliases = [a for a in item.get("answer_aliases") or [] if a]
    task_kind = "yes_no" if task_kind_from_answer and answer.lower() in ("yes", "no") else "extractive"
    golds = (answer.lower(),) if task_kind == "yes_no" else tuple(dict.fromkeys([answer, *aliases]))
    return QaExample(qid, question, golds, _supporting_titles(item), task_kind)


def convert_strategyqa(item) -> QaExample:
    qid = str(item.get("qid") or "")
    question = item.get("question")
    answer = item.get("answer")
    if not qid or not question or not isinstance(answer, bool):
        raise ConversionError(f"record {qid or '?'} lacks qid, question or a boolean answer")
    return QaExample(qid, question, ("yes" if answer else "no",), (), "yes_no")


def convert_dataset(raw_format: str, items) -> list:
    if raw_format not in RAW_FORMATS:
        raise ConversionError(f"unknown raw format {raw_format!r} (choose from {', '.join(RAW_FORMATS)})")
    converter = convert_strategyqa if raw_format == "strategyqa" else convert_multihop
    examples = [converter(item) for item in items]
    logger.info(f"Converted {len(examples)} {raw_format} records")
    return examples


def context_corpus(items) -> list:
    """Paragraphs shipped inside multi-hop records, one Document per distinct title."""
    docs = {}
    for item in items:
        for title, sentences in _context_paragraphs(item):
            title = str(title).strip()
            if not title or title in docs:
                continue
            if isinstance(sentences, list):
                text = " ".join(s.strip() for s in sentences if s.strip())
            else:
                text = str(sentences)
            if text.strip():
                docs[title] = Document(f"d{len(docs)}", title, text.strip())
    return list(docs.values())


def write_jsonl(path: str, rows):
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count
