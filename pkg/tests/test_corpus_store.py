import json

import pytest

from database.corpus_store import (
    Corpus, Document, DuplicateDocId, DuplicateQid, EmptyCorpus, MalformedRecord, UnknownDoc,
    dump_corpus, load_corpus, load_dataset, summarize_dataset,
)


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return str(path)


def test_load_three_documents(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [
        {"doc_id": "a", "title": "Alpha", "text": "first"},
        {"doc_id": "b", "title": "Beta", "text": "second"},
        {"doc_id": "c", "title": "Gamma", "text": "third"},
    ])
    corpus = load_corpus(path)
    assert len(corpus) == 3
    assert corpus.lookup("b").title == "Beta"


def test_duplicate_doc_id_rejected(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [
        {"doc_id": "a", "title": "Alpha", "text": "first"},
        {"doc_id": "a", "title": "Other", "text": "second"},
    ])
    with pytest.raises(DuplicateDocId) as err:
        load_corpus(path)
    assert err.value.doc_id == "a"


def test_empty_file_is_empty_corpus(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(EmptyCorpus):
        load_corpus(str(path))


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"doc_id": "a", "title": "A", "text": "x"}\n{not json\n', encoding="utf-8")
    with pytest.raises(MalformedRecord) as err:
        load_corpus(str(path))
    assert err.value.line_no == 2


def test_missing_text_is_malformed(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [{"doc_id": "a", "title": "A"}])
    with pytest.raises(MalformedRecord):
        load_corpus(path)


def test_title_multimap_allows_ties():
    corpus = Corpus([Document("a", "Same", "x"), Document("b", "Same ", "y")])
    assert corpus.ids_for_title("Same") == ["a", "b"]


def test_unknown_doc():
    corpus = Corpus([Document("a", "A", "x")])
    with pytest.raises(UnknownDoc):
        corpus.lookup("zzz")


def test_round_trip_is_lossless(tmp_path, corpus_path):
    corpus = load_corpus(corpus_path)
    out = tmp_path / "out.jsonl"
    dump_corpus(corpus, str(out))
    original = [json.loads(line) for line in open(corpus_path, encoding="utf-8")]
    written = [json.loads(line) for line in open(out, encoding="utf-8")]
    assert original == written
    assert load_corpus(str(out)).checksum == corpus.checksum


def test_load_yes_no_record(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        {"qid": "q1", "question": "Is it?", "gold_answers": ["no"], "task_kind": "yes_no"},
    ])
    (example,) = load_dataset(path)
    assert example.task_kind == "yes_no"
    assert example.gold_answers == ("no",)
    assert example.gold_titles == ()


def test_missing_gold_answers_is_malformed(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [{"qid": "q1", "question": "Is it?"}])
    with pytest.raises(MalformedRecord):
        load_dataset(path)


def test_yes_no_gold_must_be_yes_or_no(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        {"qid": "q1", "question": "Is it?", "gold_answers": ["maybe"], "task_kind": "yes_no"},
    ])
    with pytest.raises(MalformedRecord):
        load_dataset(path)


def test_duplicate_qid(tmp_path):
    row = {"qid": "q1", "question": "Why?", "gold_answers": ["x"]}
    path = write_lines(tmp_path / "d.jsonl", [row, row])
    with pytest.raises(DuplicateQid):
        load_dataset(path)


def test_gold_titles_carried(toy_examples):
    q1 = toy_examples[0]
    assert q1.gold_titles == ("SuperMansion", "Jillian Bell")
    assert [ex.qid for ex in toy_examples] == ["q1", "q2", "q3", "q4"]


def test_unresolved_titles_counted_not_dropped(toy_corpus, toy_examples, tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        {"qid": "x", "question": "Who?", "gold_answers": ["y"], "gold_titles": ["Nowhere", "Lucium"]},
    ])
    examples = toy_examples + load_dataset(path)
    summary = summarize_dataset(examples, toy_corpus)
    assert summary.n == 5
    assert summary.unresolved_titles == 1
    assert summary.unresolved == [("x", "Nowhere")]
    assert summary.without_gold_titles == 1
