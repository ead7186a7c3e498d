"""
End-to-end runs over the toy corpus with the scripted LLM.
"""
import json
import asyncio
from collections import Counter

import pytest

from info import ConfigError
from database.records_db import load_records
from plugins.evaluation import evaluate, retrieval_metrics
from plugins.llm_gateway import AuthFailure, ResponseCache, ScriptedBackend
from plugins.pipeline import record_transcripts, replay_backend, run_batch, run_question

from conftest import FIXTURES

GOLDEN = FIXTURES / "golden_trace.jsonl"
VOLATILE = {"timings", "cached", "created_at"}


def strip(obj):
    if isinstance(obj, dict):
        return {k: strip(v) for k, v in obj.items() if k not in VOLATILE}
    if isinstance(obj, list):
        return [strip(v) for v in obj]
    return obj


def project(record):
    """The hand-checkable part of a record: ids, kinds, answers, stage order."""
    filters = record["filters"]
    return {
        "qid": record["qid"],
        "status": record["status"],
        "calls": record["calls"],
        "queries": {kind: record["bundle"][kind] for kind in ("original", "external_aug", "internal_aug")},
        "retrieved": {r["query_kind"]: [d["doc_id"] for d in r["docs"]] for r in record["retrievals"]},
        "kept": {f["query_kind"]: f["kept_indices"] for f in filters},
        "fallback": [f["query_kind"] for f in filters if f["fallback_applied"]],
        "pool": record["pool"]["doc_ids"],
        "provenance": record["pool"]["provenance"],
        "direct_pool": record["direct_pool"]["doc_ids"],
        "answers": [a["extracted_answer"] for a in record["answers"]],
        "stages": [t["stage"] for t in record_transcripts(record)],
        "warnings": record["warnings"],
    }


def normalized(path, drop=()):
    _, records = load_records(path)
    out = [strip(r) for r in sorted(records, key=lambda r: r["qid"])]
    for r in out:
        for key in drop:
            r.pop(key, None)
    return out


def run(examples, config, deps, out, limit=None):
    return asyncio.run(run_batch(examples, config, deps, str(out), limit))


def one(example, config, deps):
    return asyncio.run(run_question(example, config, deps))


# ─────────────────────────────────────────
# blendfilter on the toy set
# ─────────────────────────────────────────
def test_q1_pool_is_exactly_the_gold_titles(toy_examples, make_config, make_deps):
    config = make_config()
    record = one(toy_examples[0], config, make_deps(config))
    assert record["status"] == "ok"
    assert record["pool"]["titles"] == ["SuperMansion", "Jillian Bell"]
    assert record["pool"]["provenance"] == {"d01": ["original", "external_aug"], "d02": ["internal_aug"]}
    assert record["answers"][0]["extracted_answer"] == "Jillian Belk"
    # the original query alone never reaches the second gold page
    original = next(r for r in record["retrievals"] if r["query_kind"] == "original")
    assert "Jillian Bell" not in [d["title"] for d in original["docs"]]


def test_whole_toy_run_scores(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    summary = run(toy_examples, config, make_deps(config), tmp_path / "records.jsonl")
    assert (summary.total, summary.ok, summary.failed) == (4, 4, 0)
    _, records = load_records(str(tmp_path / "records.jsonl"))
    result = evaluate(records, toy_examples)
    assert result.em == 1.0 and result.accuracy == 1.0
    q1 = next(r for r in result.per_question if r["qid"] == "q1")
    assert q1["s_precision"] == 1.0


def test_record_structure(toy_examples, make_config, make_deps):
    config = make_config()
    deps = make_deps(config)
    for example in toy_examples:
        record = one(example, config, deps)
        assert record["delimiter"] == "\n"
        assert [r["query_kind"] for r in record["retrievals"]] == ["original", "external_aug", "internal_aug"]
        assert set(record["pool"]["doc_ids"]) <= set(record["direct_pool"]["doc_ids"])
        for retrieved, outcome in zip(record["retrievals"], record["filters"]):
            assert outcome["query_kind"] == retrieved["query_kind"]
            assert all(0 <= i < len(retrieved["docs"]) for i in outcome["kept_indices"])
        assert record["bundle"]["external_aug"].endswith("\n" + example.question)
        assert record["bundle"]["internal_aug"].endswith("\n" + example.question)
        assert len(record_transcripts(record)) == record["calls"]["llm"]


# ─────────────────────────────────────────
# call accounting
# ─────────────────────────────────────────
@pytest.mark.parametrize("overrides, llm_calls, retrievals", [
    ({}, 13, 3),
    ({"ablations": ["no_q_in"]}, 9, 2),
    ({"ablations": ["no_q_ex"]}, 9, 2),
    ({"ablations": ["no_q"]}, 10, 3),
    ({"ablations": ["no_filter"]}, 4, 3),
    ({"sampling": [0.0, 0.5, 0.9]}, 17, 3),
    ({"filter_strategy": "single_stage"}, 10, 3),
    ({"method": "direct"}, 2, 0),
    ({"method": "cot"}, 2, 0),
    ({"method": "direct_retrieval"}, 2, 1),
    ({"method": "cot_retrieval"}, 2, 1),
    ({"method": "retgen"}, 2, 1),
    ({"method": "retgen", "hops": 2}, 3, 2),
    ({"hops": 2}, 14, 4),
])
def test_call_accounting(toy_examples, make_config, make_deps, overrides, llm_calls, retrievals):
    config = make_config(**overrides)
    backend = ScriptedBackend.from_file(config.llm.script_path)
    record = one(toy_examples[0], config, make_deps(config, backend))
    assert record["status"] == "ok"
    assert record["calls"] == {"llm": llm_calls, "retrieval": retrievals}
    assert len(backend.call_log) == llm_calls


def test_no_filter_uses_the_direct_union(toy_examples, make_config, make_deps):
    config = make_config(ablations=["no_filter"])
    record = one(toy_examples[0], config, make_deps(config))
    assert record["filters"] == []
    assert record["pool"] == record["direct_pool"]


def test_no_q_drops_the_original_set(toy_examples, make_config, make_deps):
    config = make_config(ablations=["no_q"])
    record = one(toy_examples[0], config, make_deps(config))
    assert [r["query_kind"] for r in record["retrievals"]] == ["external_aug", "internal_aug"]


def test_baselines_have_no_bundle_or_pool(toy_examples, make_config, make_deps):
    config = make_config(method="direct")
    record = one(toy_examples[0], config, make_deps(config))
    assert record["bundle"] is None and record["pool"] is None
    assert record["answers"][0]["transcripts"][0]["stage"] == "answer_direct"
    assert record["answers"][0]["extracted_answer"] == "Jillian Belk"


@pytest.mark.parametrize("index, answer, pool", [
    (2, "yes", ["Workaholics", "SuperMansion"]),
    (3, "no", ["Yttrium"]),
])
def test_strategyqa_family_filters_in_one_stage(toy_examples, make_config, make_deps, index, answer, pool):
    config = make_config(dataset_family="strategyqa_like")
    record = one(toy_examples[index], config, make_deps(config))
    assert record["status"] == "ok"
    assert record["calls"] == {"llm": 10, "retrieval": 3}
    assert {f["strategy"] for f in record["filters"]} == {"single_stage"}
    for outcome in record["filters"]:
        assert [t["stage"] for t in outcome["transcripts"]] == ["filter_discuss", "filter_ids"]
        assert not outcome["fallback_applied"]
    assert record["pool"]["titles"] == pool
    assert record["answers"][0]["extracted_answer"] == answer


# ─────────────────────────────────────────
# retrieval laws over every record
# ─────────────────────────────────────────
def test_retrieval_laws_hold_on_the_toy_run(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    run(toy_examples, config, make_deps(config), tmp_path / "records.jsonl")
    _, records = load_records(str(tmp_path / "records.jsonl"))
    golds = {ex.qid: ex.gold_titles for ex in toy_examples}
    checked = 0
    for record in records:
        gold = golds[record["qid"]]
        if not gold:
            continue
        sets = {r["query_kind"]: [d["title"] for d in r["docs"]] for r in record["retrievals"]}
        sets["direct_pool"] = record["direct_pool"]["titles"]
        sets["pool"] = record["pool"]["titles"]
        metrics = {name: retrieval_metrics(titles, gold) for name, titles in sets.items()}

        single_best = max(metrics[r["query_kind"]][0] for r in record["retrievals"])
        assert metrics["direct_pool"][0] >= single_best, record["qid"]
        assert metrics["pool"][0] <= metrics["direct_pool"][0], record["qid"]
        for name, (recall, precision, s_precision) in metrics.items():
            if s_precision == 1.0:
                assert (recall, precision) == (1.0, 1.0), (record["qid"], name)
        checked += 1
    assert checked == 3


# ─────────────────────────────────────────
# determinism
# ─────────────────────────────────────────
def test_golden_trace(tmp_path, toy_examples, make_config, make_deps):
    golden = [json.loads(line) for line in GOLDEN.read_text(encoding="utf-8").splitlines() if line.strip()]
    config = make_config()
    out = tmp_path / "records.jsonl"
    run(toy_examples, config, make_deps(config), out)
    _, records = load_records(str(out))
    projected = [project(r) for r in sorted(records, key=lambda r: r["qid"])]
    assert [p["qid"] for p in projected] == [g["qid"] for g in golden]
    for got, want in zip(projected, golden):
        assert got == want, got["qid"]


def test_two_runs_are_identical(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    run(toy_examples, config, make_deps(config), tmp_path / "a.jsonl")
    run(toy_examples, config, make_deps(config), tmp_path / "b.jsonl")
    assert normalized(str(tmp_path / "a.jsonl")) == normalized(str(tmp_path / "b.jsonl"))


def test_concurrency_does_not_change_records(tmp_path, toy_examples, make_config, make_deps):
    serial = make_config(concurrency_limit=1)
    parallel = make_config(concurrency_limit=8)
    run(toy_examples, serial, make_deps(serial), tmp_path / "a.jsonl")
    run(toy_examples, parallel, make_deps(parallel), tmp_path / "b.jsonl")
    assert normalized(str(tmp_path / "a.jsonl")) == normalized(str(tmp_path / "b.jsonl"))


def test_warm_cache_makes_no_backend_calls(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    cache_dir = str(tmp_path / "cache")
    run(toy_examples, config, make_deps(config, cache=ResponseCache(cache_dir)), tmp_path / "cold.jsonl")

    empty = ScriptedBackend()
    cache = ResponseCache(cache_dir)
    # same script hash so the fingerprint matches the cold run
    empty.script_hash = ScriptedBackend.from_file(config.llm.script_path).script_hash
    run(toy_examples, config, make_deps(config, empty, cache), tmp_path / "warm.jsonl")
    assert empty.call_log == []
    assert cache.misses == 0 and cache.hits > 0
    assert normalized(str(tmp_path / "cold.jsonl")) == normalized(str(tmp_path / "warm.jsonl"))


def test_replay_reproduces_the_run(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    run(toy_examples, config, make_deps(config), tmp_path / "a.jsonl")
    _, records = load_records(str(tmp_path / "a.jsonl"))
    run(toy_examples, config, make_deps(config, replay_backend(records)), tmp_path / "b.jsonl")
    drop = ("config_fingerprint",)
    assert normalized(str(tmp_path / "a.jsonl"), drop) == normalized(str(tmp_path / "b.jsonl"), drop)


# ─────────────────────────────────────────
# resume and failures
# ─────────────────────────────────────────
def test_resume_skips_finished_questions(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    out = tmp_path / "records.jsonl"
    run(toy_examples, config, make_deps(config), out, limit=2)
    backend = ScriptedBackend.from_file(config.llm.script_path)
    summary = run(toy_examples, config, make_deps(config, backend), out)
    assert summary.skipped == 2 and summary.ok == 2
    _, records = load_records(str(out))
    assert sorted(r["qid"] for r in records) == ["q1", "q2", "q3", "q4"]

    again = ScriptedBackend.from_file(config.llm.script_path)
    summary = run(toy_examples, config, make_deps(config, again), out)
    assert summary.skipped == 4 and again.call_log == []


def test_changed_config_refuses_to_resume(tmp_path, toy_examples, make_config, make_deps):
    out = tmp_path / "records.jsonl"
    config = make_config()
    run(toy_examples, config, make_deps(config), out, limit=1)
    other = make_config(k=3)
    with pytest.raises(ConfigError):
        run(toy_examples, other, make_deps(other), out)


def test_failed_question_does_not_stop_the_batch(tmp_path, toy_examples, make_config, make_deps):
    config = make_config()
    out = tmp_path / "records.jsonl"
    broken = ScriptedBackend.from_file(config.llm.script_path)
    broken.rules = [r for r in broken.rules if not (r.match == "exact" and "lucium" in r.pattern)]
    summary = run(toy_examples, config, make_deps(config, broken), out)
    assert (summary.ok, summary.failed) == (3, 1)
    _, records = load_records(str(out))
    failed = next(r for r in records if r["qid"] == "q2")
    assert failed["status"] == "failed"
    assert failed["error"].startswith("ScriptExhausted")

    # resuming retries the failed question only
    summary = run(toy_examples, config, make_deps(config), out)
    assert (summary.skipped, summary.ok) == (3, 1)
    _, records = load_records(str(out))
    assert all(r["status"] == "ok" for r in records)


def test_failed_record_keeps_partial_work(toy_examples, make_config, make_deps):
    config = make_config()
    broken = ScriptedBackend.from_file(config.llm.script_path)
    extract = "\nQuestion:Which society was led by the English chemist who showed that lucium was impure yttrium?\nAnswer:"
    broken.rules = [r for r in broken.rules if r.pattern != extract]
    record = one(toy_examples[1], config, make_deps(config, broken))

    assert record["status"] == "failed" and record["error"].startswith("ScriptExhausted")
    assert record["retrievals"] == [] and record["answers"] == [] and record["pool"] is None
    # the extraction call was attempted, so it is counted without a transcript
    assert record["calls"] == {"llm": 13, "retrieval": 3}
    partial = record["partial"]
    assert sorted(r["query_kind"] for r in partial["retrievals"]) == ["external_aug", "internal_aug", "original"]
    stages = dict(Counter(t["stage"] for t in partial["transcripts"]))
    assert stages == {"external_aug": 1, "internal_aug": 1, "filter_topic": 3, "filter_discuss": 3,
                      "filter_ids": 3, "answer_cot": 1}
    assert record_transcripts(record) == partial["transcripts"]


def test_ok_records_have_no_partial_section(toy_examples, make_config, make_deps):
    config = make_config()
    record = one(toy_examples[0], config, make_deps(config))
    assert record["partial"] is None


def test_auth_failure_stops_the_batch(tmp_path, toy_examples, make_config, make_deps):
    class Rejecting(ScriptedBackend):
        async def complete(self, request):
            raise AuthFailure("bad key")

    config = make_config()
    with pytest.raises(AuthFailure):
        run(toy_examples, config, make_deps(config, Rejecting()), tmp_path / "records.jsonl")
