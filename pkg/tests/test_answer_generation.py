import asyncio

import pytest

from database.corpus_store import Document
from plugins.answer_generation import UNPARSED, extract_yes_no, generate_cot_answer, sample_answers
from plugins.knowledge_filtering import KnowledgePool
from plugins.llm_gateway import LlmGateway, ScriptedBackend

Q = "Are Workaholics and SuperMansion both American television series?"
POOL = KnowledgePool([
    Document("d03", "Workaholics", "Workaholics is an American television sitcom."),
    Document("d01", "SuperMansion", "SuperMansion is an American stop-motion animated comedy series."),
])


def scripted(extract_reply="Yes."):
    backend = ScriptedBackend()
    backend.add_rule("Let's think step by step.", "Both are American series.\nSo the answer is yes.", match="contains")
    backend.add_rule("\nAnswer:", extract_reply, match="contains")
    backend.add_rule("\nSo the answer is", " yes.", match="contains")
    return backend, LlmGateway(backend, model="scripted")


@pytest.mark.parametrize("text, expected", [
    ("Yes.", "yes"),
    ("no", "no"),
    ("  NO, it was not.", "no"),
    ("Yes, although no sources agree", "yes"),
    ("I think the answer is no.", "no"),
    ("Nobody knows", UNPARSED),
    ("", UNPARSED),
])
def test_extract_yes_no(text, expected):
    assert extract_yes_no(text) == expected


def test_cot_answer_two_calls(hotpot_prompts):
    backend, llm = scripted()
    record = asyncio.run(generate_cot_answer(Q, POOL, llm, hotpot_prompts, "yes_no"))
    assert record.extracted_answer == "yes"
    assert record.cot_text.endswith("So the answer is yes.")
    assert [t.stage for t in record.transcripts] == ["answer_cot", "answer_extract_yes_no"]
    cot_prompt, extract_prompt = backend.prompts
    assert "Workaholics | Workaholics is an American television sitcom." in cot_prompt
    assert cot_prompt.endswith(f"Question:{Q}\nLet's think step by step.")
    # the reasoning is the extraction context
    assert "Context:Both are American series.\nSo the answer is yes.\nQuestion:" in extract_prompt


def test_extractive_answer_is_stripped(hotpot_prompts):
    _, llm = scripted("  Jillian Belk \n")
    record = asyncio.run(generate_cot_answer(Q, POOL, llm, hotpot_prompts, "extractive"))
    assert record.extracted_answer == "Jillian Belk"
    assert record.transcripts[1].stage == "answer_extract"


def test_unparsed_yes_no(hotpot_prompts):
    _, llm = scripted("Maybe.")
    record = asyncio.run(generate_cot_answer(Q, POOL, llm, hotpot_prompts, "yes_no"))
    assert record.extracted_answer == UNPARSED


def test_direct_mode_uses_direct_prompt(hotpot_prompts):
    backend, llm = scripted()
    record = asyncio.run(generate_cot_answer(Q, None, llm, hotpot_prompts, "yes_no", mode="direct"))
    assert record.transcripts[0].stage == "answer_direct"
    assert backend.prompts[0].endswith(f"Knowledge:\nQuestion:{Q}\nSo the answer is")
    assert record.extracted_answer == "yes"


def test_sampling_records_top_p(hotpot_prompts):
    backend, llm = scripted()
    records = asyncio.run(sample_answers(Q, POOL, llm, hotpot_prompts, "yes_no", [0.0, 0.5, 0.9]))
    assert [r.sampling for r in records] == [(0.0, 0.0), (0.0, 0.5), (0.0, 0.9)]
    assert len(backend.call_log) == 6
    assert {req.top_p for req in backend.call_log} == {0.0, 0.5, 0.9}
    assert records[1].to_dict()["sampling"] == {"temperature": 0.0, "top_p": 0.5}


def test_sampling_needs_values(hotpot_prompts):
    _, llm = scripted()
    with pytest.raises(ValueError):
        asyncio.run(sample_answers(Q, POOL, llm, hotpot_prompts, "yes_no", []))


def test_truncated_documents_reported(hotpot_prompts):
    _, llm = scripted()
    record = asyncio.run(generate_cot_answer(Q, POOL, llm, hotpot_prompts, "yes_no", budget=20))
    assert record.truncated == ["d03", "d01"]
