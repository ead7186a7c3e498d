import re
import logging
from dataclasses import dataclass, field

from plugins.prompts import knowledge_lines
from utils import gather_or_cancel

logger = logging.getLogger(__name__)

YES_NO_TOKEN_RE = re.compile(r"[^\W_]+")
UNPARSED = "unparsed"


@dataclass
class AnswerRecord:
    cot_text: str
    extracted_answer: str
    sampling: tuple = (0.0, 0.0)
    transcripts: list = field(default_factory=list)
    truncated: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cot_text": self.cot_text,
            "extracted_answer": self.extracted_answer,
            "sampling": {"temperature": self.sampling[0], "top_p": self.sampling[1]},
            "transcripts": [t.to_dict() for t in self.transcripts],
            "truncated": list(self.truncated),
        }


def extract_yes_no(text: str) -> str:
    tokens = YES_NO_TOKEN_RE.findall((text or "").strip().casefold())
    if tokens and tokens[0] in ("yes", "no"):
        return tokens[0]
    for token in tokens:
        if token in ("yes", "no"):
            return token
    return UNPARSED


def _documents(pool) -> list:
    if pool is None:
        return []
    return pool.documents if hasattr(pool, "documents") else list(pool)


async def generate_cot_answer(q: str, pool, llm, prompts, task_kind: str = "extractive",
                              top_p: float | None = None, budget: int = 1200,
                              mode: str = "cot") -> AnswerRecord:
    """Reason over the pool, then ask for the short answer in a second call."""
    block, truncated = knowledge_lines(_documents(pool), budget)
    stage = "answer_cot" if mode == "cot" else "answer_direct"
    first = await llm.call(prompts.render(stage, knowledge=block, question=q), stage=stage, top_p=top_p)

    extract_stage = "answer_extract_yes_no" if task_kind == "yes_no" else "answer_extract"
    second = await llm.call(
        prompts.render(extract_stage, context=first.response.strip(), question=q),
        stage=extract_stage,
        top_p=top_p,
    )
    if task_kind == "yes_no":
        answer = extract_yes_no(second.response)
        if answer == UNPARSED:
            logger.warning(f"⚠️ Yes/no extraction unparsed: {second.response[:60]!r}")
    else:
        answer = second.response.strip()
    return AnswerRecord(
        cot_text=first.response,
        extracted_answer=answer,
        sampling=(first.temperature, first.top_p),
        transcripts=[first, second],
        truncated=truncated,
    )


async def sample_answers(q: str, pool, llm, prompts, task_kind: str, top_p_list,
                         budget: int = 1200, mode: str = "cot") -> list:
    top_p_list = list(top_p_list)
    if not top_p_list:
        raise ValueError("top_p_list must be non-empty")
    return await gather_or_cancel(*(
        generate_cot_answer(q, pool, llm, prompts, task_kind, float(top_p), budget, mode)
        for top_p in top_p_list
    ))
