import os
import re
import json
import logging
from dataclasses import dataclass

from utils import sha256_hex

logger = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

# Stage name → file name. Family directories override `common/`.
STAGE_FILES = {
    "external_aug": "external_aug.txt",
    "internal_aug": "internal_aug.txt",
    "filter_topic": "filter_topic.txt",
    "filter_discuss": "filter_discuss.txt",
    "filter_discuss_single": "filter_discuss_single.txt",
    "filter_ids": "filter_ids.txt",
    "filter_ids_single": "filter_ids_single.txt",
    "answer_cot": "answer_cot.txt",
    "answer_direct": "answer_direct.txt",
    "answer_extract": "answer_extract.txt",
    "answer_extract_yes_no": "answer_extract_yes_no.txt",
}
EXAMPLE_KNOWLEDGE_FILE = "example_knowledge.json"
COMMON_DIR = "common"


class PromptError(Exception):
    pass


class MissingPlaceholder(PromptError):
    def __init__(self, name):
        super().__init__(f"missing binding for placeholder {{{name}}}")
        self.name = name


class UnknownPlaceholder(PromptError):
    def __init__(self, name):
        super().__init__(f"binding {name!r} has no placeholder in the template")
        self.name = name


class PromptNotFound(PromptError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset

    @classmethod
    def from_text(cls, name: str, body: str) -> "PromptTemplate":
        return cls(name, body, frozenset(PLACEHOLDER_RE.findall(body)))

    def partial(self, bindings: dict) -> "PromptTemplate":
        """Bind a subset of placeholders, keeping the rest open."""
        body = PLACEHOLDER_RE.sub(lambda m: bindings.get(m.group(1), m.group(0)), self.body)
        remaining = self.required_placeholders - set(bindings)
        return PromptTemplate(self.name, body, frozenset(remaining))


def render(template: PromptTemplate, bindings: dict) -> str:
    """Single-pass substitution; bound values are never re-scanned."""
    for name in bindings:
        if name not in template.required_placeholders:
            raise UnknownPlaceholder(name)
    for name in sorted(template.required_placeholders):
        if name not in bindings:
            raise MissingPlaceholder(name)

    def sub(m):
        name = m.group(1)
        if name in template.required_placeholders:
            return str(bindings[name])
        return m.group(0)

    return PLACEHOLDER_RE.sub(sub, template.body)


# ─────────────────────────────────────────
# 📚 KNOWLEDGE BLOCKS
# ─────────────────────────────────────────
def truncate(text: str, budget: int) -> tuple:
    if len(text) <= budget:
        return text, False
    return text[:budget].rstrip(), True


def knowledge_lines(documents, budget: int) -> tuple:
    """`{title} | {text}` per document; returns (block, truncated doc_ids)."""
    lines, truncated = [], []
    for doc in documents:
        text, cut = truncate(doc.text, budget)
        if cut:
            truncated.append(doc.doc_id)
        lines.append(f"{doc.title} | {text}")
    return "\n".join(lines), truncated


def numbered_knowledge(documents, budget: int) -> tuple:
    """`knowledge  i : {title} | {text}` per document, i ascending by rank."""
    lines, truncated = [], []
    for i, doc in enumerate(documents):
        text, cut = truncate(doc.text, budget)
        if cut:
            truncated.append(doc.doc_id)
        lines.append(f"knowledge  {i} : {doc.title} | {text}")
    return "\n".join(lines), truncated


# ─────────────────────────────────────────
# 🗂 PROMPT SETS
# ─────────────────────────────────────────
def _read_template(path: str) -> str:
    with open(path, encoding="utf-8") as f:
        body = f.read()
    # files end with one LF that is not part of the prompt
    return body[:-1] if body.endswith("\n") else body


class PromptSet:
    """All templates for one dataset family, few-shot knowledge slots filled."""

    def __init__(self, family: str, templates: dict, hashes: dict):
        self.family = family
        self.templates = templates
        self.hashes = hashes

    def __getitem__(self, stage: str) -> PromptTemplate:
        try:
            return self.templates[stage]
        except KeyError:
            raise PromptNotFound(f"no {stage!r} prompt for family {self.family!r}") from None

    def __contains__(self, stage: str) -> bool:
        return stage in self.templates

    def render(self, stage: str, **bindings) -> str:
        return render(self[stage], bindings)

    @classmethod
    def load(cls, prompts_dir: str, family: str) -> "PromptSet":
        family_dir = os.path.join(prompts_dir, family)
        common_dir = os.path.join(prompts_dir, COMMON_DIR)
        if not os.path.isdir(family_dir):
            raise PromptNotFound(f"no prompt directory for family {family!r} under {prompts_dir}")

        examples = {}
        hashes = {}
        examples_path = os.path.join(family_dir, EXAMPLE_KNOWLEDGE_FILE)
        if os.path.exists(examples_path):
            with open(examples_path, encoding="utf-8") as f:
                raw = f.read()
            examples = json.loads(raw)
            hashes[f"{family}/{EXAMPLE_KNOWLEDGE_FILE}"] = sha256_hex(raw)

        templates = {}
        for stage, file_name in STAGE_FILES.items():
            for directory, label in ((family_dir, family), (common_dir, COMMON_DIR)):
                path = os.path.join(directory, file_name)
                if os.path.exists(path):
                    body = _read_template(path)
                    hashes[f"{label}/{file_name}"] = sha256_hex(body)
                    template = PromptTemplate.from_text(f"{label}/{file_name}", body)
                    slots = {k: v for k, v in examples.items() if k in template.required_placeholders}
                    templates[stage] = template.partial(slots) if slots else template
                    break
        logger.info(f"Loaded {len(templates)} prompts for {family}")
        return cls(family, templates, hashes)
