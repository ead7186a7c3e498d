import os
import json
import logging
from os import environ
from dataclasses import dataclass, field, asdict, fields

from utils import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))


class ConfigError(Exception):
    """Invalid configuration file, flag or environment value."""


# ─────────────────────────────────────────────
# 🧠 HELPERS
# ─────────────────────────────────────────────
def is_enabled(key, default=False):
    val = environ.get(key, str(default)).lower()
    if val in ("true", "1", "yes", "y", "enable"):
        return True
    if val in ("false", "0", "no", "n", "disable"):
        return False
    raise ConfigError(f"{key} has invalid value {val!r}")


# ─────────────────────────────────────────────
# 🤖 LLM ENDPOINT
# ─────────────────────────────────────────────
LLM_API_KEY = environ.get("BLENDFILTER_LLM_API_KEY", "")
LLM_URL = environ.get("BLENDFILTER_LLM_URL", "https://api.openai.com/v1")
LLM_MODEL = environ.get("BLENDFILTER_LLM_MODEL", "gpt-3.5-turbo-instruct")
GEMINI_API_KEY = environ.get("GEMINI_API_KEY", "")


# ─────────────────────────────────────────────
# ⚙️ RUN SETTINGS
# ─────────────────────────────────────────────
CACHE_DIR = environ.get("BLENDFILTER_CACHE_DIR", os.path.join(".cache", "llm"))
PROMPTS_DIR = environ.get("BLENDFILTER_PROMPTS_DIR", os.path.join(ROOT_DIR, "prompts"))
CONCURRENCY_LIMIT = int(environ.get("BLENDFILTER_CONCURRENCY", 8))
LOG_LEVEL = environ.get("BLENDFILTER_LOG_LEVEL", "INFO").upper()
TIME_ZONE = environ.get("TIME_ZONE", "UTC")


# ─────────────────────────────────────────────
# 📚 VOCABULARY
# ─────────────────────────────────────────────
METHODS = ("direct", "direct_retrieval", "cot", "cot_retrieval", "retgen", "blendfilter")
ABLATIONS = ("no_q", "no_q_ex", "no_q_in", "no_filter")
DATASET_FAMILIES = ("hotpotqa_like", "wikimultihop_like", "strategyqa_like")
FILTER_STRATEGIES = ("two_stage_topic", "single_stage")
RETRIEVER_KINDS = ("bm25", "remote")
LLM_KINDS = ("openai", "openai_chat", "gemini", "scripted")

DEFAULT_FILTER_STRATEGY = {
    "hotpotqa_like": "two_stage_topic",
    "wikimultihop_like": "two_stage_topic",
    "strategyqa_like": "single_stage",
}


@dataclass
class RetrieverSpec:
    kind: str = "bm25"
    corpus_path: str | None = None
    index_dir: str | None = None
    url: str | None = None
    k1: float = 1.2
    b: float = 0.75
    timeout: float = 30.0
    retries: int = 3
    max_in_flight: int = 8


@dataclass
class LlmSpec:
    kind: str = "openai"
    base_url: str = LLM_URL
    model: str = LLM_MODEL
    script_path: str | None = None
    max_tokens: int = 512
    temperature: float = 0.0
    timeout: float = 60.0
    retries: int = 5
    backoff: float = 1.0
    requests_per_second: float = 0.0
    max_in_flight: int = 8


# Fields that never change what a run computes. File paths are replaced by
# content hashes (corpus checksum, script hash) in the fingerprint.
NON_SEMANTIC = {
    "retriever": {"corpus_path", "index_dir", "timeout", "retries", "max_in_flight"},
    "llm": {"script_path", "timeout", "retries", "backoff", "requests_per_second", "max_in_flight"},
    "top": {"cache_dir", "prompts_dir", "concurrency_limit", "use_cache"},
}


@dataclass
class PipelineConfig:
    method: str = "blendfilter"
    k: int = 5
    hops: int = 1
    ablations: list = field(default_factory=list)
    dataset_family: str = "hotpotqa_like"
    filter_strategy: str | None = None
    retriever: RetrieverSpec = field(default_factory=RetrieverSpec)
    llm: LlmSpec = field(default_factory=LlmSpec)
    sampling: list = field(default_factory=lambda: [0.0])
    per_doc_char_budget: int = 1200
    cache_dir: str = CACHE_DIR
    prompts_dir: str = PROMPTS_DIR
    concurrency_limit: int = CONCURRENCY_LIMIT
    use_cache: bool = True

    @property
    def strategy(self) -> str:
        return self.filter_strategy or DEFAULT_FILTER_STRATEGY[self.dataset_family]

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r} (choose from {', '.join(METHODS)})")
        if self.dataset_family not in DATASET_FAMILIES:
            raise ConfigError(f"unknown dataset_family {self.dataset_family!r}")
        if self.filter_strategy is not None and self.filter_strategy not in FILTER_STRATEGIES:
            raise ConfigError(f"unknown filter_strategy {self.filter_strategy!r}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k must be an integer >= 1")
        if not isinstance(self.hops, int) or self.hops < 1:
            raise ConfigError("hops must be an integer >= 1")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablations: {', '.join(sorted(unknown))}")
        if self.ablations and self.method != "blendfilter":
            raise ConfigError("ablations only apply to method=blendfilter")
        if {"no_q", "no_q_ex", "no_q_in"} <= set(self.ablations):
            raise ConfigError("ablating every query variant leaves nothing to retrieve with")
        if not self.sampling:
            raise ConfigError("sampling needs at least one top_p value")
        for top_p in self.sampling:
            if not 0.0 <= float(top_p) <= 1.0:
                raise ConfigError(f"top_p {top_p} outside [0, 1]")
        if self.per_doc_char_budget < 1:
            raise ConfigError("per_doc_char_budget must be >= 1")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if self.retriever.kind not in RETRIEVER_KINDS:
            raise ConfigError(f"unknown retriever kind {self.retriever.kind!r}")
        if self.retriever.kind == "remote" and not self.retriever.url:
            raise ConfigError("remote retriever needs a url")
        if self.retriever.kind == "bm25" and not (self.retriever.corpus_path or self.retriever.index_dir):
            raise ConfigError("bm25 retriever needs a corpus_path or a saved index_dir")
        if self.llm.kind not in LLM_KINDS:
            raise ConfigError(f"unknown llm kind {self.llm.kind!r}")
        if self.llm.kind == "scripted" and not self.llm.script_path:
            raise ConfigError("scripted llm needs a script_path")
        if self.llm.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.llm.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["ablations"] = sorted(self.ablations)
        data["sampling"] = [float(v) for v in self.sampling]
        return data

    def fingerprint(self, content_hashes: dict | None = None) -> str:
        """Hash of every field that changes results, plus prompt/script file hashes."""
        data = self.to_dict()
        for key in NON_SEMANTIC["top"]:
            data.pop(key, None)
        for key in NON_SEMANTIC["retriever"]:
            data["retriever"].pop(key, None)
        for key in NON_SEMANTIC["llm"]:
            data["llm"].pop(key, None)
        data["filter_strategy"] = self.strategy
        data["content_hashes"] = dict(sorted((content_hashes or {}).items()))
        return sha256_hex(canonical_json(data))[:16]


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")
    return cls(**data)


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    retriever = _build(RetrieverSpec, data.pop("retriever", {}) or {}, "retriever")
    llm = _build(LlmSpec, data.pop("llm", {}) or {}, "llm")
    config = _build(PipelineConfig, data, "config")
    config.retriever = retriever
    config.llm = llm
    config.ablations = list(config.ablations)
    config.sampling = [float(v) for v in config.sampling]
    return config


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Config file (JSON, mirrors PipelineConfig), then flag overrides on top."""
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("retriever", "llm"):
            merged = dict(data.get(key) or {})
            merged.update({k: v for k, v in value.items() if v is not None})
            data[key] = merged
        else:
            data[key] = value
    if "use_cache" not in data:
        data["use_cache"] = is_enabled("BLENDFILTER_USE_CACHE", True)
    return config_from_dict(data).validate()
