"""
Shared fixtures: the toy corpus, dataset and scripted LLM (no network calls).
"""
import os
import sys
from pathlib import Path

import pytest

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from info import ROOT_DIR, config_from_dict  # noqa: E402
from database.bm25_index import build_index  # noqa: E402
from database.corpus_store import load_corpus, load_dataset  # noqa: E402
from plugins.llm_gateway import LlmGateway, ScriptedBackend  # noqa: E402
from plugins.pipeline import Deps  # noqa: E402
from plugins.prompts import PromptSet  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
PROMPTS_DIR = os.path.join(ROOT_DIR, "prompts")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def corpus_path():
    return str(FIXTURES / "toy_corpus.jsonl")


@pytest.fixture
def dataset_path():
    return str(FIXTURES / "toy_dataset.jsonl")


@pytest.fixture
def script_path():
    return str(FIXTURES / "toy_script.json")


@pytest.fixture
def toy_corpus(corpus_path):
    return load_corpus(corpus_path)


@pytest.fixture
def toy_index(toy_corpus):
    return build_index(toy_corpus)


@pytest.fixture
def toy_examples(dataset_path):
    return load_dataset(dataset_path)


@pytest.fixture
def hotpot_prompts():
    return PromptSet.load(PROMPTS_DIR, "hotpotqa_like")


@pytest.fixture
def make_config(tmp_path, corpus_path, script_path):
    """PipelineConfig over the toy fixtures; keyword overrides on top."""
    def _make(**overrides):
        data = {
            "method": "blendfilter",
            "k": 5,
            "dataset_family": "hotpotqa_like",
            "retriever": {"kind": "bm25", "corpus_path": corpus_path},
            "llm": {"kind": "scripted", "script_path": script_path, "model": "scripted"},
            "cache_dir": str(tmp_path / "cache"),
            "prompts_dir": PROMPTS_DIR,
            "concurrency_limit": 1,
            "use_cache": False,
        }
        data.update(overrides)
        return config_from_dict(data).validate()
    return _make


@pytest.fixture
def make_deps(toy_index, script_path):
    """Deps over the toy index with a fresh scripted backend each call."""
    def _make(config, backend=None, cache=None):
        backend = backend or ScriptedBackend.from_file(script_path)
        prompts = PromptSet.load(config.prompts_dir, config.dataset_family)
        hashes = dict(prompts.hashes, corpus=toy_index.corpus_checksum, script=backend.script_hash)
        gateway = LlmGateway(backend, model=config.llm.model, max_tokens=config.llm.max_tokens, cache=cache)
        return Deps(toy_index, gateway, prompts, hashes)
    return _make
