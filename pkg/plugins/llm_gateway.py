import os
import re
import json
import asyncio
import logging
import weakref
from dataclasses import dataclass, field

import aiohttp
from google import genai
from google.genai import types

from info import LLM_API_KEY, GEMINI_API_KEY
from utils import (
    BackendUnavailable, TokenBucket, atomic_write_text, backoff_delay,
    canonical_json, file_sha256, sha256_hex,
)

logger = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "other")
RETRYABLE_STATUS = {429, 500, 502, 503, 504}


# ─────────────────────────────────────────
# ❗ ERRORS
# ─────────────────────────────────────────
class LlmError(Exception):
    pass


class AuthFailure(LlmError):
    pass


class ScriptExhausted(LlmError):
    def __init__(self, prompt: str):
        head = prompt[:120].replace("\n", "\\n")
        super().__init__(f"no scripted rule matches prompt: {head!r}")
        self.prompt = prompt


class CacheCorrupt(LlmError):
    def __init__(self, key: str, reason: str = ""):
        super().__init__(f"cache entry {key} is corrupt {reason}".strip())
        self.key = key


# ─────────────────────────────────────────
# 📨 REQUEST / RESPONSE
# ─────────────────────────────────────────
@dataclass(frozen=True)
class LlmRequest:
    model: str
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    top_p: float = 0.0
    stop: tuple = ()

    def __post_init__(self):
        if not self.prompt:
            raise LlmError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise LlmError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise LlmError("temperature must be >= 0")
        if not 0.0 <= self.top_p <= 1.0:
            raise LlmError("top_p must be in [0, 1]")

    def canonical(self) -> dict:
        return {
            "model": self.model,
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": float(self.temperature),
            "top_p": float(self.top_p),
            "stop": list(self.stop),
        }

    def cache_key(self) -> str:
        return sha256_hex(canonical_json(self.canonical()))


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: str = "stop"
    cached: bool = False


def normalize_finish_reason(raw) -> str:
    value = str(raw or "").lower()
    if value in ("stop", "eos", "end_turn", "finish_reason_stop"):
        return "stop"
    if value in ("length", "max_tokens", "finish_reason_max_tokens"):
        return "length"
    return "other"


# ─────────────────────────────────────────
# 🌐 OPENAI-COMPATIBLE HTTP BACKEND
# ─────────────────────────────────────────
class HttpBackend:
    """`POST {base_url}/completions`, or `/chat/completions` with `chat=True`."""

    def __init__(self, base_url: str, api_key: str = LLM_API_KEY, chat: bool = False,
                 timeout: float = 60.0, retries: int = 5, backoff: float = 1.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.chat = chat
        self.timeout = aiohttp.ClientTimeout(total=timeout)
        self.retries = retries
        self.backoff = backoff
        self.session: aiohttp.ClientSession | None = None

    @property
    def url(self) -> str:
        return f"{self.base_url}/chat/completions" if self.chat else f"{self.base_url}/completions"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    async def _session(self) -> aiohttp.ClientSession:
        if self.session is None or self.session.closed:
            self.session = aiohttp.ClientSession(timeout=self.timeout, headers=self._headers())
        return self.session

    async def close(self):
        if self.session and not self.session.closed:
            await self.session.close()

    def payload(self, request: LlmRequest) -> dict:
        body = {
            "model": request.model,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        if self.chat:
            body["messages"] = [{"role": "user", "content": request.prompt}]
        else:
            body["prompt"] = request.prompt
        return body

    def parse(self, data) -> LlmResponse:
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] if self.chat else choice["text"]
        except (KeyError, IndexError, TypeError) as e:
            raise LlmError(f"unexpected completion payload: {e!r}") from None
        return LlmResponse(text or "", normalize_finish_reason(choice.get("finish_reason")))

    async def complete(self, request: LlmRequest) -> LlmResponse:
        session = await self._session()
        body = self.payload(request)
        last_error = None
        for attempt in range(self.retries + 1):
            retry_after = None
            try:
                async with session.post(self.url, json=body) as resp:
                    if resp.status == 200:
                        return self.parse(await resp.json(content_type=None))
                    if resp.status in (401, 403):
                        raise AuthFailure(f"LLM endpoint rejected credentials (HTTP {resp.status})")
                    if resp.status not in RETRYABLE_STATUS:
                        text = await resp.text()
                        raise LlmError(f"LLM endpoint returned HTTP {resp.status}: {text[:200]}")
                    retry_after = resp.headers.get("Retry-After")
                    last_error = f"HTTP {resp.status}"
            except (aiohttp.ClientError, asyncio.TimeoutError) as e:
                last_error = repr(e)
            if attempt < self.retries:
                delay = backoff_delay(attempt, self.backoff, retry_after)
                logger.warning(f"⚠️ LLM {last_error}, retry {attempt + 1}/{self.retries} in {delay:.2f}s")
                await asyncio.sleep(delay)
        raise BackendUnavailable(f"LLM endpoint {self.url} unavailable after {self.retries} retries: {last_error}")

    async def ping(self):
        """Any HTTP answer counts as reachable; only connection failures raise."""
        session = await self._session()
        try:
            async with session.get(f"{self.base_url}/models") as resp:
                if resp.status in (401, 403):
                    raise AuthFailure(f"LLM endpoint rejected credentials (HTTP {resp.status})")
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            raise BackendUnavailable(f"LLM endpoint {self.base_url} unreachable: {e!r}") from None


# ─────────────────────────────────────────
# ⚡ GEMINI BACKEND
# ─────────────────────────────────────────
class GeminiBackend:
    """google-genai client; the completion prompt goes out as one content part."""

    def __init__(self, api_key: str = GEMINI_API_KEY, retries: int = 5, backoff: float = 1.0):
        if not api_key:
            raise AuthFailure("GEMINI_API_KEY is not set")
        self.client = genai.Client(api_key=api_key)
        self.retries = retries
        self.backoff = backoff

    def _generate(self, request: LlmRequest):
        config = types.GenerateContentConfig(
            temperature=request.temperature,
            top_p=request.top_p,
            max_output_tokens=request.max_tokens,
            stop_sequences=list(request.stop) or None,
        )
        return self.client.models.generate_content(
            model=request.model, contents=request.prompt, config=config
        )

    async def complete(self, request: LlmRequest) -> LlmResponse:
        loop = asyncio.get_running_loop()
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                response = await loop.run_in_executor(None, lambda: self._generate(request))
                reason = None
                if response.candidates:
                    reason = getattr(response.candidates[0].finish_reason, "name", None)
                return LlmResponse(response.text or "", normalize_finish_reason(reason))
            except Exception as e:
                status = getattr(e, "code", None)
                if status in (401, 403):
                    raise AuthFailure(f"Gemini rejected credentials: {e}") from None
                if status is not None and status not in RETRYABLE_STATUS:
                    raise LlmError(f"Gemini error: {e}") from None
                last_error = repr(e)
            if attempt < self.retries:
                delay = backoff_delay(attempt, self.backoff)
                logger.warning(f"⚠️ Gemini {last_error}, retry {attempt + 1}/{self.retries} in {delay:.2f}s")
                await asyncio.sleep(delay)
        raise BackendUnavailable(f"Gemini unavailable after {self.retries} retries: {last_error}")

    async def close(self):
        pass


# ─────────────────────────────────────────
# 🎭 SCRIPTED BACKEND
# ─────────────────────────────────────────
@dataclass
class ScriptRule:
    pattern: str
    reply: str
    match: str = "regex"
    times: int | None = None
    finish_reason: str = "stop"
    expand: bool = False
    used: int = 0

    def __post_init__(self):
        if self.match not in ("exact", "contains", "regex"):
            raise LlmError(f"unknown rule match kind {self.match!r}")
        self._regex = re.compile(self.pattern) if self.match == "regex" else None

    @property
    def exhausted(self) -> bool:
        return self.times is not None and self.used >= self.times

    def apply(self, prompt: str) -> str | None:
        if self.match == "exact":
            return self.reply if prompt == self.pattern else None
        if self.match == "contains":
            return self.reply if self.pattern in prompt else None
        m = self._regex.search(prompt)
        if m is None:
            return None
        return m.expand(self.reply) if self.expand else self.reply


class ScriptedBackend:
    """Deterministic stand-in for an LLM: first matching rule, in registration order."""

    def __init__(self, rules=None, script_hash: str = ""):
        self.rules = list(rules or [])
        self.call_log = []
        self.script_hash = script_hash

    def add_rule(self, pattern: str, reply: str, **options) -> "ScriptedBackend":
        self.rules.append(ScriptRule(pattern, reply, **options))
        return self

    async def complete(self, request: LlmRequest) -> LlmResponse:
        self.call_log.append(request)
        for rule in self.rules:
            if rule.exhausted:
                continue
            text = rule.apply(request.prompt)
            if text is not None:
                rule.used += 1
                return LlmResponse(text, rule.finish_reason)
        raise ScriptExhausted(request.prompt)

    @property
    def prompts(self) -> list:
        return [r.prompt for r in self.call_log]

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        items = data.get("rules", []) if isinstance(data, dict) else data
        rules = []
        for i, item in enumerate(items):
            try:
                rules.append(ScriptRule(**item))
            except TypeError as e:
                raise LlmError(f"script {path} rule {i}: {e}") from None
        logger.info(f"Loaded {len(rules)} scripted rules from {path}")
        return cls(rules, script_hash=file_sha256(path))

    async def close(self):
        pass


async def complete(backend, request: LlmRequest) -> LlmResponse:
    return await backend.complete(request)


# ─────────────────────────────────────────
# 💾 RESPONSE CACHE
# ─────────────────────────────────────────
class ResponseCache:
    """One JSON file per request key; writes go through temp-then-rename."""

    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir
        self.locks = weakref.WeakValueDictionary()  # a key's lock lives while a call holds it
        self._loop = None
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> str:
        return os.path.join(self.cache_dir, key[:2], f"{key}.json")

    def lock(self, key: str) -> asyncio.Lock:
        loop = asyncio.get_running_loop()
        if loop is not self._loop:
            self.locks, self._loop = weakref.WeakValueDictionary(), loop
        lock = self.locks.get(key)
        if lock is None:
            lock = self.locks[key] = asyncio.Lock()
        return lock

    def get(self, key: str) -> LlmResponse | None:
        path = self.path(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, encoding="utf-8") as f:
                entry = json.load(f)
            response = entry["response"]
            return LlmResponse(response["text"], response["finish_reason"], cached=True)
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise CacheCorrupt(key, f"({e})") from None

    async def put(self, key: str, request: LlmRequest, response: LlmResponse):
        entry = {
            "request": request.canonical(),
            "response": {"text": response.text, "finish_reason": response.finish_reason},
        }
        await atomic_write_text(self.path(key), canonical_json(entry) + "\n")


_CACHES = {}


def get_cache(cache_dir: str) -> ResponseCache:
    key = os.path.abspath(cache_dir)
    if key not in _CACHES:
        _CACHES[key] = ResponseCache(cache_dir)
    return _CACHES[key]


async def cached_complete(cache_dir, backend, request: LlmRequest) -> LlmResponse:
    cache = cache_dir if isinstance(cache_dir, ResponseCache) else get_cache(cache_dir)
    key = request.cache_key()
    async with cache.lock(key):
        hit = cache.get(key)
        if hit is not None:
            cache.hits += 1
            return hit
        response = await complete(backend, request)
        cache.misses += 1
        await cache.put(key, request, response)
        return LlmResponse(response.text, response.finish_reason, cached=False)


# ─────────────────────────────────────────
# 🚪 GATEWAY
# ─────────────────────────────────────────
@dataclass
class Transcript:
    stage: str
    prompt: str
    response: str
    finish_reason: str = "stop"
    cached: bool = False
    temperature: float = 0.0
    top_p: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "prompt": self.prompt,
            "response": self.response,
            "finish_reason": self.finish_reason,
            "cached": self.cached,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }


@dataclass
class LlmGateway:
    backend: object
    model: str
    max_tokens: int = 512
    temperature: float = 0.0
    top_p: float = 0.0
    stop: tuple = ()
    cache: ResponseCache | None = None
    max_in_flight: int = 8
    requests_per_second: float = 0.0
    calls: int = field(default=0, init=False)

    def __post_init__(self):
        self.semaphore = asyncio.Semaphore(self.max_in_flight)
        self.bucket = TokenBucket(self.requests_per_second)

    async def call(self, prompt: str, stage: str, top_p: float | None = None) -> Transcript:
        request = LlmRequest(
            model=self.model,
            prompt=prompt,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
            top_p=self.top_p if top_p is None else float(top_p),
            stop=tuple(self.stop),
        )
        self.calls += 1
        async with self.semaphore:
            await self.bucket.acquire()
            if self.cache is not None:
                response = await cached_complete(self.cache, self.backend, request)
            else:
                response = await complete(self.backend, request)
        if response.finish_reason == "length":
            logger.warning(f"⚠️ {stage} response hit max_tokens={self.max_tokens}")
        return Transcript(
            stage=stage,
            prompt=prompt,
            response=response.text,
            finish_reason=response.finish_reason,
            cached=response.cached,
            temperature=request.temperature,
            top_p=request.top_p,
        )

    async def close(self):
        await self.backend.close()


def make_backend(spec):
    """LlmSpec → backend instance."""
    if spec.kind == "scripted":
        return ScriptedBackend.from_file(spec.script_path)
    if spec.kind == "gemini":
        return GeminiBackend(retries=spec.retries, backoff=spec.backoff)
    return HttpBackend(
        spec.base_url,
        chat=spec.kind == "openai_chat",
        timeout=spec.timeout,
        retries=spec.retries,
        backoff=spec.backoff,
    )


def make_gateway(spec, cache_dir: str | None = None, backend=None) -> LlmGateway:
    backend = backend if backend is not None else make_backend(spec)
    return LlmGateway(
        backend=backend,
        model=spec.model,
        max_tokens=spec.max_tokens,
        temperature=spec.temperature,
        cache=get_cache(cache_dir) if cache_dir else None,
        max_in_flight=spec.max_in_flight,
        requests_per_second=spec.requests_per_second,
    )
