import os
import json
import time
import asyncio
import hashlib
import secrets
import logging
from datetime import datetime

import aiofiles
import pytz

logger = logging.getLogger(__name__)


class BackendUnavailable(Exception):
    """Remote backend (LLM or retriever) could not be reached after retries."""


# ─────────────────────────────────────────────
# 🔑 HASHING / CANONICAL FORMS
# ─────────────────────────────────────────────
def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON used for hashing and cache keys."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ─────────────────────────────────────────────
# 💾 ATOMIC WRITES
# ─────────────────────────────────────────────
async def atomic_write_text(path: str, text: str):
    """Write to a temp file in the same directory, then rename over `path`."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.{secrets.token_hex(6)}.tmp"
    async with aiofiles.open(tmp, "w", encoding="utf-8") as f:
        await f.write(text)
    os.replace(tmp, path)


def atomic_write_text_sync(path: str, text: str):
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.{secrets.token_hex(6)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


# ─────────────────────────────────────────────
# 🚦 RATE LIMITING
# ─────────────────────────────────────────────
class TokenBucket:
    """Async token bucket; `rate` tokens per second, bursts up to `capacity`."""

    def __init__(self, rate: float, capacity: float | None = None):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.updated = time.monotonic()
        self.lock = asyncio.Lock()

    async def acquire(self):
        if self.rate <= 0:
            return
        async with self.lock:
            while True:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                await asyncio.sleep((1 - self.tokens) / self.rate)


def backoff_delay(attempt: int, base: float, retry_after: str | None = None) -> float:
    """Seconds to wait before retry `attempt` (0-based)."""
    if retry_after:
        try:
            return max(0.0, float(retry_after))
        except ValueError:
            pass
    return base * (2 ** attempt)


# ─────────────────────────────────────────────
# 🧵 TASKS
# ─────────────────────────────────────────────
async def gather_or_cancel(*aws) -> list:
    """Like asyncio.gather, but the first failure cancels the siblings before it propagates."""
    tasks = [asyncio.ensure_future(aw) for aw in aws]
    try:
        return list(await asyncio.gather(*tasks))
    except BaseException:
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


# ─────────────────────────────────────────────
# 📦 UTILS (Fast Math)
# ─────────────────────────────────────────────
def get_size(size):
    units = ["Bytes", "KB", "MB", "GB", "TB"]
    size = float(size)
    i = 0
    while size >= 1024 and i < len(units) - 1:
        size /= 1024
        i += 1
    return f"{size:.2f} {units[i]}"


def get_readable_time(seconds):
    periods = [('d', 86400), ('h', 3600), ('m', 60), ('s', 1)]
    result = ''
    for name, sec in periods:
        if seconds >= sec:
            val, seconds = divmod(seconds, sec)
            result += f"{int(val)}{name}"
    return result or "0s"


def dir_size(path) -> int:
    total = 0
    for root, _, files in os.walk(path):
        for name in files:
            total += os.path.getsize(os.path.join(root, name))
    return total


def now_str(time_zone: str = "UTC") -> str:
    """Timestamp for record headers and reports in the configured zone."""
    try:
        tz = pytz.timezone(time_zone)
    except pytz.UnknownTimeZoneError:
        logger.warning(f"Unknown TIME_ZONE {time_zone!r}, falling back to UTC")
        tz = pytz.utc
    return datetime.now(tz).strftime("%Y-%m-%d %H:%M:%S %Z")
