import os
import json
import asyncio
import logging

import aiofiles

from info import ConfigError, TIME_ZONE
from utils import now_str

logger = logging.getLogger(__name__)

RECORDS_FORMAT = "blendfilter-records/1"


def dumps_record(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def read_lines(path: str):
    """(header, records) from a records file; the last record per qid wins."""
    header = None
    latest = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                # a crash mid-append leaves at most one partial trailing line
                logger.warning(f"⚠️ Skipping unreadable line {line_no} in {path}")
                continue
            if "config_fingerprint" in obj and "qid" not in obj:
                header = header or obj
                continue
            latest.pop(obj.get("qid"), None)
            latest[obj.get("qid")] = obj
    return header, list(latest.values())


def trim_partial_tail(path: str, chunk: int = 4096) -> int:
    """Cut an unterminated last line off the file; returns the number of bytes removed."""
    with open(path, "rb+") as f:
        end = f.seek(0, os.SEEK_END)
        pos, cut = end, 0
        while pos > 0:
            step = min(chunk, pos)
            f.seek(pos - step)
            i = f.read(step).rfind(b"\n")
            if i != -1:
                cut = pos - step + i + 1
                break
            pos -= step
        if cut < end:
            f.truncate(cut)
    return end - cut


def load_records(path: str) -> tuple:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return read_lines(path)


# ─────────────────────────────────────────────
# 🗄 RECORD STORE
# ─────────────────────────────────────────────
class RecordStore:
    """Append-only JSON-lines store: header line, then one RunRecord per line."""

    def __init__(self, path: str):
        self.path = path
        self.lock = asyncio.Lock()
        self.header = None
        self.written = 0

    def exists(self) -> bool:
        return os.path.exists(self.path) and os.path.getsize(self.path) > 0

    async def open(self, fingerprint: str, config: dict):
        """Write the header, or check it against an existing file before resuming."""
        if self.exists():
            removed = trim_partial_tail(self.path)
            if removed:
                logger.warning(f"⚠️ Dropped {removed} bytes of an unfinished record at the end of {self.path}")
        if self.exists():
            header, _ = read_lines(self.path)
            if header is None:
                raise ConfigError(f"{self.path} is not a records file (no header line); use a new --out")
            if header.get("config_fingerprint") != fingerprint:
                raise ConfigError(
                    f"{self.path} was written with config {header.get('config_fingerprint')}, "
                    f"current config is {fingerprint}; use a new --out"
                )
            self.header = header
            return
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.header = {
            "config_fingerprint": fingerprint,
            "config": config,
            "format": RECORDS_FORMAT,
            "created_at": now_str(TIME_ZONE),
        }
        async with aiofiles.open(self.path, "w", encoding="utf-8") as f:
            await f.write(dumps_record(self.header) + "\n")

    def completed_qids(self) -> set:
        if not self.exists():
            return set()
        _, records = read_lines(self.path)
        return {r["qid"] for r in records if r.get("status") == "ok"}

    async def append(self, record: dict):
        line = dumps_record(record) + "\n"
        async with self.lock:
            async with aiofiles.open(self.path, "a", encoding="utf-8") as f:
                await f.write(line)
            self.written += 1
