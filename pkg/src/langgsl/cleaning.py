"""LLM-based cleaning of node texts: prompts, response parsing, cache and client.

The LLM is reached through a generic chat-completion endpoint. Responses are
cached in an append-only JSONL file keyed by a SHA-256 of
``(template_id, model, raw_text)``, so a warm cache never touches the network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import httpx

from .config import LLMConfig
from .data import TextAttributedGraph

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("RAW_TEXT", "TASK_DESCRIPTION", "KEY_FACTORS")
_MARKER = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")
CACHE_FILENAME = "llm_cache.jsonl"
SOURCES = ("llm", "cache", "passthrough")


class PromptError(ValueError):
    pass


class LLMServiceError(RuntimeError):
    """A request failed permanently (non-transient status or retries exhausted)."""


# --- templates ----------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    expected_sections: tuple

    def __post_init__(self):
        object.__setattr__(self, "expected_sections", tuple(self.expected_sections))
        if not self.expected_sections:
            raise PromptError("a template needs at least one expected section")
        found = _MARKER.findall(self.body)
        unknown = sorted(set(found) - set(PLACEHOLDERS))
        if unknown:
            raise PromptError(f"unknown placeholder(s) {unknown} in template {self.template_id!r}")
        for name in set(found):
            if found.count(name) != 1:
                raise PromptError(f"placeholder {{{name}}} must appear exactly once")
        if "RAW_TEXT" not in found:
            raise PromptError("template must contain {RAW_TEXT}")

    @property
    def placeholders(self) -> tuple:
        found = set(_MARKER.findall(self.body))
        return tuple(p for p in PLACEHOLDERS if p in found)

    @classmethod
    def from_text(cls, template_id: str, text: str) -> "PromptTemplate":
        """Parse a template file: a ``# sections: A, B, C`` header line, then the body."""
        head, _, body = text.partition("\n")
        m = re.match(r"\s*#\s*sections\s*:\s*(.*)$", head, re.IGNORECASE)
        if not m:
            raise PromptError(f"template {template_id!r} lacks a '# sections:' header line")
        sections = tuple(s.strip() for s in m.group(1).split(",") if s.strip())
        return cls(template_id, body, sections)


def load_template(template_id: str, directory=None) -> PromptTemplate:
    """Load ``<template_id>.txt`` from ``directory`` or the bundled prompt files."""
    if not re.fullmatch(r"[A-Za-z0-9_.-]+", template_id):
        raise PromptError(f"invalid template id {template_id!r}")
    name = f"{template_id}.txt"
    if directory is not None:
        path = Path(directory) / name
        if not path.is_file():
            raise PromptError(f"no template file {path}")
        return PromptTemplate.from_text(template_id, path.read_text(encoding="utf-8"))
    res = resources.files("langgsl").joinpath("prompts").joinpath(name)
    if not res.is_file():
        raise PromptError(f"no bundled template {template_id!r}")
    return PromptTemplate.from_text(template_id, res.read_text(encoding="utf-8"))


def render_prompt(template: PromptTemplate, raw_text: str, task_fields: Mapping[str, str]) -> str:
    """Substitute the placeholders of ``template`` in one pass.

    ``task_fields`` supplies ``TASK_DESCRIPTION`` and ``KEY_FACTORS`` (lower-case
    keys are accepted too). Substituted values are never re-scanned, so raw
    text containing brace markers is inserted verbatim.
    """
    values = {"RAW_TEXT": raw_text}
    for name in PLACEHOLDERS[1:]:
        if name in task_fields:
            values[name] = task_fields[name]
        elif name.lower() in task_fields:
            values[name] = task_fields[name.lower()]
    missing = [p for p in template.placeholders if p not in values]
    if missing:
        raise PromptError(f"no value for placeholder(s) {missing}")
    return _MARKER.sub(lambda m: str(values[m.group(1)]), template.body)


# --- parsing ------------------------------------------------------------------

@dataclass(frozen=True)
class CleanedText:
    summary: str
    predicted_class_hint: Optional[str] = None
    explanation: Optional[str] = None
    source: str = "llm"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.source != "passthrough" and not self.summary:
            raise ValueError("summary must be nonempty for llm or cache results")

    @property
    def degraded(self) -> bool:
        return self.source == "passthrough"

    def as_text(self) -> str:
        """The string that replaces the node's raw text."""
        if self.degraded:
            return self.summary
        parts = [self.summary, self.predicted_class_hint, self.explanation]
        return "\n".join(p for p in parts if p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CleanedText":
        return cls(d.get("summary", ""), d.get("predicted_class_hint"), d.get("explanation"),
                   d.get("source", "llm"))


def _heading_pattern(sections: Sequence[str]) -> re.Pattern:
    names = "|".join(re.escape(s) for s in sorted(sections, key=len, reverse=True))
    # optional markdown decoration: "## Summary:", "**Summary**:", "- Summary -"
    return re.compile(rf"^[ \t>#*_\-]*({names})[ \t*_]*(?::|-|\n|$)[ \t*_]*", re.IGNORECASE | re.MULTILINE)


def parse_llm_response(raw, template: PromptTemplate) -> CleanedText:
    """Split a response into the template's sections by heading.

    Headings match case-insensitively at line starts, in any order; the first
    occurrence of each section wins. A response without a nonempty Summary is
    returned as a degraded ``passthrough`` result. Never raises.
    """
    try:
        text = raw if isinstance(raw, str) else str(raw)
    except Exception:  # noqa: BLE001 - totality over arbitrary objects
        text = ""
    lookup = {s.lower(): s for s in template.expected_sections}
    found: dict = {}
    matches = list(_heading_pattern(template.expected_sections).finditer(text))
    for k, m in enumerate(matches):
        end = matches[k + 1].start() if k + 1 < len(matches) else len(text)
        name = lookup[m.group(1).lower()]
        if name not in found:
            found[name] = text[m.end():end].strip()
    by_lower = {k.lower(): v for k, v in found.items()}
    summary = by_lower.get("summary", "")
    hint = by_lower.get("classification") or None
    explanation = by_lower.get("explanation") or None
    if not summary:
        return CleanedText("", hint, explanation, "passthrough")
    return CleanedText(summary, hint, explanation, "llm")


# --- cache --------------------------------------------------------------------

def cache_key(template_id: str, model: str, raw_text: str) -> str:
    payload = json.dumps([template_id, model, raw_text], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class LlmCache:
    """Append-only JSONL response cache.

    One JSON object per line with ``key``, ``response_raw``, ``parsed`` and
    ``timestamp``. Later lines win on duplicate keys. Unreadable lines (for
    example a torn final write) are skipped with a warning. Appends are
    serialized through a lock.
    """

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self._entries: dict = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.is_file():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._entries[rec["key"]] = rec
                except (ValueError, KeyError, TypeError):
                    logger.warning("skipping unreadable cache line %d in %s", lineno, self.path)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> Optional[CleanedText]:
        rec = self._entries.get(key)
        if rec is None:
            return None
        parsed = CleanedText.from_dict(rec["parsed"])
        if parsed.source == "passthrough":
            return parsed
        return CleanedText(parsed.summary, parsed.predicted_class_hint, parsed.explanation, "cache")

    def put(self, key: str, response_raw: str, parsed: CleanedText) -> None:
        rec = {"key": key, "response_raw": response_raw, "parsed": parsed.to_dict(),
               "timestamp": time.time()}
        with self._lock:
            self._entries[key] = rec
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# --- client -------------------------------------------------------------------

TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class ChatClient:
    """Minimal chat-completion client with retries and a request counter.

    Transient failures (timeouts, connection errors, 408/429/5xx) are retried
    with exponential backoff, honoring ``Retry-After`` when present. Any other
    HTTP error raises :class:`LLMServiceError` immediately.
    """

    def __init__(self, config: LLMConfig, api_key: Optional[str] = None,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep, backoff_base: float = 0.5,
                 backoff_cap: float = 30.0):
        self.config = config
        key = api_key if api_key is not None else os.environ.get(config.api_key_env)
        if not key:
            raise LLMServiceError(f"environment variable {config.api_key_env} is not set; "
                                  "use offline mode to skip cleaning")
        self._http = httpx.Client(timeout=config.timeout_ms / 1000.0, transport=transport,
                                  headers={"Authorization": f"Bearer {key}"})
        self._sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._count_lock = threading.Lock()
        self.request_count = 0

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _delay(self, attempt: int, response: Optional[httpx.Response]) -> float:
        if response is not None:
            try:
                return min(float(response.headers["retry-after"]), self.backoff_cap)
            except (KeyError, ValueError):
                pass
        return min(self.backoff_base * 2 ** attempt, self.backoff_cap)

    def complete(self, prompt: str) -> str:
        body = {"model": self.config.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        last = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            with self._count_lock:
                self.request_count += 1
            response = None
            try:
                response = self._http.post(self.config.endpoint, json=body)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code == 200:
                    try:
                        return response.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise LLMServiceError("malformed chat-completion response") from None
                if response.status_code not in TRANSIENT_STATUS:
                    raise LLMServiceError(f"HTTP {response.status_code}: {response.text[:200]}")
                last = f"HTTP {response.status_code}"
            if attempt < self.config.max_retries:
                delay = self._delay(attempt, response)
                logger.info("transient LLM failure (%s); retrying in %.2fs", last, delay)
                self._sleep(delay)
        raise LLMServiceError(f"giving up after {self.config.max_retries + 1} attempts: {last}")


# --- driver -------------------------------------------------------------------

def _as_cache(cache) -> LlmCache:
    if isinstance(cache, LlmCache):
        return cache
    if cache is None:
        return LlmCache(None)
    p = Path(cache)
    return LlmCache(p / CACHE_FILENAME if p.is_dir() or not p.suffix else p)


def clean_records(texts: Sequence[str], config: LLMConfig, cache=None, offline: bool = False,
                  client=None, template: Optional[PromptTemplate] = None) -> list:
    """Clean each text; returns one :class:`CleanedText` per input.

    Cache hits never reach the client. Identical texts share one request. In
    offline mode misses become ``passthrough`` records holding the raw text. A
    permanent service error aborts after the already-finished responses have
    been written to the cache.
    """
    cache = _as_cache(cache)
    template = template or load_template(config.template)
    fields = {"TASK_DESCRIPTION": config.task_description, "KEY_FACTORS": config.key_factors}
    keys = [cache_key(template.template_id, config.model, t) for t in texts]
    out: list = [cache.get(k) for k in keys]
    pending: dict = {}
    for i, (k, rec) in enumerate(zip(keys, out)):
        if rec is None:
            pending.setdefault(k, texts[i])
    if pending and not offline:
        own = client is None
        client = client or ChatClient(config)

        def work(item):
            key, text = item
            raw = client.complete(render_prompt(template, text, fields))
            parsed = parse_llm_response(raw, template)
            cache.put(key, raw, parsed)
            return key, parsed

        try:
            with ThreadPoolExecutor(max_workers=max(1, config.max_inflight)) as pool:
                done = dict(pool.map(work, pending.items()))
        finally:
            if own:
                client.close()
        out = [rec if rec is not None else done[k] for k, rec in zip(keys, out)]
    for i, rec in enumerate(out):
        if rec is None:
            out[i] = CleanedText(texts[i], None, None, "passthrough")
        elif rec.degraded and not rec.summary:
            out[i] = CleanedText(texts[i], rec.predicted_class_hint, rec.explanation, "passthrough")
    return out


def clean_texts(g: TextAttributedGraph, client_config: LLMConfig, cache=None,
                offline: bool = False, client=None,
                template: Optional[PromptTemplate] = None) -> TextAttributedGraph:
    """Return ``g`` with ``cleaned_texts`` filled from :func:`clean_records`."""
    records = clean_records(list(g.raw_texts), client_config, cache, offline, client, template)
    n_pass = sum(r.degraded for r in records)
    if n_pass:
        logger.info("%d of %d texts passed through uncleaned", n_pass, len(records))
    return g.with_cleaned_texts([r.as_text() for r in records])
