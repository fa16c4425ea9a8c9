"""Remote chat-completion client used by the cascaded de-romanizer.

Requests go out as plain JSON POSTs. Every answer is appended to a JSON-lines
cache keyed by the SHA-256 of the request body, so reruns are free and
deterministic. Each cache line carries its own hash and damaged lines are
skipped on load, which lets several evaluators share one file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Any

import requests

from . import const
from .exceptions import BackendRefusal, BackendTimeout, BackendUnavailable

_LOGGER = logging.getLogger(__name__)


def request_key(body: dict[str, Any]) -> str:
    raw = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def _line_hash(key: str, response: str) -> str:
    return hashlib.sha256(f"{key}\n{response}".encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSON-lines cache of {key, response, timestamp, hash}."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        skipped = 0
        with self.path.open(encoding="utf-8") as f:
            for line in f:
                try:
                    record = json.loads(line)
                    if record["hash"] != _line_hash(record["key"], record["response"]):
                        raise ValueError("hash mismatch")
                except (ValueError, KeyError, TypeError):
                    skipped += 1
                    continue
                self._entries[record["key"]] = record["response"]
        if skipped:
            _LOGGER.warning("Skipped %d damaged lines in %s", skipped, self.path)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put(self, key: str, response: str) -> None:
        with self._lock:
            self._entries[key] = response
            if self.path is None:
                return
            record = {
                "key": key,
                "response": response,
                "timestamp": time.time(),
                "hash": _line_hash(key, response),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")


def resolve_api_key() -> str:
    return os.getenv(const.ENV_API_KEY) or os.getenv(const.ENV_API_KEY_FALLBACK, "")


class RemoteChatClient:
    def __init__(
        self,
        endpoint: str | None = None,
        model: str = const.DEFAULT_REMOTE_MODEL,
        *,
        api_key: str | None = None,
        temperature: float = 0.0,
        timeout: float = const.DEFAULT_TIMEOUT,
        retries: int = const.DEFAULT_RETRIES,
        backoff: float = const.DEFAULT_BACKOFF,
        cache_path: str | Path | None = None,
        session: requests.Session | None = None,
    ) -> None:
        if timeout <= 0:
            raise ValueError("remote backend needs a positive timeout")
        self.endpoint = endpoint or os.getenv(const.ENV_API_BASE) or const.DEFAULT_ENDPOINT
        self.model = model
        self.api_key = api_key if api_key is not None else resolve_api_key()
        self.temperature = temperature
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.cache = ResponseCache(cache_path)
        self.session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        key = request_key(body)
        if (cached := self.cache.get(key)) is not None:
            return cached

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(
                    self.endpoint, json=body, headers=self._headers(), timeout=self.timeout
                )
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise requests.HTTPError(f"HTTP {resp.status_code}", response=resp)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
            except requests.Timeout as err:
                last_error = err
            except requests.ConnectionError as err:
                last_error = err
            except requests.HTTPError as err:
                status = err.response.status_code if err.response is not None else None
                if status is not None and status != 429 and status < 500:
                    raise BackendRefusal(f"remote backend rejected the request: HTTP {status}") from err
                last_error = err
            except (KeyError, IndexError, TypeError, ValueError) as err:
                raise BackendRefusal(f"unexpected reply shape from {self.endpoint}") from err
            else:
                if not isinstance(content, str):
                    raise BackendRefusal("reply content is not text")
                self.cache.put(key, content)
                return content
            if attempt < self.retries:
                wait = self.backoff * 2**attempt
                _LOGGER.warning(
                    "Remote request failed (%s), retry %d/%d in %.1fs",
                    last_error,
                    attempt + 1,
                    self.retries,
                    wait,
                )
                time.sleep(wait)

        _LOGGER.error("Remote backend failed after %d attempts: %s", self.retries + 1, last_error)
        if isinstance(last_error, requests.Timeout):
            raise BackendTimeout(f"no answer from {self.endpoint} within {self.timeout}s") from last_error
        if isinstance(last_error, requests.ConnectionError):
            raise BackendUnavailable(f"cannot reach {self.endpoint}") from last_error
        raise BackendTimeout(f"remote backend kept failing: {last_error}") from last_error

    def reachable(self) -> bool:
        """Cheap connectivity check; any HTTP answer means the server is alive."""
        try:
            self.session.head(self.endpoint, timeout=min(self.timeout, 5.0))
        except requests.RequestException:
            return False
        return True
