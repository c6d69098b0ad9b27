"""Chat-completion backends: an HTTP client and a scripted offline stub."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

DEFAULT_REPLY_PATH = "choices.0.message.content"
DEFAULT_TIMEOUT_S = 30.0


class BackendError(RuntimeError):
    """The backend could not produce a reply (unreachable, bad status, exhausted)."""


class Backend(Protocol):
    def complete(self, messages: Sequence[dict]) -> str: ...


def extract_path(doc: Any, path: str) -> Any:
    """Follow a dotted path such as `choices.0.message.content` through a JSON document."""
    cur = doc
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(part)
    return cur


@dataclass
class ChatBackend:
    url: str
    model: str
    key: str | None = None
    reply_path: str = DEFAULT_REPLY_PATH
    timeout_s: float = DEFAULT_TIMEOUT_S
    retries: int = 3
    backoff_s: float = 1.0

    @classmethod
    def from_env(cls, **overrides) -> ChatBackend:
        url = os.environ.get("SP_LLM_URL")
        if not url:
            raise BackendError("SP_LLM_URL is not set")
        return cls(
            url=url,
            model=os.environ.get("SP_LLM_MODEL", "gpt-4"),
            key=os.environ.get("SP_LLM_KEY"),
            reply_path=os.environ.get("SP_LLM_REPLY_PATH", DEFAULT_REPLY_PATH),
            **overrides,
        )

    def request_body(self, messages: Sequence[dict]) -> dict:
        return {"model": self.model, "messages": list(messages), "temperature": 0}

    def complete(self, messages: Sequence[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json=self.request_body(messages), headers=headers, timeout=self.timeout_s)
                resp.raise_for_status()
                reply = extract_path(resp.json(), self.reply_path)
                if not isinstance(reply, str):
                    raise BackendError(f"reply at {self.reply_path} is not text")
                return reply
            except (requests.RequestException, ValueError, KeyError, IndexError, BackendError) as exc:
                last = exc
                logger.warning("backend attempt %d/%d failed: %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff_s * 2 ** attempt)
        raise BackendError(f"backend unreachable after {self.retries} attempts: {last}")


@dataclass
class ScriptedBackend:
    """Replays canned replies in order and records every prompt it was sent."""

    replies: list[str]
    prompts: list[list[dict]] = field(default_factory=list)
    cycle: bool = False

    @classmethod
    def from_file(cls, path: str | Path, cycle: bool = False) -> ScriptedBackend:
        """Load a JSON list of strings, or plain text with replies separated by `---` lines."""
        text = Path(path).read_text()
        if text.lstrip().startswith("["):
            replies = json.loads(text)
        else:
            replies, cur = [], []
            for line in text.splitlines():
                if line.strip() == "---":
                    replies.append("\n".join(cur).strip())
                    cur = []
                else:
                    cur.append(line)
            if any(s.strip() for s in cur):
                replies.append("\n".join(cur).strip())
        return cls(list(replies), cycle=cycle)

    def complete(self, messages: Sequence[dict]) -> str:
        self.prompts.append([dict(m) for m in messages])
        k = len(self.prompts) - 1
        if k >= len(self.replies):
            if not self.cycle or not self.replies:
                raise BackendError("scripted backend has no replies left")
            k %= len(self.replies)
        return self.replies[k]


class UnreachableBackend:
    def complete(self, messages: Sequence[dict]) -> str:
        raise BackendError("backend unreachable")
