"""Text-generation clients used by the corpus pipeline.

Two client families implement one interface: an HTTP client for a real
chat-completion endpoint and a pure mock whose replies are a deterministic
function of the request, so pipeline runs are reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass

import requests

from .errors import InvalidInputError, PipelineError

ROLE_INSTRUCT = "instruct"
ROLE_REASONING = "reasoning"
ROLES = (ROLE_INSTRUCT, ROLE_REASONING)

# Delimiters for the reasoning trace inside a composed response string.
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"


@dataclass(frozen=True)
class ClientResponse:
    """One completion: final text, separate reasoning trace, budget spent.

    ``text`` is the surface answer; ``thinking`` is the model's own trace,
    which callers may keep or discard. ``budget_used`` counts trace tokens
    actually produced when a thinking budget was requested (None otherwise).
    """

    text: str
    thinking: str = ""
    budget_used: int | None = None


def compose_with_trace(thinking: str, text: str) -> str:
    """Join a reasoning trace and final answer into one stored string."""
    if thinking:
        return f"{THINK_OPEN}{thinking}{THINK_CLOSE}\n{text}"
    return text


class LlmClient:
    """Interface shared by mock and HTTP clients."""

    def __init__(self, role: str, model_id: str):
        if role not in ROLES:
            raise InvalidInputError(f"client role must be one of {ROLES}, got {role!r}")
        self.role = role
        self.model_id = model_id

    def complete(
        self, system: str, user: str, thinking_budget: int | None = None
    ) -> ClientResponse:
        raise NotImplementedError


def _digest(*parts: str) -> int:
    joined = "\x1f".join(parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(joined).digest()[:8], "little")


def _truncate_tokens(text: str, budget: int) -> tuple[str, int]:
    """Cut ``text`` to at most ``budget`` whitespace tokens."""
    tokens = text.split()
    used = min(len(tokens), budget)
    return " ".join(tokens[:used]), used


_ASPECTS = (
    "tone",
    "tempo",
    "mood",
    "loudness",
    "pitch",
    "rhythm",
    "setting",
    "texture",
)
_OPENERS = (
    "What is",
    "Describe",
    "How would you characterize",
    "Identify",
)
_LEAK_PREFIXES = (
    "Based on the provided metadata, ",
    "According to the given description, ",
)
_ANSWER_VALUES = (
    "calm",
    "bright",
    "steady",
    "low",
    "sharp",
    "warm",
    "distant",
    "lively",
)

# Surface rewrites applied when the mock rephrases a response into an
# audio-grounded style.
_REWRITES = (
    ("From the metadata provided, we see:", "I hear an audio clip."),
    ("from the metadata provided", "from listening"),
    ("the provided metadata", "the audio"),
    ("the given description", "the recording"),
    ("provided metadata", "audio"),
    ("given description", "recording"),
    ("the description says", "I hear"),
    ("described as", "heard as"),
)


def _topic_word(a_text: str, salt: int) -> str:
    words = [w.strip(".,;:!?\"'()") for w in a_text.split()]
    words = [w for w in words if len(w) >= 4] or ["recording"]
    return words[salt % len(words)].lower()


class MockLlmClient(LlmClient):
    """Deterministic stand-in for a chat endpoint.

    A reply is a pure function of ``(role, system, user, thinking_budget)``.
    Fixed rules from a table file take precedence; otherwise the client
    recognizes the pipeline's message shapes (question proposal, keep/drop
    judging, answering, rephrasing) and synthesizes a reply seeded by a hash
    of the request. Proposal replies deliberately include text-revealing
    phrasing on a fixed fraction of draws so downstream filtering has work
    to do, and answer replies leak metadata wording in their trace so the
    rephrasing stage has something to fix.
    """

    def __init__(self, role: str, table: list[dict] | None = None, model_id: str | None = None):
        super().__init__(role, model_id or f"mock-{role}-1")
        self.table = list(table or [])
        for rule in self.table:
            if "match" not in rule or "response" not in rule:
                raise InvalidInputError("each mock rule needs 'match' and 'response' keys")

    @classmethod
    def from_file(cls, path: str, role: str) -> "MockLlmClient":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise InvalidInputError("mock table file must hold a JSON object")
        return cls(role, table=data.get("rules"), model_id=data.get("model_id"))

    def complete(
        self, system: str, user: str, thinking_budget: int | None = None
    ) -> ClientResponse:
        combined = f"{system}\n{user}"
        for rule in self.table:
            needles = rule["match"].get("contains", [])
            if isinstance(needles, str):
                needles = [needles]
            if all(needle in combined for needle in needles):
                spec = rule["response"]
                return self._finish(spec.get("text", ""), spec.get("thinking", ""), thinking_budget)
        text, thinking = self._synthesize(system, user)
        return self._finish(text, thinking, thinking_budget)

    def _finish(self, text: str, thinking: str, budget: int | None) -> ClientResponse:
        if budget is None:
            return ClientResponse(text=text, thinking=thinking)
        if budget < 1:
            raise InvalidInputError(f"thinking budget must be >= 1, got {budget}")
        thinking, used = _truncate_tokens(thinking, budget)
        return ClientResponse(text=text, thinking=thinking, budget_used=used)

    def _synthesize(self, system: str, user: str) -> tuple[str, str]:
        if "Propose question #" in user:
            return self._propose(user), ""
        if "Candidate questions:" in user:
            return self._judge(user), ""
        if "Rewrite the response below" in user:
            return self._rephrase(user)
        return self._answer(user)

    def _propose(self, user: str) -> str:
        h = _digest(self.model_id, "propose", user)
        topic = _topic_word(user, h >> 8)
        question = (
            f"{_OPENERS[h % len(_OPENERS)]} the "
            f"{_ASPECTS[(h >> 3) % len(_ASPECTS)]} of the {topic} in this recording?"
        )
        if h % 4 == 0:
            prefix = _LEAK_PREFIXES[(h >> 5) % len(_LEAK_PREFIXES)]
            question = prefix + question[0].lower() + question[1:]
        return question

    def _judge(self, user: str) -> str:
        lines = []
        for match in re.finditer(r"^(\d+)\.\s+(.*)$", user, flags=re.MULTILINE):
            index, candidate = match.group(1), match.group(2)
            verdict = "DROP" if _digest("judge", candidate) % 5 == 0 else "KEEP"
            lines.append(f"{index}: {verdict}")
        return "\n".join(lines)

    def _answer(self, user: str) -> tuple[str, str]:
        h = _digest(self.model_id, "answer", user)
        value = _ANSWER_VALUES[h % len(_ANSWER_VALUES)]
        thinking = (
            "From the metadata provided, we see: "
            f"{user.strip().splitlines()[-1]} "
            f"The given description points to a {value} quality."
        )
        text = f"The answer is {value}."
        return text, thinking

    def _rephrase(self, user: str) -> tuple[str, str]:
        rewritten = user
        for old, new in _REWRITES:
            rewritten = _case_insensitive_replace(rewritten, old, new)
        body = rewritten.split("Rewrite the response below", 1)[-1]
        body = body.split(":", 1)[-1].strip()
        inner = _strip_trace_markup(body)
        text = compose_with_trace(f"I hear an audio clip. {inner}", "Listening closely, " + _last_sentence(inner))
        thinking = (
            "The user wants the response restated as direct listening. "
            "I will keep every acoustic fact and remove any mention of text sources. "
            + " ".join(f"step{i}" for i in range(_digest('rt', user) % 40 + 10))
        )
        return text, thinking


def _case_insensitive_replace(text: str, old: str, new: str) -> str:
    return re.sub(re.escape(old), new, text, flags=re.IGNORECASE)


def _strip_trace_markup(text: str) -> str:
    return text.replace(THINK_OPEN, "").replace(THINK_CLOSE, "").strip()


def _last_sentence(text: str) -> str:
    parts = [p.strip() for p in text.replace("\n", " ").split(".") if p.strip()]
    return (parts[-1] + ".") if parts else "the clip plays through."


class HttpLlmClient(LlmClient):
    """Chat-completion endpoint client with exponential-backoff retries.

    Sends ``{model, messages, temperature, thinking_budget?}`` and expects
    ``{text, thinking?, budget_used?}`` back. Transport errors, HTTP 5xx,
    and malformed bodies are retried; exhaustion raises PipelineError so the
    caller can park the record and continue.
    """

    def __init__(
        self,
        endpoint: str,
        role: str,
        model_id: str = "default",
        *,
        temperature: float = 0.7,
        max_retries: int = 4,
        backoff: float = 0.5,
        timeout: float = 60.0,
        session=None,
    ):
        super().__init__(role, model_id)
        if not endpoint:
            raise InvalidInputError("endpoint must be non-empty")
        self.endpoint = endpoint
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()

    def complete(
        self, system: str, user: str, thinking_budget: int | None = None
    ) -> ClientResponse:
        payload = {
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.temperature,
        }
        if thinking_budget is not None:
            if thinking_budget < 1:
                raise InvalidInputError(f"thinking budget must be >= 1, got {thinking_budget}")
            payload["thinking_budget"] = int(thinking_budget)

        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                reply = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
                if reply.status_code >= 500:
                    raise requests.HTTPError(f"server error {reply.status_code}")
                reply.raise_for_status()
                data = reply.json()
                text = data["text"]
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                last_error = exc
                continue
            thinking = data.get("thinking", "") or ""
            used = data.get("budget_used")
            if thinking_budget is not None:
                thinking, client_used = _truncate_tokens(thinking, thinking_budget)
                used = client_used if used is None else min(int(used), thinking_budget)
            return ClientResponse(text=text, thinking=thinking, budget_used=used)
        raise PipelineError(
            f"endpoint {self.endpoint} failed after {self.max_retries + 1} attempts: {last_error}"
        )
