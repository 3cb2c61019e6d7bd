"""Multiple-choice benchmark harness.

Loads JSONL benchmarks, renders each item as a lettered question, extracts
the chosen answer from generated text (which may open with a reasoning
trace), and aggregates per-category accuracy into a serializable report with
a full extraction audit trail.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from .backbone import EOS_ID, ByteTokenizer
from .encoders import AudioRef
from .errors import AlarmError, InvalidInputError, ParseError
from .llm import THINK_CLOSE

METHOD_LETTER = "letter"
METHOD_EXACT = "exact"
METHOD_FALLBACK = "fallback"
METHOD_ABSTAIN = "abstain"
METHOD_ERROR = "error"

FALLBACK_THRESHOLD = 0.6
MAX_CHOICES = 26


def choice_letter(index: int) -> str:
    return chr(ord("A") + index)


@dataclass(frozen=True)
class BenchmarkItem:
    """One question: audio, text, an ordered choice list, and the key."""

    id: str
    audio_ref: AudioRef
    question: str
    choices: tuple
    answer_index: int
    category: str = "all"

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("item id must be non-empty")
        if not self.question:
            raise InvalidInputError(f"item {self.id}: question must be non-empty")
        if not 2 <= len(self.choices) <= MAX_CHOICES:
            raise InvalidInputError(
                f"item {self.id}: need 2..{MAX_CHOICES} choices, got {len(self.choices)}"
            )
        if any(not str(c).strip() for c in self.choices):
            raise InvalidInputError(f"item {self.id}: choices must be non-empty")
        if not 0 <= self.answer_index < len(self.choices):
            raise InvalidInputError(
                f"item {self.id}: answer_index {self.answer_index} outside "
                f"[0, {len(self.choices)})"
            )


def load_benchmark(path: str) -> list[BenchmarkItem]:
    """Read a JSONL benchmark, order-preserving, rejecting duplicate ids."""
    items = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                item = BenchmarkItem(
                    id=str(data["id"]),
                    audio_ref=AudioRef(
                        id=str(data["audio"]),
                        duration=float(data["duration"]),
                        seed=data.get("seed"),
                        path=data.get("path"),
                    ),
                    question=str(data["question"]),
                    choices=tuple(str(c) for c in data["choices"]),
                    answer_index=int(data["answer_index"]),
                    category=str(data.get("category", "all")),
                )
            except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
                raise ParseError(str(exc), line_number=number) from exc
            if item.id in seen:
                raise ParseError(f"duplicate item id {item.id!r}", line_number=number)
            seen.add(item.id)
            items.append(item)
    return items


def mcq_prompt(item: BenchmarkItem) -> str:
    """Render an item as the text prompt given to the model."""
    lines = [f"Question: {item.question}", "Choices:"]
    for i, choice in enumerate(item.choices):
        lines.append(f"({choice_letter(i)}) {choice}")
    lines.append("Answer with the letter of the correct choice.")
    return "\n".join(lines)


def strip_thinking(text: str) -> str:
    """Drop everything up to and including the final trace terminator."""
    if THINK_CLOSE in text:
        return text.rsplit(THINK_CLOSE, 1)[-1]
    return text


def _normalize(text: str) -> str:
    return " ".join(re.findall(r"[a-z0-9']+", text.lower()))


_ANSWER_IS = re.compile(r"\banswer\b\s*(?:is|:)?\s*\(?([A-Za-z])\)?(?![A-Za-z0-9])", re.IGNORECASE)
_PARENS = re.compile(r"\(([A-Za-z])\)")
_LETTER_DOT = re.compile(r"(?<![A-Za-z0-9])([A-Z])\.(?!\w)")


def extract_choice(text: str, choices) -> tuple[int | None, str]:
    """Map generated text to a choice index, or abstain.

    The cascade is total and deterministic: (1) strip a leading reasoning
    trace; (2) explicit letter mention — "answer is B" beats "(B)" beats
    "B.", last valid occurrence wins within a pattern; (3) whole-text
    normalized equality with a choice; (4) best token overlap with a choice
    when at least 60% of that choice's tokens appear; otherwise abstain.
    """
    choices = tuple(choices)
    if not choices:
        raise InvalidInputError("choices must be non-empty")
    visible = strip_thinking(text)

    for pattern in (_ANSWER_IS, _PARENS, _LETTER_DOT):
        found = None
        for match in pattern.finditer(visible):
            index = ord(match.group(1).upper()) - ord("A")
            if 0 <= index < len(choices):
                found = index
        if found is not None:
            return found, METHOD_LETTER

    normalized = _normalize(visible)
    for i, choice in enumerate(choices):
        if normalized and normalized == _normalize(choice):
            return i, METHOD_EXACT

    generated_tokens = set(normalized.split())
    best_index, best_score = None, 0.0
    for i, choice in enumerate(choices):
        tokens = set(_normalize(choice).split())
        if not tokens:
            continue
        score = len(generated_tokens & tokens) / len(tokens)
        if score > best_score:
            best_index, best_score = i, score
    if best_index is not None and best_score >= FALLBACK_THRESHOLD:
        return best_index, METHOD_FALLBACK
    return None, METHOD_ABSTAIN


@dataclass
class EvalReport:
    """Accuracy aggregates plus a per-item extraction audit."""

    categories: dict
    overall: dict
    audit: list = field(default_factory=list)
    errored: int = 0
    truncations: int = 0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "categories": self.categories,
            "errored": self.errored,
            "truncations": self.truncations,
            "items": self.audit,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")


def evaluate(items, generate_fn, *, strict: bool = False) -> EvalReport:
    """Score every item with ``generate_fn`` and aggregate accuracies.

    ``generate_fn(item)`` returns generated text (or a ``(text, truncated)``
    pair). An item whose generation raises is marked errored: with
    ``strict`` it stays in the denominator as incorrect, otherwise it is
    excluded from the accuracy arithmetic entirely.
    """
    items = list(items)
    if not items:
        raise InvalidInputError("benchmark is empty")
    categories: dict[str, dict] = {}
    audit = []
    errored = 0
    truncations = 0
    for item in items:
        raw, truncated, error_msg = "", False, None
        try:
            out = generate_fn(item)
            raw, truncated = out if isinstance(out, tuple) else (out, False)
        except AlarmError as exc:
            error_msg = str(exc)
        if error_msg is not None:
            errored += 1
            index, method, correct = None, METHOD_ERROR, False
            counted = strict
        else:
            index, method = extract_choice(raw, item.choices)
            correct = index == item.answer_index
            counted = True
            truncations += int(truncated)
        if counted:
            bucket = categories.setdefault(item.category, {"correct": 0, "total": 0})
            bucket["total"] += 1
            bucket["correct"] += int(correct)
        entry = {
            "id": item.id,
            "category": item.category,
            "raw": raw,
            "extracted_index": index,
            "method": method,
            "correct": bool(correct),
        }
        if error_msg is not None:
            entry["error"] = error_msg
        audit.append(entry)

    total = sum(b["total"] for b in categories.values())
    correct_sum = sum(b["correct"] for b in categories.values())
    for bucket in categories.values():
        bucket["accuracy"] = bucket["correct"] / bucket["total"] if bucket["total"] else 0.0
    overall = {
        "correct": correct_sum,
        "total": total,
        "accuracy": correct_sum / total if total else 0.0,
    }
    return EvalReport(
        categories=categories,
        overall=overall,
        audit=audit,
        errored=errored,
        truncations=truncations,
    )


def evaluate_model(model, items, *, max_new_tokens: int = 64, strict: bool = False) -> EvalReport:
    """Greedy-decode every item through an audio-text model and score it."""
    if max_new_tokens < 1:
        raise InvalidInputError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    tokenizer = ByteTokenizer()

    def gen(item: BenchmarkItem):
        features = model.features_for(item.audio_ref)
        prompt_ids = tokenizer.encode(mcq_prompt(item))
        ids = model.generate(features, prompt_ids, max_new_tokens)
        truncated = len(ids) >= max_new_tokens and (not ids or ids[-1] != EOS_ID)
        return tokenizer.decode(ids), truncated

    return evaluate(items, gen, strict=strict)


def close_benchmark(items, report: EvalReport) -> list[BenchmarkItem]:
    """Re-key items so each first-pass extraction becomes the right answer.

    Items the model abstained or errored on cannot be closed and are
    dropped. Re-evaluating the same deterministic model on the result must
    score every retained item correct.
    """
    by_id = {entry["id"]: entry for entry in report.audit}
    closed = []
    for item in items:
        entry = by_id.get(item.id)
        if entry is None or entry["extracted_index"] is None:
            continue
        closed.append(replace(item, answer_index=entry["extracted_index"]))
    return closed
