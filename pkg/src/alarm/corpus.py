"""Training-corpus construction.

From metadata records (audio reference + textual description) the pipeline
produces training records in five steps: candidate prompt generation with an
instruction model, two-stage filtering (banned-phrase scan, then batched
answerability judging), uniform prompt selection seeded per record, initial
response generation with a reasoning model, and a budgeted rephrase of that
response into listening-grounded style. Spoken-instruction records carry
their prompt verbatim (it is the transcription of the audio), so the
rephrase stage is skipped for them and the initial response is kept.

Output is JSONL, one record per line, committed strictly in input order so a
run is byte-identical at any concurrency and can resume from a partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .encoders import AudioRef
from .errors import (
    EmptyFilteredError,
    InvalidInputError,
    ParseError,
    PipelineError,
)
from .llm import (
    ROLE_INSTRUCT,
    ROLE_REASONING,
    ClientResponse,
    LlmClient,
    compose_with_trace,
)

DOMAIN_SPEECH = "speech"
DOMAIN_SOUND = "sound"
DOMAIN_MUSIC = "music"
DOMAIN_INSTRUCTION = "instruction"
DOMAINS = (DOMAIN_SPEECH, DOMAIN_SOUND, DOMAIN_MUSIC, DOMAIN_INSTRUCTION)

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"

DEFAULT_BANNED_PHRASES = ("provided metadata", "given description")
DEFAULT_BUDGET = 1536
DEFAULT_CANDIDATES = 20
DEFAULT_VAL_FRAC = 0.10

DEFAULT_PROMPT_INSTRUCTION = (
    "You write varied questions about one audio recording, in any language, "
    "using only facts stated in the supplied description. Every question must "
    "be answerable from that description alone and must never hint that a "
    "written description exists."
)
DEFAULT_REPHRASE_INSTRUCTION = (
    "Rewrite the response so it reads as direct listening: rewrite both the "
    "reasoning and the final answer, keep every acoustic fact, and never "
    "mention text, descriptions, or metadata."
)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a colon-joined key, e.g. (corpus seed, id)."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def has_banned_phrase(text: str, phrases) -> bool:
    lowered = text.lower()
    return any(phrase in lowered for phrase in phrases)


@dataclass(frozen=True)
class FilterRules:
    """Filtering and rephrasing knobs: banned list, instructions, budget."""

    banned_phrases: tuple = DEFAULT_BANNED_PHRASES
    instruction: str = DEFAULT_PROMPT_INSTRUCTION
    rephrase_instruction: str = DEFAULT_REPHRASE_INSTRUCTION
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.budget < 1:
            raise InvalidInputError(f"thinking budget must be >= 1, got {self.budget}")
        normalized = tuple(p.lower() for p in self.banned_phrases)
        object.__setattr__(self, "banned_phrases", normalized)

    @classmethod
    def from_file(cls, path: str) -> "FilterRules":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ParseError(f"rules file {path} must hold a JSON object")
        known = {"banned_phrases", "instruction", "rephrase_instruction", "budget"}
        unknown = set(data) - known
        if unknown:
            raise ParseError(f"rules file {path}: unknown keys {sorted(unknown)}")
        kwargs = dict(data)
        if "banned_phrases" in kwargs:
            kwargs["banned_phrases"] = tuple(kwargs["banned_phrases"])
        return cls(**kwargs)


@dataclass(frozen=True)
class MetadataRecord:
    """One source item: an audio reference plus its textual description."""

    id: str
    audio_ref: AudioRef
    a_text: str
    domain: str
    extras: dict | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("record id must be non-empty")
        if not self.a_text or not self.a_text.strip():
            raise InvalidInputError(f"record {self.id}: a_text must be non-empty")
        if self.domain not in DOMAINS:
            raise InvalidInputError(
                f"record {self.id}: domain must be one of {DOMAINS}, got {self.domain!r}"
            )
        if self.split not in (None, SPLIT_TRAIN, SPLIT_VAL):
            raise InvalidInputError(
                f"record {self.id}: split must be train/val when present, got {self.split!r}"
            )


@dataclass(frozen=True)
class CorpusRecord:
    """One training item: prompt, raw response, and final target."""

    id: str
    audio_ref: AudioRef
    domain: str
    prompt: str
    r0: str
    r_text: str
    rephrase_skipped: bool
    candidates_kept: int
    provenance: dict = field(default_factory=dict)
    split: str | None = None

    def __post_init__(self):
        if not self.r_text:
            raise InvalidInputError(f"record {self.id}: r_text must be non-empty")
        if self.rephrase_skipped and self.r_text != self.r0:
            raise InvalidInputError(
                f"record {self.id}: rephrase_skipped requires r_text == r0"
            )
        if self.candidates_kept < 1:
            raise InvalidInputError(
                f"record {self.id}: candidates_kept must be >= 1, got {self.candidates_kept}"
            )
        if self.domain not in DOMAINS:
            raise InvalidInputError(
                f"record {self.id}: domain must be one of {DOMAINS}, got {self.domain!r}"
            )


# --- request message shapes (the mock client recognizes these) -------------


def propose_message(a_text: str, index: int, total: int, attempt: int = 0) -> str:
    salt = f" (attempt {attempt + 1})" if attempt else ""
    return (
        f"Audio description:\n{a_text}\n\n"
        f"Propose question #{index} of {total}.{salt}"
    )


def judge_message(a_text: str, candidates) -> str:
    listing = "\n".join(f"{i}. {c}" for i, c in enumerate(candidates, start=1))
    return (
        f"Audio description:\n{a_text}\n\n"
        f"Candidate questions:\n{listing}\n\n"
        "For each question reply with one line '<number>: KEEP' if it can be "
        "answered from the description alone, else '<number>: DROP'."
    )


def answer_message(a_text: str, prompt: str) -> str:
    return f"Audio description:\n{a_text}\n\nQuestion: {prompt}"


def rephrase_message(r0: str) -> str:
    return (
        "Rewrite the response below as if you had listened to the audio "
        f"yourself.\n\nResponse:\n{r0}"
    )


# --- pipeline operations ----------------------------------------------------


def generate_candidates(
    rec: MetadataRecord,
    q: LlmClient,
    n: int = DEFAULT_CANDIDATES,
    *,
    rules: FilterRules | None = None,
    max_retries: int = 3,
) -> list[str]:
    """Draw ``n`` candidate prompts; empty generations are resampled."""
    if q.role != ROLE_INSTRUCT:
        raise InvalidInputError(f"candidate generation needs an instruct client, got role {q.role!r}")
    if n < 1:
        raise InvalidInputError(f"candidate count must be >= 1, got {n}")
    rules = rules or FilterRules()
    candidates = []
    for index in range(1, n + 1):
        text = ""
        for attempt in range(max_retries + 1):
            reply = q.complete(rules.instruction, propose_message(rec.a_text, index, n, attempt))
            text = reply.text.strip()
            if text:
                break
        if not text:
            raise PipelineError(
                f"record {rec.id}: candidate {index} empty after {max_retries + 1} attempts"
            )
        candidates.append(text)
    return candidates


_VERDICT_LINE = re.compile(r"^\s*(\d+)\s*[:.)\-]\s*(KEEP|DROP)\b", re.IGNORECASE | re.MULTILINE)


def filter_candidates(
    candidates,
    rec: MetadataRecord,
    q: LlmClient,
    rules: FilterRules,
) -> list[str]:
    """Drop banned-phrase candidates, then keep only those judged answerable.

    The banned-phrase scan runs first and is unconditional, so a banned
    candidate is removed no matter what the judge would have said. All
    survivors are judged in one batched request. May return an empty list;
    the caller parks the record in that case.
    """
    if not candidates:
        raise InvalidInputError("candidate list must be non-empty")
    if q.role != ROLE_INSTRUCT:
        raise InvalidInputError(f"answerability judging needs an instruct client, got role {q.role!r}")
    survivors = [c for c in candidates if not has_banned_phrase(c, rules.banned_phrases)]
    if not survivors:
        return []
    reply = q.complete(rules.instruction, judge_message(rec.a_text, survivors))
    verdicts = {}
    for match in _VERDICT_LINE.finditer(reply.text):
        verdicts[int(match.group(1))] = match.group(2).upper() == "KEEP"
    return [c for i, c in enumerate(survivors, start=1) if verdicts.get(i, False)]


def select_prompt(filtered, record_id: str, seed: int = 0) -> str:
    """Pick one prompt uniformly, deterministically in (seed, record id)."""
    if not filtered:
        raise EmptyFilteredError(f"record {record_id}: no candidates survived filtering")
    rng = random.Random(derive_seed(seed, record_id))
    return filtered[rng.randrange(len(filtered))]


def generate_initial_response(rec: MetadataRecord, prompt: str, qr: LlmClient) -> str:
    """First-stage response from the reasoning model, trace kept verbatim."""
    if qr.role != ROLE_REASONING:
        raise InvalidInputError(f"response generation needs a reasoning client, got role {qr.role!r}")
    reply = qr.complete("", answer_message(rec.a_text, prompt))
    if not reply.text.strip():
        raise PipelineError(f"record {rec.id}: empty initial response")
    return compose_with_trace(reply.thinking, reply.text)


def rephrase_response(r0: str, rules: FilterRules, qr: LlmClient) -> ClientResponse:
    """Second-stage rewrite into listening-grounded style.

    The rewriter runs under ``rules.budget`` thinking tokens; its own trace
    comes back in ``.thinking`` and is NOT part of the training target —
    callers store only ``.text``.
    """
    if qr.role != ROLE_REASONING:
        raise InvalidInputError(f"rephrasing needs a reasoning client, got role {qr.role!r}")
    reply = qr.complete(rules.rephrase_instruction, rephrase_message(r0), thinking_budget=rules.budget)
    if not reply.text.strip():
        raise PipelineError("empty rephrased response")
    return reply


def process_record(
    rec: MetadataRecord,
    instruct: LlmClient,
    reasoning: LlmClient,
    rules: FilterRules,
    *,
    n_candidates: int = DEFAULT_CANDIDATES,
    seed: int = 0,
) -> CorpusRecord:
    """Run the full pipeline for one record.

    Raises EmptyFilteredError or PipelineError when the record must be
    parked; any other exception is a bug, not a parking condition.
    """
    if rec.domain == DOMAIN_INSTRUCTION and rec.extras and rec.extras.get("prompt"):
        # The spoken question itself is the prompt: answerability judging
        # does not apply (the audio literally asks it), but the banned-phrase
        # scan is corpus-wide and still runs.
        candidates = [str(rec.extras["prompt"])]
        filtered = [c for c in candidates if not has_banned_phrase(c, rules.banned_phrases)]
    else:
        candidates = generate_candidates(rec, instruct, n_candidates, rules=rules)
        filtered = filter_candidates(candidates, rec, instruct, rules)
    if not filtered:
        raise EmptyFilteredError(f"record {rec.id}: no candidates survived filtering")
    prompt = select_prompt(filtered, rec.id, seed)
    r0 = generate_initial_response(rec, prompt, reasoning)
    if rec.domain == DOMAIN_INSTRUCTION:
        r_text, skipped, budget_used = r0, True, None
    else:
        reply = rephrase_response(r0, rules, reasoning)
        r_text, skipped, budget_used = reply.text, False, reply.budget_used
    provenance = {
        "generator": instruct.model_id,
        "rephraser": reasoning.model_id,
        "budget": rules.budget,
        "budget_used": budget_used,
        "seed": seed,
        "candidates_requested": n_candidates,
    }
    return CorpusRecord(
        id=rec.id,
        audio_ref=rec.audio_ref,
        domain=rec.domain,
        prompt=prompt,
        r0=r0,
        r_text=r_text,
        rephrase_skipped=skipped,
        candidates_kept=len(filtered),
        provenance=provenance,
        split=rec.split,
    )


# --- serialization ----------------------------------------------------------


def _audio_ref_to_dict(ref: AudioRef) -> dict:
    return {"id": ref.id, "duration": ref.duration, "seed": ref.seed, "path": ref.path}


def _audio_ref_from_dict(data: dict) -> AudioRef:
    return AudioRef(
        id=str(data["id"]),
        duration=float(data["duration"]),
        seed=data.get("seed"),
        path=data.get("path"),
    )


def record_to_dict(rec: CorpusRecord) -> dict:
    return {
        "id": rec.id,
        "audio": _audio_ref_to_dict(rec.audio_ref),
        "domain": rec.domain,
        "prompt": rec.prompt,
        "r0": rec.r0,
        "r_text": rec.r_text,
        "rephrase_skipped": rec.rephrase_skipped,
        "candidates_kept": rec.candidates_kept,
        "provenance": rec.provenance,
        "split": rec.split,
    }


def record_from_dict(data: dict) -> CorpusRecord:
    return CorpusRecord(
        id=str(data["id"]),
        audio_ref=_audio_ref_from_dict(data["audio"]),
        domain=str(data["domain"]),
        prompt=str(data["prompt"]),
        r0=str(data["r0"]),
        r_text=str(data["r_text"]),
        rephrase_skipped=bool(data["rephrase_skipped"]),
        candidates_kept=int(data["candidates_kept"]),
        provenance=dict(data.get("provenance", {})),
        split=data.get("split"),
    )


def corpus_line(rec: CorpusRecord) -> str:
    return json.dumps(record_to_dict(rec), ensure_ascii=False, sort_keys=True)


def load_manifest(path: str) -> list[MetadataRecord]:
    """Read a JSONL manifest of metadata records, validating every line."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                record_id = str(data["id"])
                audio_ref = AudioRef(
                    id=str(data["audio"]),
                    duration=float(data["duration"]),
                    seed=data.get("seed", derive_seed("audio", record_id) % 2**31),
                    path=data.get("path"),
                )
                record = MetadataRecord(
                    id=record_id,
                    audio_ref=audio_ref,
                    a_text=str(data["a_text"]),
                    domain=str(data["domain"]),
                    extras=data.get("extras"),
                    split=data.get("split"),
                )
            except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
                raise ParseError(str(exc), line_number=number) from exc
            if record.id in seen:
                raise ParseError(f"duplicate record id {record.id!r}", line_number=number)
            seen.add(record.id)
            records.append(record)
    return records


def load_corpus(path: str) -> list[CorpusRecord]:
    """Read a JSONL corpus file, validating every line."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = record_from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
                raise ParseError(str(exc), line_number=number) from exc
            if record.id in seen:
                raise ParseError(f"duplicate record id {record.id!r}", line_number=number)
            seen.add(record.id)
            records.append(record)
    return records


def save_corpus(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(corpus_line(rec) + "\n")


# --- corpus build -----------------------------------------------------------


@dataclass
class BuildReport:
    """Outcome of one build run: counts plus parked records with reasons."""

    total: int
    written: int
    resumed: int
    parked: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "written": self.written,
            "resumed": self.resumed,
            "parked": self.parked,
        }


def _read_committed(path: str) -> list[str]:
    """Return ids already committed to ``path``, dropping a torn final line.

    A killed run can leave a partially written last line; the file is
    rewritten to its longest valid prefix so appends stay well-formed.
    """
    good_lines = []
    ids = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for line in lines:
        if not line.strip():
            continue
        try:
            record = record_from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError, InvalidInputError):
            break
        good_lines.append(corpus_line(record) + "\n")
        ids.append(record.id)
    if len(good_lines) != len([ln for ln in lines if ln.strip()]):
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(good_lines)
    return ids


def _park_or_record(rec, instruct, reasoning, rules, n_candidates, seed):
    try:
        return "ok", process_record(
            rec, instruct, reasoning, rules, n_candidates=n_candidates, seed=seed
        )
    except EmptyFilteredError:
        return "parked", "empty-filtered"
    except PipelineError as exc:
        return "parked", f"pipeline-error: {exc}"


def build_corpus(
    manifest,
    instruct: LlmClient,
    reasoning: LlmClient,
    rules: FilterRules,
    out_path: str,
    *,
    n_candidates: int = DEFAULT_CANDIDATES,
    concurrency: int = 1,
    seed: int = 0,
    resume: bool = True,
) -> BuildReport:
    """Build a corpus file from a manifest path or record list.

    Records are processed concurrently but committed strictly in manifest
    order, so output bytes do not depend on the concurrency level. Failed
    records are parked (listed in the report) and never abort the run. When
    ``resume`` is on and ``out_path`` exists, committed records are kept and
    only the remainder is processed.
    """
    if concurrency < 1:
        raise InvalidInputError(f"concurrency must be >= 1, got {concurrency}")
    records = load_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)

    committed: list[str] = []
    if resume and os.path.exists(out_path):
        committed = _read_committed(out_path)
    elif os.path.exists(out_path):
        os.remove(out_path)
    committed_set = set(committed)
    pending = [rec for rec in records if rec.id not in committed_set]

    parked = []
    written = len(committed)
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [
            pool.submit(_park_or_record, rec, instruct, reasoning, rules, n_candidates, seed)
            for rec in pending
        ]
        with open(out_path, "a", encoding="utf-8") as out:
            for rec, future in zip(pending, futures):
                status, payload = future.result()
                if status == "ok":
                    out.write(corpus_line(payload) + "\n")
                    out.flush()
                    written += 1
                else:
                    parked.append({"id": rec.id, "reason": payload})
    return BuildReport(total=len(records), written=written, resumed=len(committed), parked=parked)


# --- train/validation split -------------------------------------------------


def split_corpus(records, val_frac: float = DEFAULT_VAL_FRAC, seed: int = 0):
    """Stratified per-domain split into (train, validation).

    A record carrying an explicit ``split`` field goes to that side
    unconditionally (used for subsets that ship an official validation
    partition); the rest are sampled per domain at ``val_frac``. Both outputs
    preserve corpus order.
    """
    records = list(records)
    if not 0.0 < val_frac < 1.0:
        raise InvalidInputError(f"val_frac must be in (0, 1), got {val_frac}")
    val_indices = set()
    random_pool: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        if rec.split == SPLIT_VAL:
            val_indices.add(i)
        elif rec.split == SPLIT_TRAIN:
            continue
        else:
            random_pool.setdefault(rec.domain, []).append(i)
    for domain in sorted(random_pool):
        pool = random_pool[domain]
        take = round(len(pool) * val_frac)
        rng = random.Random(derive_seed(seed, "split", domain))
        val_indices.update(rng.sample(pool, take))
    train = [rec for i, rec in enumerate(records) if i not in val_indices]
    val = [rec for i, rec in enumerate(records) if i in val_indices]
    return train, val
