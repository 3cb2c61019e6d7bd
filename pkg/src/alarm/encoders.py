"""Encoder bank: pseudo-encoders and feature-file import for the four roles.

Real pretrained audio encoders are out of scope; this module provides
deterministic seeded stand-ins with the same token rates and multi-layer
output structure, plus an import path for features precomputed elsewhere.

Feature container format (self-describing, language neutral):
    line 1: UTF-8 JSON header ``{"shape": [L, T, D], "dtype": "<f4",
            "rate": 50, "layer_ids": [8, 16, 24, 32]}`` terminated by "\\n"
    rest:   little-endian IEEE-754 float32 payload, row-major
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BankError,
    FeatureIOError,
    FormatError,
    InvalidInputError,
    InvalidSpecError,
    SpecMismatchError,
)

ROLE_CONTENT = "content"
ROLE_SPEECH_TRAITS = "speech-traits"
ROLE_MUSIC = "music"
ROLE_SOUND = "sound"

# Fixed fusion order; also the order of the prefix blocks minus the content stream.
ROLE_ORDER = (ROLE_CONTENT, ROLE_SPEECH_TRAITS, ROLE_MUSIC, ROLE_SOUND)

# Native token rates per role. Everything runs at 50 frames/s except music.
ROLE_NATIVE_RATES = {
    ROLE_CONTENT: 50,
    ROLE_SPEECH_TRAITS: 50,
    ROLE_MUSIC: 25,
    ROLE_SOUND: 50,
}

# Default layer selections per role: lower, middle, and higher layers carry
# different information in audio foundation models.
DEFAULT_LAYER_INDICES = {
    ROLE_CONTENT: (8, 16, 24, 32),
    ROLE_SPEECH_TRAITS: (7, 11, 16, 21, 25),
    ROLE_MUSIC: (5, 9, 13),
    ROLE_SOUND: (4, 8, 12),
}

SOURCE_PSEUDO = "pseudo"
SOURCE_IMPORTED = "imported"

FEATURE_DTYPE = "<f4"


@dataclass(frozen=True)
class EncoderSpec:
    """Static description of one encoder slot in the bank."""

    name: str
    role: str
    native_rate: int
    feature_dim: int
    layer_indices: tuple[int, ...]
    source: str = SOURCE_PSEUDO

    def __post_init__(self):
        if self.role not in ROLE_NATIVE_RATES:
            raise InvalidSpecError(f"unknown role {self.role!r}")
        if self.native_rate not in (25, 50):
            raise InvalidSpecError(f"native_rate must be 25 or 50, got {self.native_rate}")
        if self.native_rate != ROLE_NATIVE_RATES[self.role]:
            raise InvalidSpecError(
                f"role {self.role!r} requires native_rate "
                f"{ROLE_NATIVE_RATES[self.role]}, got {self.native_rate}"
            )
        if self.feature_dim <= 0:
            raise InvalidSpecError(f"feature_dim must be positive, got {self.feature_dim}")
        layers = tuple(self.layer_indices)
        if not layers:
            raise InvalidSpecError("layer_indices must be non-empty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise InvalidSpecError(f"layer_indices must be strictly increasing, got {layers}")
        object.__setattr__(self, "layer_indices", layers)
        if self.source not in (SOURCE_PSEUDO, SOURCE_IMPORTED):
            raise InvalidSpecError(f"source must be pseudo or imported, got {self.source!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_indices)


@dataclass(frozen=True)
class AudioRef:
    """Reference to one audio clip: a seed for pseudo features or a file path."""

    id: str
    duration: float
    seed: int | None = None
    path: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("audio id must be non-empty")
        if not math.isfinite(self.duration):
            raise InvalidInputError(f"duration must be finite, got {self.duration}")


@dataclass
class LayerFeatures:
    """Multi-layer frame features from one encoder for one clip."""

    encoder: str
    layers: list[np.ndarray]
    token_rate: int
    duration: float

    @property
    def num_frames(self) -> int:
        return self.layers[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[0].shape[1]

    def validate(self, frame_tolerance: float = 0.5) -> "LayerFeatures":
        if not self.layers:
            raise FormatError("no layer matrices")
        shape = self.layers[0].shape
        for i, layer in enumerate(self.layers):
            if layer.ndim != 2:
                raise FormatError(f"layer {i} is not a matrix")
            if layer.shape != shape:
                raise FormatError(f"layer {i} shape {layer.shape} != layer 0 shape {shape}")
            if not np.isfinite(layer).all():
                raise FormatError(f"layer {i} contains non-finite entries")
        expected = self.duration * self.token_rate
        if abs(shape[0] - expected) > frame_tolerance:
            raise FormatError(
                f"frame count {shape[0]} inconsistent with duration {self.duration}s "
                f"at {self.token_rate} frames/s (expected ~{expected:.1f})"
            )
        return self


def frame_count(duration: float, rate: int) -> int:
    """Round-half-up frame count for a clip duration at a token rate."""
    return int(math.floor(duration * rate + 0.5))


def _layer_rng(audio: AudioRef, spec: EncoderSpec, layer_id: int) -> np.random.Generator:
    material = f"{audio.seed}|{audio.id}|{spec.name}|{spec.role}|{layer_id}".encode()
    digest = hashlib.sha256(material).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence(words))


def encode_pseudo(audio: AudioRef, spec: EncoderSpec) -> LayerFeatures:
    """Deterministic stand-in features: seeded smooth random walks.

    Each layer is a cumulative sum of seeded Gaussian draws, standardized per
    feature column, so the signal has temporal structure for attention to
    exploit. Identical (audio.seed, audio.id, spec) yields bit-identical output.
    """
    if spec.source != SOURCE_PSEUDO:
        raise InvalidSpecError(f"spec {spec.name!r} is not a pseudo source")
    if audio.duration <= 0:
        raise InvalidInputError(f"duration must be positive, got {audio.duration}")
    frames = frame_count(audio.duration, spec.native_rate)
    if frames < 1:
        raise InvalidInputError(
            f"duration {audio.duration}s yields no frames at {spec.native_rate} frames/s"
        )
    layers = []
    for layer_id in spec.layer_indices:
        rng = _layer_rng(audio, spec, layer_id)
        draws = rng.standard_normal((frames, spec.feature_dim))
        walk = np.cumsum(draws, axis=0)
        std = walk.std(axis=0)
        centered = walk - walk.mean(axis=0)
        layers.append((centered / np.maximum(std, 1e-6)).astype(np.float32))
    return LayerFeatures(
        encoder=spec.name, layers=layers, token_rate=spec.native_rate, duration=audio.duration
    ).validate()


def export_features(path: str, features: LayerFeatures, layer_ids: tuple[int, ...]) -> None:
    """Write features into the self-describing container format."""
    stack = np.stack(features.layers).astype("<f4")
    header = {
        "shape": list(stack.shape),
        "dtype": FEATURE_DTYPE,
        "rate": features.token_rate,
        "layer_ids": list(layer_ids),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(stack.tobytes(order="C"))


def import_features(audio: AudioRef, spec: EncoderSpec) -> LayerFeatures:
    """Load precomputed features from the container file named by the audio ref."""
    if spec.source != SOURCE_IMPORTED:
        raise InvalidSpecError(f"spec {spec.name!r} is not an imported source")
    if not audio.path:
        raise InvalidInputError(f"audio {audio.id!r} has no feature-file path")
    try:
        with open(audio.path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise FeatureIOError(f"cannot read feature file {audio.path!r}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
        shape = tuple(int(x) for x in header["shape"])
        dtype = header["dtype"]
        rate = int(header["rate"])
        layer_ids = tuple(int(x) for x in header["layer_ids"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed feature header in {audio.path!r}: {exc}") from exc

    if len(shape) != 3:
        raise FormatError(f"expected 3-d shape [layers, frames, dim], got {shape}")
    if dtype != FEATURE_DTYPE:
        raise FormatError(f"unsupported dtype {dtype!r}, expected {FEATURE_DTYPE!r}")
    n_layers, frames, dim = shape
    if len(layer_ids) != n_layers:
        raise FormatError(f"header lists {len(layer_ids)} layer ids for {n_layers} layers")
    if n_layers != spec.num_layers:
        raise FormatError(
            f"file has {n_layers} layers, spec {spec.name!r} expects {spec.num_layers}"
        )
    if dim != spec.feature_dim:
        raise FormatError(f"file dim {dim} != spec feature_dim {spec.feature_dim}")
    if rate != spec.native_rate:
        raise SpecMismatchError(f"file rate {rate} != spec native_rate {spec.native_rate}")
    expected_bytes = n_layers * frames * dim * 4
    if len(payload) != expected_bytes:
        raise FormatError(
            f"payload is {len(payload)} bytes, header implies {expected_bytes}"
        )
    stack = np.frombuffer(payload, dtype=FEATURE_DTYPE).reshape(shape)
    # Imported files win rounding ties: frame count validated within +/- 1 frame.
    return LayerFeatures(
        encoder=spec.name,
        layers=[np.array(stack[i]) for i in range(n_layers)],
        token_rate=rate,
        duration=audio.duration,
    ).validate(frame_tolerance=1.0)


@dataclass
class BankConfig:
    """A validated four-role encoder bank with the fixed fusion order."""

    specs: dict[str, EncoderSpec]
    order: tuple[str, ...] = field(default=ROLE_ORDER)

    @property
    def num_encoders(self) -> int:
        return len(self.specs)

    @property
    def naive_concat_rate(self) -> int:
        """Frames/s a time-dimension concatenation of all encoders would emit."""
        return sum(spec.native_rate for spec in self.specs.values())

    def naive_concat_frames(self, duration: float) -> int:
        return sum(frame_count(duration, spec.native_rate) for spec in self.specs.values())

    def features_for(self, audio: AudioRef, role: str) -> LayerFeatures:
        spec = self.specs[role]
        if spec.source == SOURCE_PSEUDO:
            return encode_pseudo(audio, spec)
        return import_features(audio, spec)


def validate_bank(specs: list[EncoderSpec]) -> BankConfig:
    """Check the bank covers each of the four roles exactly once."""
    by_role: dict[str, EncoderSpec] = {}
    for spec in specs:
        if spec.role in by_role:
            raise BankError(f"duplicate role {spec.role!r} ({by_role[spec.role].name}, {spec.name})")
        by_role[spec.role] = spec
    missing = [role for role in ROLE_ORDER if role not in by_role]
    if missing:
        raise BankError(f"missing roles: {missing}")
    if len(by_role) != len(ROLE_ORDER):
        raise BankError(f"expected {len(ROLE_ORDER)} roles, got {sorted(by_role)}")
    return BankConfig(specs={role: by_role[role] for role in ROLE_ORDER})


def default_toy_bank(feature_dim: int = 64) -> BankConfig:
    """Pseudo-encoder bank at toy dimensionality with the default layer picks."""
    specs = [
        EncoderSpec(
            name=f"pseudo-{role}",
            role=role,
            native_rate=ROLE_NATIVE_RATES[role],
            feature_dim=feature_dim,
            layer_indices=DEFAULT_LAYER_INDICES[role],
        )
        for role in ROLE_ORDER
    ]
    return validate_bank(specs)


def bank_from_config(entries: list[dict]) -> BankConfig:
    """Build a bank from parsed config entries (one dict per encoder)."""
    specs = []
    for entry in entries:
        try:
            specs.append(
                EncoderSpec(
                    name=entry["name"],
                    role=entry["role"],
                    native_rate=int(entry["native_rate"]),
                    feature_dim=int(entry["feature_dim"]),
                    layer_indices=tuple(int(x) for x in entry["layer_indices"]),
                    source=entry.get("source", SOURCE_PSEUDO),
                )
            )
        except KeyError as exc:
            raise InvalidSpecError(f"encoder entry missing field {exc}") from exc
    return validate_bank(specs)


def load_bank_config(path: str) -> BankConfig:
    """Read a bank config from a JSON or TOML file listing the four specs."""
    if path.endswith(".toml"):
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib  # type: ignore[no-redef]
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    entries = data["encoders"] if isinstance(data, dict) else data
    return bank_from_config(entries)
