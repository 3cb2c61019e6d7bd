"""Multi-encoder fusion and model-input sequence assembly.

Three strategies over the four encoder streams:

* cross-attention fusion: the content stream queries each auxiliary stream
  in turn through a fixed-order stack of 2-layer cross-attention blocks;
* latent-prefix fusion: each auxiliary stream is compressed to 20 latent
  tokens and the three blocks are prepended to the content stream as a
  60-token prefix;
* ensemble assembly: inference-only concatenation of a fused stream and a
  content stream, separated by guiding instruction text.

Attention output projections and feed-forward down projections start at
zero, so every cross-attention block is the identity at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoders import ROLE_CONTENT, ROLE_MUSIC, ROLE_ORDER, ROLE_SOUND, ROLE_SPEECH_TRAITS
from .errors import InvalidInputError, RateError
from .frontend import (
    DIM_SPACE_BACKBONE,
    DTYPE,
    FrameMatrix,
    fan_in_init_,
    normal_,
    zero_,
)

TAG_INSTRUCTION = "instruction-text"
TAG_BOUNDARY_PRE = "boundary-pre"
TAG_BOUNDARY_POST = "boundary-post"
TAG_AUDIO = "audio"
TAG_PROMPT = "prompt-text"
TAG_TARGET = "target-text"

SEGMENT_TAGS = (
    TAG_INSTRUCTION,
    TAG_BOUNDARY_PRE,
    TAG_AUDIO,
    TAG_BOUNDARY_POST,
    TAG_PROMPT,
    TAG_TARGET,
)

AUX_ROLE_ORDER = (ROLE_SPEECH_TRAITS, ROLE_MUSIC, ROLE_SOUND)

PREFIX_TOKENS_PER_ENCODER = 20
PREFIX_TOKENS_TOTAL = PREFIX_TOKENS_PER_ENCODER * len(AUX_ROLE_ORDER)


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention with an explicitly masked softmax.

    The output projection starts at zero so residual blocks begin as the
    identity map.
    """

    def __init__(self, dim: int, heads: int, generator: torch.Generator):
        super().__init__()
        if dim % heads != 0:
            raise InvalidInputError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        # No key bias: it shifts every key's score equally, and softmax is
        # invariant to a shared shift, so the parameter would be untrainable.
        self.k_proj = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE)
        for lin in (self.q_proj, self.k_proj, self.v_proj):
            fan_in_init_(lin.weight, generator)
            if lin.bias is not None:
                zero_(lin.bias)
        zero_(self.out_proj.weight)
        zero_(self.out_proj.bias)

    def forward(self, query: Tensor, keys: Tensor, mask: Tensor | None = None) -> Tensor:
        """query [.., Tq, D], keys [.., Tk, D], mask broadcastable to [.., Tq, Tk]."""
        h, d = self.heads, self.head_dim
        q = self.q_proj(query).unflatten(-1, (h, d)).transpose(-3, -2)
        k = self.k_proj(keys).unflatten(-1, (h, d)).transpose(-3, -2)
        v = self.v_proj(keys).unflatten(-1, (h, d)).transpose(-3, -2)
        scores = q @ k.transpose(-2, -1) / d**0.5
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out_proj(ctx.transpose(-3, -2).flatten(-2))


class FeedForward(nn.Module):
    """Pre-norm feed-forward with GELU; down projection starts at zero."""

    def __init__(self, dim: int, mult: int, generator: torch.Generator):
        super().__init__()
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.up = nn.Linear(dim, dim * mult, dtype=DTYPE)
        self.act = nn.GELU()
        self.down = nn.Linear(dim * mult, dim, dtype=DTYPE)
        fan_in_init_(self.up.weight, generator)
        zero_(self.up.bias)
        zero_(self.down.weight)
        zero_(self.down.bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.down(self.act(self.up(self.norm(x))))


class CrossAttentionLayer(nn.Module):
    """One pre-norm cross-attention sublayer followed by a feed-forward."""

    def __init__(self, dim: int, heads: int, ff_mult: int, generator: torch.Generator):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.kv_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = MultiHeadAttention(dim, heads, generator)
        self.ff = FeedForward(dim, ff_mult, generator)

    def forward(self, query: Tensor, keys: Tensor) -> Tensor:
        x = query + self.attn(self.query_norm(query), self.kv_norm(keys))
        return self.ff(x)


class CrossAttentionBlock(nn.Module):
    """Stack of cross-attention layers refining the query against fixed keys."""

    def __init__(self, dim: int, heads: int = 4, depth: int = 2, ff_mult: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        generator = generator or torch.Generator().manual_seed(0)
        self.dim = dim
        self.layers = nn.ModuleList(
            CrossAttentionLayer(dim, heads, ff_mult, generator) for _ in range(depth)
        )

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, query: FrameMatrix, keys: FrameMatrix) -> FrameMatrix:
        if query.dim_space != keys.dim_space:
            raise InvalidInputError(
                f"query space {query.dim_space} != key space {keys.dim_space}"
            )
        if query.dim != self.dim or keys.dim != self.dim:
            raise InvalidInputError(
                f"block width {self.dim}, got query {query.dim} / keys {keys.dim}"
            )
        x = query.data
        for layer in self.layers:
            x = layer(x, keys.data)
        return FrameMatrix(x, token_rate=query.token_rate, dim_space=query.dim_space)


def cross_attention_block(query: FrameMatrix, kv: FrameMatrix,
                          block: CrossAttentionBlock) -> FrameMatrix:
    return block(query, kv)


class CrossAttentionFusion(nn.Module):
    """Fixed-order fusion of the four adapted streams.

    The content stream is the initial query; three sequential stages fuse in
    the speech-traits, music, and sound streams. Output length equals the
    content stream length.
    """

    stage_roles = AUX_ROLE_ORDER

    def __init__(self, dim: int, heads: int = 4, depth: int = 2, ff_mult: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        generator = generator or torch.Generator().manual_seed(0)
        self.stages = nn.ModuleList(
            CrossAttentionBlock(dim, heads, depth, ff_mult, generator)
            for _ in self.stage_roles
        )

    def forward(self, streams: dict[str, FrameMatrix]) -> FrameMatrix:
        missing = [role for role in ROLE_ORDER if role not in streams]
        if missing:
            raise InvalidInputError(f"missing adapted streams: {missing}")
        fused = streams[ROLE_CONTENT]
        for stage, role in zip(self.stages, self.stage_roles):
            fused = stage(fused, streams[role])
        return fused


def fuse_ca(x_content: FrameMatrix, x_speech_traits: FrameMatrix, x_music: FrameMatrix,
            x_sound: FrameMatrix, fusion: CrossAttentionFusion) -> FrameMatrix:
    return fusion(
        {
            ROLE_CONTENT: x_content,
            ROLE_SPEECH_TRAITS: x_speech_traits,
            ROLE_MUSIC: x_music,
            ROLE_SOUND: x_sound,
        }
    )


class PerceiverBlock(nn.Module):
    """Latent refinement: cross-attend to the input, self-attend, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_mult: int, generator: torch.Generator):
        super().__init__()
        self.input_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.cross_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(dim, heads, generator)
        self.self_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(dim, heads, generator)
        self.ff = FeedForward(dim, ff_mult, generator)

    def forward(self, latents: Tensor, inputs: Tensor) -> Tensor:
        x = latents + self.cross_attn(self.cross_norm(latents), self.input_norm(inputs))
        normed = self.self_norm(x)
        x = x + self.self_attn(normed, normed)
        return self.ff(x)


class LatentCompressor(nn.Module):
    """Compresses an any-length input stream into a fixed number of tokens.

    Learnable latents repeatedly cross-attend to the input, self-attend, and
    pass through a feed-forward; a final projection maps into the backbone
    embedding width. Replaces the temporal adapter for auxiliary streams in
    the latent-prefix variant, so the input is the pre-adapter aggregated
    stream at its native rate.
    """

    def __init__(self, in_dim: int, out_dim: int,
                 num_latents: int = PREFIX_TOKENS_PER_ENCODER,
                 heads: int = 4, depth: int = 2, ff_mult: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        generator = generator or torch.Generator().manual_seed(0)
        self.num_latents = num_latents
        self.latents = nn.Parameter(torch.empty(num_latents, in_dim, dtype=DTYPE))
        normal_(self.latents, 0.02, generator)
        self.blocks = nn.ModuleList(
            PerceiverBlock(in_dim, heads, ff_mult, generator) for _ in range(depth)
        )
        self.out_proj = nn.Linear(in_dim, out_dim, dtype=DTYPE)
        fan_in_init_(self.out_proj.weight, generator)
        zero_(self.out_proj.bias)

    def forward(self, stream: FrameMatrix) -> FrameMatrix:
        if stream.num_frames < 1:
            raise InvalidInputError("cannot compress an empty stream")
        x = self.latents
        for block in self.blocks:
            x = block(x, stream.data)
        return FrameMatrix(self.out_proj(x), token_rate=None, dim_space=DIM_SPACE_BACKBONE)


def perceiver_compress(stream: FrameMatrix, compressor: LatentCompressor) -> FrameMatrix:
    return compressor(stream)


class BoundaryPair(nn.Module):
    """Two trainable vectors delimiting an embedded region from text."""

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        generator = generator or torch.Generator().manual_seed(0)
        self.pre = nn.Parameter(torch.empty(dim, dtype=DTYPE))
        self.post = nn.Parameter(torch.empty(dim, dtype=DTYPE))
        normal_(self.pre, 0.02, generator)
        normal_(self.post, 0.02, generator)


@dataclass
class Segment:
    """One tagged block of the assembled model-input sequence."""

    tag: str
    embeddings: Tensor
    token_ids: tuple[int, ...] | None = None
    name: str | None = None

    def __post_init__(self):
        if self.tag not in SEGMENT_TAGS:
            raise InvalidInputError(f"unknown segment tag {self.tag!r}")
        if self.embeddings.ndim != 2:
            raise InvalidInputError("segment embeddings must be [tokens, dim]")
        if self.token_ids is not None and len(self.token_ids) != self.embeddings.shape[0]:
            raise InvalidInputError("token_ids length must match embedding rows")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class AudioPromptSequence:
    """Ordered segments forming one backbone input, with the target span."""

    segments: list[Segment]

    def __post_init__(self):
        self.validate()

    @property
    def total_length(self) -> int:
        return sum(len(seg) for seg in self.segments)

    def embeddings(self) -> Tensor:
        return torch.cat([seg.embeddings for seg in self.segments], dim=0)

    def token_ids(self) -> list[int]:
        """Per-position token ids; -1 for positions without a text token."""
        ids: list[int] = []
        for seg in self.segments:
            if seg.token_ids is None:
                ids.extend([-1] * len(seg))
            else:
                ids.extend(seg.token_ids)
        return ids

    def target_span(self) -> tuple[int, int]:
        """Half-open [start, end) over flattened positions of the target text."""
        offset = 0
        start = end = self.total_length
        for seg in self.segments:
            if seg.tag == TAG_TARGET:
                start = offset
                end = offset + len(seg)
                break
            offset += len(seg)
        return start, end

    def audio_token_count(self) -> int:
        return sum(len(seg) for seg in self.segments if seg.tag == TAG_AUDIO)

    def tag_sequence(self) -> tuple[str, ...]:
        return tuple(seg.tag for seg in self.segments)

    def validate(self) -> "AudioPromptSequence":
        pre = sum(1 for seg in self.segments if seg.tag == TAG_BOUNDARY_PRE)
        post = sum(1 for seg in self.segments if seg.tag == TAG_BOUNDARY_POST)
        if pre != post:
            raise InvalidInputError(f"{pre} boundary-pre segments vs {post} boundary-post")
        last_audio = max(
            (i for i, seg in enumerate(self.segments) if seg.tag == TAG_AUDIO), default=-1
        )
        first_prompt = next(
            (i for i, seg in enumerate(self.segments) if seg.tag == TAG_PROMPT), None
        )
        if first_prompt is not None and last_audio > first_prompt:
            raise InvalidInputError("audio segments must precede the prompt text")
        return self


def _boundary_segment(tag: str, vector: Tensor, name: str) -> Segment:
    return Segment(tag, vector.unsqueeze(0), name=name)


def assemble_prefix_p(
    p_speech_traits: FrameMatrix,
    p_music: FrameMatrix,
    p_sound: FrameMatrix,
    x_content: FrameMatrix,
    prefix_boundary: BoundaryPair,
) -> AudioPromptSequence:
    """Audio region for the latent-prefix variant.

    Layout: boundary-pre, 20 tokens per auxiliary encoder (speech-traits,
    music, sound), boundary-post, then the content stream. Region length is
    62 + len(content stream).
    """
    blocks = {
        ROLE_SPEECH_TRAITS: p_speech_traits,
        ROLE_MUSIC: p_music,
        ROLE_SOUND: p_sound,
    }
    for role, block in blocks.items():
        if block.num_frames != PREFIX_TOKENS_PER_ENCODER:
            raise InvalidInputError(
                f"{role} prefix block has {block.num_frames} tokens, "
                f"expected {PREFIX_TOKENS_PER_ENCODER}"
            )
        if block.dim_space != DIM_SPACE_BACKBONE:
            raise InvalidInputError(f"{role} prefix block not in backbone space")
    if x_content.token_rate != 25:
        raise RateError(f"content stream must be 25 frames/s, got {x_content.token_rate}")
    if x_content.dim_space != DIM_SPACE_BACKBONE:
        raise InvalidInputError("content stream not in backbone space")
    segments = [_boundary_segment(TAG_BOUNDARY_PRE, prefix_boundary.pre, "prefix-pre")]
    segments.extend(
        Segment(TAG_AUDIO, blocks[role].data, name=f"prefix-{role}") for role in AUX_ROLE_ORDER
    )
    segments.append(_boundary_segment(TAG_BOUNDARY_POST, prefix_boundary.post, "prefix-post"))
    segments.append(Segment(TAG_AUDIO, x_content.data, name="content"))
    return AudioPromptSequence(segments)


def assemble_ensemble_e(
    h_fused: FrameMatrix,
    x_content: FrameMatrix,
    texts: tuple[Segment, Segment, Segment],
    fused_boundary: BoundaryPair,
    content_boundary: BoundaryPair,
) -> AudioPromptSequence:
    """Inference-only ensemble region: guide text, fused stream, content stream.

    Layout: overall guide text, first-pass cue, fused stream, second-pass
    cue, content stream, with each stream delimited by its own source
    model's trained boundary pair. Introduces no new trainable state. Two
    25 frames/s streams together present the clip at an effective
    50 frames/s.
    """
    if h_fused.token_rate != x_content.token_rate:
        raise InvalidInputError(
            f"stream rate mismatch: {h_fused.token_rate} vs {x_content.token_rate}"
        )
    for name, stream in (("fused", h_fused), ("content", x_content)):
        if stream.dim_space != DIM_SPACE_BACKBONE:
            raise InvalidInputError(f"{name} stream not in backbone space")
    for seg in texts:
        if seg.tag != TAG_INSTRUCTION:
            raise InvalidInputError(f"guide text segment has tag {seg.tag!r}")
    overall, first_pass, second_pass = texts
    return AudioPromptSequence(
        [
            overall,
            first_pass,
            _boundary_segment(TAG_BOUNDARY_PRE, fused_boundary.pre, "fused-pre"),
            Segment(TAG_AUDIO, h_fused.data, name="fused"),
            _boundary_segment(TAG_BOUNDARY_POST, fused_boundary.post, "fused-post"),
            second_pass,
            _boundary_segment(TAG_BOUNDARY_PRE, content_boundary.pre, "content-pre"),
            Segment(TAG_AUDIO, x_content.data, name="content"),
            _boundary_segment(TAG_BOUNDARY_POST, content_boundary.post, "content-post"),
        ]
    )


def wrap_audio_prompt(
    audio_region: AudioPromptSequence | list[Segment] | FrameMatrix,
    prompt: Segment,
    target: Segment | None,
    audio_boundary: BoundaryPair | None,
) -> AudioPromptSequence:
    """Full model input: delimited audio region, then prompt, then target.

    ``audio_boundary`` is None only for regions that already carry their own
    per-stream boundary pairs (the ensemble variant). An empty target is
    allowed at inference; the target span is then empty.
    """
    if prompt.tag != TAG_PROMPT:
        raise InvalidInputError(f"prompt segment has tag {prompt.tag!r}")
    if len(prompt) == 0:
        raise InvalidInputError("prompt must be non-empty")
    if target is not None and target.tag != TAG_TARGET:
        raise InvalidInputError(f"target segment has tag {target.tag!r}")
    if isinstance(audio_region, FrameMatrix):
        region = [Segment(TAG_AUDIO, audio_region.data, name="audio")]
    elif isinstance(audio_region, AudioPromptSequence):
        region = list(audio_region.segments)
    else:
        region = list(audio_region)
    segments: list[Segment] = []
    if audio_boundary is not None:
        segments.append(_boundary_segment(TAG_BOUNDARY_PRE, audio_boundary.pre, "audio-pre"))
        segments.extend(region)
        segments.append(_boundary_segment(TAG_BOUNDARY_POST, audio_boundary.post, "audio-post"))
    else:
        segments.extend(region)
    segments.append(prompt)
    if target is not None and len(target) > 0:
        segments.append(target)
    return AudioPromptSequence(segments)
