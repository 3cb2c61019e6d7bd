"""Small frozen causal language model and response-masked loss.

The backbone consumes pre-assembled embedding sequences (audio regions are
already continuous vectors; text positions are embedded token ids), applies
a causal transformer, and produces next-token logits. During adapter
training every backbone parameter stays frozen; a content fingerprint over
the backbone parameters verifies that bit-exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import InvalidInputError, InvalidSpanError, TooLongError
from .frontend import DTYPE, fan_in_init_, normal_, zero_
from .fusion import MultiHeadAttention

PAD_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


class ByteTokenizer:
    """UTF-8 byte tokenizer with pad and end-of-sequence specials."""

    pad_id = PAD_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: list[int]) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = VOCAB_SIZE
    dim: int = 96
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 384
    max_context: int = 1024
    frozen: bool = True

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise InvalidInputError(
                f"width {self.dim} not divisible by {self.n_heads} heads"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "dim": self.dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "ff_dim": self.ff_dim,
            "max_context": self.max_context, "frozen": self.frozen,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        return cls(**data)


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention followed by a GELU feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, generator: torch.Generator):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = MultiHeadAttention(dim, heads, generator)
        fan_in_init_(self.attn.out_proj.weight, generator)
        self.ff_norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.up = nn.Linear(dim, ff_dim, dtype=DTYPE)
        self.down = nn.Linear(ff_dim, dim, dtype=DTYPE)
        for lin in (self.up, self.down):
            fan_in_init_(lin.weight, generator)
            zero_(lin.bias)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        normed = self.attn_norm(x)
        x = x + self.attn(normed, normed, mask=mask)
        x = x + self.down(F.gelu(self.up(self.ff_norm(x))))
        return x


class CausalBackbone(nn.Module):
    """Causal transformer over embedding sequences with a tied output head."""

    def __init__(self, config: BackboneConfig | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        generator = generator or torch.Generator().manual_seed(0)
        cfg = self.config
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_context, cfg.dim, dtype=DTYPE)
        normal_(self.tok_emb.weight, 0.02, generator)
        normal_(self.pos_emb.weight, 0.02, generator)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.dim, cfg.n_heads, cfg.ff_dim, generator)
            for _ in range(cfg.n_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.dim, dtype=DTYPE)

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed_tokens(self, ids: list[int] | Tensor) -> Tensor:
        if not torch.is_tensor(ids):
            ids = torch.tensor(ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InvalidInputError("token id outside vocabulary")
        return self.tok_emb(ids)

    def forward_embeddings(self, embeds: Tensor) -> Tensor:
        """[T, D] or [B, T, D] embeddings -> logits of the same leading shape.

        Logits at position t depend only on positions <= t; the causal mask
        zeroes attention to the future exactly (masked scores become -inf,
        contributing weight exp(-inf) = 0).
        """
        squeeze = embeds.ndim == 2
        if squeeze:
            embeds = embeds.unsqueeze(0)
        if embeds.ndim != 3:
            raise InvalidInputError("expected [T, dim] or [batch, T, dim] embeddings")
        _, t, d = embeds.shape
        if d != self.config.dim:
            raise InvalidInputError(f"embedding width {d}, backbone expects {self.config.dim}")
        if t > self.config.max_context:
            raise TooLongError(f"sequence length {t} exceeds context {self.config.max_context}")
        x = embeds + self.pos_emb.weight[:t]
        mask = torch.ones(t, t, dtype=torch.bool, device=embeds.device).tril()
        for layer in self.layers:
            x = layer(x, mask)
        logits = self.final_norm(x) @ self.tok_emb.weight.T
        return logits.squeeze(0) if squeeze else logits

    def forward(self, embeds: Tensor) -> Tensor:
        return self.forward_embeddings(embeds)

    def generate(self, prefix: Tensor, max_new_tokens: int) -> list[int]:
        """Greedy continuation of an embedding prefix; stops at end-of-sequence."""
        if prefix.ndim != 2:
            raise InvalidInputError("generation prefix must be [T, dim]")
        if prefix.shape[0] < 1:
            raise InvalidInputError("generation prefix must be non-empty")
        if prefix.shape[0] + max_new_tokens > self.config.max_context:
            raise TooLongError(
                f"prefix {prefix.shape[0]} + budget {max_new_tokens} exceeds "
                f"context {self.config.max_context}"
            )
        ids: list[int] = []
        embeds = prefix
        with torch.no_grad():
            for _ in range(max_new_tokens):
                logits = self.forward_embeddings(embeds)
                next_id = int(logits[-1].argmax().item())
                ids.append(next_id)
                if next_id == EOS_ID:
                    break
                embeds = torch.cat([embeds, self.tok_emb.weight[next_id : next_id + 1]])
        return ids


@dataclass(frozen=True)
class TargetSpan:
    """Half-open [start, end) token positions of the response text."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise InvalidSpanError(f"bad span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


def response_ce_loss(logits: Tensor, token_ids: list[int] | Tensor, span: TargetSpan) -> Tensor:
    """Mean cross-entropy over the response span only.

    The logits at position p-1 score the token at position p, so the span
    must start at or after position 1. Positions outside the span contribute
    nothing to the value or the gradient.
    """
    if logits.ndim != 2:
        raise InvalidInputError("expected [T, vocab] logits")
    if not torch.is_tensor(token_ids):
        token_ids = torch.tensor(token_ids, dtype=torch.long)
    if token_ids.shape[0] != logits.shape[0]:
        raise InvalidInputError("token_ids length must match logits length")
    if len(span) == 0:
        raise InvalidSpanError("empty target span")
    if span.start < 1 or span.end > logits.shape[0]:
        raise InvalidSpanError(
            f"span [{span.start}, {span.end}) outside predictable range "
            f"[1, {logits.shape[0]}]"
        )
    targets = token_ids[span.start : span.end]
    if (targets < 0).any() or (targets >= logits.shape[1]).any():
        raise InvalidSpanError("span covers positions without a valid text token")
    return F.cross_entropy(logits[span.start - 1 : span.end - 1], targets, reduction="mean")


def freeze_fingerprint(named_params) -> str:
    """Content digest over parameters, sorted by name, little-endian payloads."""
    if isinstance(named_params, nn.Module):
        named_params = named_params.named_parameters()
    digest = hashlib.sha256()
    for name, param in sorted(named_params, key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(b"\x00")
        arr = param.detach().cpu().numpy().astype("<f8", copy=False)
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def load_toy_backbone() -> CausalBackbone:
    """Load the committed pretrained backbone fixture, frozen for training."""
    from importlib import resources

    from .checkpoint import arrays_to_state, load_arrays

    resource = resources.files("alarm").joinpath("assets/toy_backbone.ckpt")
    with resources.as_file(resource) as path:
        arrays, metadata = load_arrays(path)
    config = BackboneConfig.from_dict(metadata["config"])
    model = CausalBackbone(config, generator=torch.Generator().manual_seed(0))
    arrays_to_state(model, arrays)
    for param in model.parameters():
        param.requires_grad_(False)
    model.eval()
    return model


def synthetic_sentences(count: int, seed: int) -> list[str]:
    """Deterministic byte-level corpus for backbone pretraining.

    Simple subject-verb-object sentences over a tiny vocabulary give the
    model enough structure to assign low loss to fluent continuations while
    staying a few kilobytes of text.
    """
    import random

    subjects = ["the dog", "a bird", "the band", "one car", "the rain", "a choir",
                "the crowd", "an engine", "the child", "a siren"]
    verbs = ["hears", "plays", "makes", "likes", "stops", "starts", "repeats",
             "follows", "records", "masks"]
    objects = ["a low hum", "the loud song", "soft steps", "a sharp tone",
               "quiet speech", "fast drums", "a long note", "clear words",
               "short beeps", "deep bass"]
    rng = random.Random(seed)
    return [
        f"{rng.choice(subjects)} {rng.choice(verbs)} {rng.choice(objects)}."
        for _ in range(count)
    ]


def pretrain_toy_backbone(
    config: BackboneConfig | None = None,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 16,
    seq_len: int = 48,
    lr: float = 3e-3,
) -> tuple[CausalBackbone, float]:
    """Train a fresh backbone on the synthetic byte corpus; returns final loss.

    Runs entirely from explicit generators, so a fixed seed reproduces the
    fixture bit-for-bit.
    """
    config = config or BackboneConfig()
    model = CausalBackbone(config, generator=torch.Generator().manual_seed(seed))
    tokenizer = ByteTokenizer()
    # Each sentence is a bounded document ending in EOS, so the model learns
    # that sequences terminate — without this, EOS logits are pushed down at
    # every position and downstream finetuning can never make generation stop.
    stream: list[int] = []
    for sentence in synthetic_sentences(400, seed + 1):
        stream.extend(tokenizer.encode(sentence, add_eos=True))
    data = torch.tensor(stream, dtype=torch.long)
    sampler = torch.Generator().manual_seed(seed + 2)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    final = math.inf
    for _ in range(steps):
        starts = torch.randint(0, len(data) - seq_len - 1, (batch_size,), generator=sampler)
        ids = torch.stack([data[s : s + seq_len + 1] for s in starts])
        inputs, targets = ids[:, :-1], ids[:, 1:]
        logits = model.forward_embeddings(model.embed_tokens(inputs))
        loss = F.cross_entropy(logits.reshape(-1, config.vocab_size), targets.reshape(-1))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        final = loss.item()
    model.eval()
    return model, final
