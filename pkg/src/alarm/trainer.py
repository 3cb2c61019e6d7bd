"""Adapter training against the frozen backbone.

Optimizes only the model census (aggregators, adapters, fusion, boundary
vectors, projections) with AdamW under a linear-warmup + cosine-decay
schedule. The backbone never moves; a fingerprint taken at construction is
re-checked against every saved checkpoint.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .backbone import PAD_ID, TargetSpan, freeze_fingerprint, response_ce_loss
from .encoders import ROLE_CONTENT, ROLE_ORDER, AudioRef
from .errors import (
    DivergedError,
    IncompatibleCheckpointError,
    InvalidInputError,
    OutOfRangeError,
)
from .model import (
    VARIANT_CA,
    AudioTextModel,
    load_model,
    save_model,
    single_variant,
)


@dataclass(frozen=True)
class TrainExample:
    """One training instance: an audio reference, a prompt, and the response."""

    audio: AudioRef
    prompt: str
    response: str


@dataclass
class TrainConfig:
    effective_batch: int = 8
    micro_batch: int | None = None
    epochs: int = 2
    warmup_steps: int = 30
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise InvalidInputError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise InvalidInputError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.effective_batch < 1:
            raise InvalidInputError("effective_batch must be >= 1")
        if self.micro_batch is not None and not 1 <= self.micro_batch <= self.effective_batch:
            raise InvalidInputError("micro_batch must be in [1, effective_batch]")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


def paper_preset(**overrides) -> TrainConfig:
    """Full-scale defaults: effective batch 64, 2 epochs, warmup 1500, peak 1e-4."""
    base = dict(effective_batch=64, epochs=2, warmup_steps=1500, peak_lr=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


def paper_single_encoder_preset(**overrides) -> TrainConfig:
    """Single-encoder runs use effective batch 32 for 2 epochs."""
    return paper_preset(effective_batch=32, **overrides)


def schedule_lr(step: float, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero at total_steps."""
    if step < 0 or step > total_steps:
        raise OutOfRangeError(f"step {step} outside [0, {total_steps}]")
    warmup = config.warmup_steps
    if step <= warmup:
        return config.peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    final_path: Path | None
    epoch_paths: list[Path]
    logs: list[dict]
    steps: int

    @property
    def final_loss(self) -> float | None:
        return self.logs[-1]["loss"] if self.logs else None


class Trainer:
    """Gradient-accumulating AdamW loop over one trainable variant."""

    def __init__(self, model: AudioTextModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.initial_digest = freeze_fingerprint(model.backbone)
        census = model.census()
        if not census:
            raise InvalidInputError("model has no trainable parameters")
        decay = [p for p in census.values() if p.ndim >= 2]
        no_decay = [p for p in census.values() if p.ndim < 2]
        self.optimizer = torch.optim.AdamW(
            [
                {"params": decay, "weight_decay": config.weight_decay},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=0.0, betas=config.betas, eps=config.eps,
        )
        self.step = 0
        self._features = {}

    def features_for(self, audio: AudioRef):
        if audio.id not in self._features:
            self._features[audio.id] = self.model.features_for(audio)
        return self._features[audio.id]

    def _sequence(self, example: TrainExample):
        tokenizer = self.model.tokenizer
        return self.model.assemble(
            self.features_for(example.audio),
            tokenizer.encode(example.prompt),
            tokenizer.encode(example.response, add_eos=True),
        )

    def batch_loss(self, examples: list[TrainExample]) -> torch.Tensor:
        """Mean over sequences of the per-sequence mean span cross-entropy."""
        seqs = [self._sequence(ex) for ex in examples]
        t_max = max(seq.total_length for seq in seqs)
        pad_row = self.model.backbone.tok_emb.weight[PAD_ID : PAD_ID + 1]
        stacked = torch.stack([
            torch.cat([seq.embeddings(), pad_row.expand(t_max - seq.total_length, -1)])
            if seq.total_length < t_max else seq.embeddings()
            for seq in seqs
        ])
        logits = self.model.backbone.forward_embeddings(stacked)
        losses = [
            response_ce_loss(logits[i, : seq.total_length], seq.token_ids(),
                             TargetSpan(*seq.target_span()))
            for i, seq in enumerate(seqs)
        ]
        return torch.stack(losses).mean()

    def _accumulate(self, batch: list[TrainExample]) -> float:
        """Backward over micro-batches; grads and value equal the full-batch mean."""
        micro = self.config.micro_batch or self.config.effective_batch
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for start in range(0, len(batch), micro):
            chunk = batch[start : start + micro]
            loss = self.batch_loss(chunk) * (len(chunk) / len(batch))
            loss.backward()
            total += loss.item()
        return total

    def train_step(self, batch: list[TrainExample], lr: float) -> float:
        if not batch:
            raise InvalidInputError("empty batch")
        loss_value = self._accumulate(batch)
        if not math.isfinite(loss_value):
            raise DivergedError(
                f"non-finite loss {loss_value} at step {self.step + 1} (lr {lr:.3e})"
            )
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step += 1
        return loss_value

    def fit(self, examples: list[TrainExample], out_dir: str | Path | None = None,
            log_path: str | Path | None = None) -> TrainResult:
        if not examples:
            raise InvalidInputError("training corpus is empty")
        cfg = self.config
        per_epoch = math.ceil(len(examples) / cfg.effective_batch)
        total_steps = cfg.epochs * per_epoch
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)
        rng = random.Random(cfg.seed)
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        logs: list[dict] = []
        epoch_paths: list[Path] = []
        done = False
        epoch = 0
        while not done and epoch < cfg.epochs:
            epoch += 1
            order = list(range(len(examples)))
            rng.shuffle(order)
            for start in range(0, len(order), cfg.effective_batch):
                if self.step >= total_steps:
                    done = True
                    break
                batch = [examples[i] for i in order[start : start + cfg.effective_batch]]
                lr = schedule_lr(self.step + 1, total_steps, cfg)
                loss = self.train_step(batch, lr)
                logs.append({"step": self.step, "lr": lr, "loss": loss})
            if out_dir is not None and not done:
                path = out_dir / f"epoch-{epoch}.ckpt"
                self._save(path)
                epoch_paths.append(path)
        final_path = None
        if out_dir is not None:
            final_path = out_dir / "final.ckpt"
            self._save(final_path)
        if log_path is not None:
            with open(log_path, "w", encoding="utf-8") as fh:
                for entry in logs:
                    fh.write(json.dumps(entry) + "\n")
        return TrainResult(final_path, epoch_paths, logs, self.step)

    def _save(self, path: Path) -> None:
        current = freeze_fingerprint(self.model.backbone)
        if current != self.initial_digest:
            raise DivergedError("backbone parameters changed during training")
        save_model(path, self.model, step=self.step,
                   extra={"train_config": self.config.to_dict()})


def _copy_state(dst: torch.nn.Module, src: torch.nn.Module, context: str) -> None:
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    if set(src_state) != set(dst_state):
        raise IncompatibleCheckpointError(f"{context}: parameter names differ")
    for name, tensor in src_state.items():
        if tuple(tensor.shape) != tuple(dst_state[name].shape):
            raise IncompatibleCheckpointError(
                f"{context}: shape mismatch for {name} "
                f"({tuple(tensor.shape)} vs {tuple(dst_state[name].shape)})"
            )
    dst.load_state_dict(src_state)


def init_from_single_encoder(ca_model: AudioTextModel,
                             sources: dict[str, str | Path]) -> AudioTextModel:
    """Warm-start a cross-attention model from four single-encoder checkpoints.

    Per-role aggregators and adapters are copied bit-exactly and frozen; the
    content model also donates its projection (frozen) and boundary pair
    (copied, still trainable). Fusion parameters keep their fresh
    residual-identity initialization, leaving fusion + boundary as the only
    trainable census.
    """
    if ca_model.variant != VARIANT_CA:
        raise InvalidInputError(f"expected a ca-variant model, got {ca_model.variant!r}")
    missing = [role for role in ROLE_ORDER if role not in sources]
    if missing:
        raise IncompatibleCheckpointError(f"missing single-encoder checkpoints for {missing}")
    ca_digest = freeze_fingerprint(ca_model.backbone)
    for role in ROLE_ORDER:
        source, _ = load_model(sources[role])
        if source.variant != single_variant(role):
            raise IncompatibleCheckpointError(
                f"checkpoint for role {role!r} holds variant {source.variant!r}"
            )
        if freeze_fingerprint(source.backbone) != ca_digest:
            raise IncompatibleCheckpointError(
                f"single-encoder model for {role!r} was trained on a different backbone"
            )
        _copy_state(ca_model.frontends[role], source.frontends[role], f"frontend {role!r}")
        for param in ca_model.frontends[role].parameters():
            param.requires_grad_(False)
        if role == ROLE_CONTENT:
            _copy_state(ca_model.projection, source.projection, "content projection")
            for param in ca_model.projection.parameters():
                param.requires_grad_(False)
            _copy_state(ca_model.boundary, source.boundary, "boundary pair")
    return ca_model
