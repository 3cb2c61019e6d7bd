"""Variant assembly: per-role frontends, a fusion strategy, and the frozen backbone.

An AudioTextModel owns the trainable audio side (layer aggregators,
modality adapters, fusion parameters, projections, boundary vectors) and a
frozen causal backbone. Variants:

* ``single-<role>``: one encoder, adapted and projected straight into the
  sequence;
* ``ca``: all four encoders adapted to 25 frames/s in a shared native
  width, fused by stacked cross-attention, projected once;
* ``p``: auxiliary encoders compressed to 20-token latent blocks (no
  temporal adapter) forming a 60-token prefix ahead of the adapted content
  stream.

The ensemble strategy is inference-only and lives in EnsembleModel: it
stitches a trained ``ca`` model and a trained ``single-content`` model into
one sequence and introduces no parameters of its own.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import Tensor, nn

from .backbone import (
    BackboneConfig,
    ByteTokenizer,
    CausalBackbone,
    TargetSpan,
    freeze_fingerprint,
    response_ce_loss,
)
from .checkpoint import arrays_to_state, load_arrays, save_arrays, state_to_arrays
from .encoders import (
    ROLE_CONTENT,
    ROLE_ORDER,
    AudioRef,
    BankConfig,
    EncoderSpec,
    LayerFeatures,
)
from .errors import IncompatibleCheckpointError, InvalidInputError, InvalidSpecError
from .frontend import (
    ConvDownsampler,
    FrameMatrix,
    LayerAggregator,
    LinearProjection,
    MlpAdapter,
)
from .fusion import (
    AUX_ROLE_ORDER,
    AudioPromptSequence,
    BoundaryPair,
    CrossAttentionFusion,
    LatentCompressor,
    Segment,
    TAG_INSTRUCTION,
    TAG_PROMPT,
    TAG_TARGET,
    assemble_ensemble_e,
    assemble_prefix_p,
    fuse_ca,
    wrap_audio_prompt,
)

VARIANT_CA = "ca"
VARIANT_P = "p"
VARIANT_E = "e"


def single_variant(role: str) -> str:
    return f"single-{role}"


SINGLE_VARIANTS = tuple(single_variant(role) for role in ROLE_ORDER)
TRAINABLE_VARIANTS = SINGLE_VARIANTS + (VARIANT_CA, VARIANT_P)

DEFAULT_GUIDE_TEXTS = (
    "Listen to the audio in two passes focusing on different characteristics.",
    "Pass one:",
    "Pass two:",
)


class EncoderFrontend(nn.Module):
    """Aggregates one encoder's layer stack and optionally adapts the rate."""

    def __init__(self, spec: EncoderSpec, mlp_hidden: int, generator: torch.Generator,
                 with_adapter: bool = True):
        super().__init__()
        self.spec = spec
        self.aggregator = LayerAggregator(spec.num_layers)
        if not with_adapter:
            self.adapter = None
        elif spec.native_rate == 50:
            self.adapter = ConvDownsampler(spec.feature_dim, generator)
        else:
            self.adapter = MlpAdapter(spec.feature_dim, mlp_hidden, generator)

    def forward(self, features: LayerFeatures) -> FrameMatrix:
        if features.feature_dim != self.spec.feature_dim:
            raise InvalidInputError(
                f"features are {features.feature_dim}-dim, "
                f"frontend expects {self.spec.feature_dim}"
            )
        aggregated = self.aggregator.aggregate(features)
        return self.adapter(aggregated) if self.adapter is not None else aggregated


class AudioTextModel(nn.Module):
    """One trainable variant over an encoder bank and a frozen backbone."""

    def __init__(self, bank: BankConfig, backbone: CausalBackbone, variant: str,
                 mlp_hidden: int = 128, heads: int = 4, ca_depth: int = 2,
                 ff_mult: int = 4, num_latents: int = 20, seed: int = 0):
        super().__init__()
        if variant not in TRAINABLE_VARIANTS:
            raise InvalidInputError(
                f"unknown variant {variant!r}; expected one of {TRAINABLE_VARIANTS} "
                f"(the ensemble strategy is inference-only)"
            )
        self.bank = bank
        self.variant = variant
        self.hparams = {
            "mlp_hidden": mlp_hidden, "heads": heads, "ca_depth": ca_depth,
            "ff_mult": ff_mult, "num_latents": num_latents, "seed": seed,
        }
        self.backbone = backbone
        for param in self.backbone.parameters():
            param.requires_grad_(False)
        self.tokenizer = ByteTokenizer()

        generator = torch.Generator().manual_seed(seed)
        lm_dim = backbone.config.dim
        self.frontends = nn.ModuleDict()
        self.fusion = None
        self.compressors = None
        self.prefix_boundary = None

        if variant in SINGLE_VARIANTS:
            role = variant.removeprefix("single-")
            spec = bank.specs[role]
            self.frontends[role] = EncoderFrontend(spec, mlp_hidden, generator)
            self.projection = LinearProjection(spec.feature_dim, lm_dim, generator)
        elif variant == VARIANT_CA:
            dims = {spec.feature_dim for spec in bank.specs.values()}
            if len(dims) != 1:
                raise InvalidSpecError(
                    f"cross-attention fusion needs one shared native width, got {sorted(dims)}"
                )
            shared = dims.pop()
            for role in ROLE_ORDER:
                self.frontends[role] = EncoderFrontend(bank.specs[role], mlp_hidden, generator)
            self.fusion = CrossAttentionFusion(shared, heads=heads, depth=ca_depth,
                                               ff_mult=ff_mult, generator=generator)
            self.projection = LinearProjection(shared, lm_dim, generator)
        else:  # latent-prefix variant
            content_spec = bank.specs[ROLE_CONTENT]
            self.frontends[ROLE_CONTENT] = EncoderFrontend(content_spec, mlp_hidden, generator)
            self.compressors = nn.ModuleDict()
            for role in AUX_ROLE_ORDER:
                self.frontends[role] = EncoderFrontend(bank.specs[role], mlp_hidden,
                                                       generator, with_adapter=False)
                self.compressors[role] = LatentCompressor(
                    bank.specs[role].feature_dim, lm_dim, num_latents=num_latents,
                    heads=heads, ff_mult=ff_mult, generator=generator,
                )
            self.projection = LinearProjection(content_spec.feature_dim, lm_dim, generator)
            self.prefix_boundary = BoundaryPair(lm_dim, generator)

        self.boundary = BoundaryPair(lm_dim, generator)

    @property
    def active_roles(self) -> tuple[str, ...]:
        if self.variant in SINGLE_VARIANTS:
            return (self.variant.removeprefix("single-"),)
        return ROLE_ORDER

    def features_for(self, audio: AudioRef) -> dict[str, LayerFeatures]:
        return {role: self.bank.features_for(audio, role) for role in self.active_roles}

    def audio_region(self, features: dict[str, LayerFeatures]) -> AudioPromptSequence | FrameMatrix:
        missing = [role for role in self.active_roles if role not in features]
        if missing:
            raise InvalidInputError(f"missing features for roles: {missing}")
        if self.variant in SINGLE_VARIANTS:
            role = self.active_roles[0]
            return self.projection(self.frontends[role](features[role]))
        if self.variant == VARIANT_CA:
            adapted = {role: self.frontends[role](features[role]) for role in ROLE_ORDER}
            fused = fuse_ca(adapted[ROLE_CONTENT], *(adapted[r] for r in AUX_ROLE_ORDER),
                            self.fusion)
            return self.projection(fused)
        content = self.projection(self.frontends[ROLE_CONTENT](features[ROLE_CONTENT]))
        blocks = [
            self.compressors[role](self.frontends[role](features[role]))
            for role in AUX_ROLE_ORDER
        ]
        return assemble_prefix_p(*blocks, content, self.prefix_boundary)

    def text_segment(self, tag: str, ids: list[int], name: str | None = None) -> Segment:
        return Segment(tag, self.backbone.embed_tokens(ids), token_ids=tuple(ids), name=name)

    def assemble(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
                 target_ids: list[int] | None = None) -> AudioPromptSequence:
        region = self.audio_region(features)
        prompt = self.text_segment(TAG_PROMPT, prompt_ids, name="prompt")
        target = self.text_segment(TAG_TARGET, target_ids, name="target") if target_ids else None
        return wrap_audio_prompt(region, prompt, target, self.boundary)

    def forward(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
                target_ids: list[int] | None = None) -> tuple[Tensor, AudioPromptSequence]:
        seq = self.assemble(features, prompt_ids, target_ids)
        return self.backbone.forward_embeddings(seq.embeddings()), seq

    def loss(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
             target_ids: list[int]) -> Tensor:
        logits, seq = self.forward(features, prompt_ids, target_ids)
        return response_ce_loss(logits, seq.token_ids(), TargetSpan(*seq.target_span()))

    def generate(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
                 max_new_tokens: int) -> list[int]:
        seq = self.assemble(features, prompt_ids)
        return self.backbone.generate(seq.embeddings(), max_new_tokens)

    def census(self) -> dict[str, Tensor]:
        """Named trainable parameters — everything except the frozen backbone."""
        return {
            name: param for name, param in self.named_parameters()
            if param.requires_grad and not name.startswith("backbone.")
        }

    def config_snapshot(self) -> dict:
        return {
            "variant": self.variant,
            **self.hparams,
            "bank": [
                {
                    "name": spec.name, "role": spec.role, "native_rate": spec.native_rate,
                    "feature_dim": spec.feature_dim,
                    "layer_indices": list(spec.layer_indices), "source": spec.source,
                }
                for spec in self.bank.specs.values()
            ],
            "backbone": self.backbone.config.to_dict(),
        }


def model_from_snapshot(snapshot: dict, backbone: CausalBackbone | None = None) -> AudioTextModel:
    if backbone is None:
        backbone = CausalBackbone(BackboneConfig.from_dict(snapshot["backbone"]),
                                  generator=torch.Generator().manual_seed(0))
    specs = {
        entry["role"]: EncoderSpec(
            name=entry["name"], role=entry["role"], native_rate=entry["native_rate"],
            feature_dim=entry["feature_dim"], layer_indices=tuple(entry["layer_indices"]),
            source=entry["source"],
        )
        for entry in snapshot["bank"]
    }
    bank = BankConfig(specs={role: specs[role] for role in ROLE_ORDER})
    hparams = {key: snapshot[key] for key in
               ("mlp_hidden", "heads", "ca_depth", "ff_mult", "num_latents", "seed")}
    return AudioTextModel(bank, backbone, snapshot["variant"], **hparams)


def save_model(path: str | Path, model: AudioTextModel, step: int = 0,
               extra: dict | None = None) -> None:
    metadata = {
        "kind": "model",
        "config": model.config_snapshot(),
        "fingerprint": freeze_fingerprint(model.backbone),
        "census": sorted(model.census()),
        "step": step,
    }
    if extra:
        metadata.update(extra)
    save_arrays(path, state_to_arrays(model), metadata)


def load_model(path: str | Path) -> tuple[AudioTextModel, dict]:
    arrays, metadata = load_arrays(path)
    if metadata.get("kind") != "model":
        raise IncompatibleCheckpointError(f"{path} is not a model checkpoint")
    model = model_from_snapshot(metadata["config"])
    arrays_to_state(model, arrays)
    for param in model.backbone.parameters():
        param.requires_grad_(False)
    actual = freeze_fingerprint(model.backbone)
    if actual != metadata["fingerprint"]:
        raise IncompatibleCheckpointError(
            f"backbone fingerprint mismatch in {path}: "
            f"manifest {metadata['fingerprint'][:12]}…, loaded {actual[:12]}…"
        )
    model.eval()
    return model, metadata


class EnsembleModel:
    """Inference-only two-pass assembly over two independently trained models.

    The fused stream comes from a trained cross-attention model and the
    content stream from a trained single-encoder content model; guide texts
    separate the two passes. No parameters are introduced: each stream is
    delimited by its own source model's trained boundary pair.
    """

    def __init__(self, ca_model: AudioTextModel, content_model: AudioTextModel,
                 guide_texts: tuple[str, str, str] = DEFAULT_GUIDE_TEXTS):
        if ca_model.variant != VARIANT_CA:
            raise InvalidInputError(
                f"first model must be the ca variant, got {ca_model.variant!r}"
            )
        if content_model.variant != single_variant(ROLE_CONTENT):
            raise InvalidInputError(
                f"second model must be single-content, got {content_model.variant!r}"
            )
        if freeze_fingerprint(ca_model.backbone) != freeze_fingerprint(content_model.backbone):
            raise IncompatibleCheckpointError(
                "ensemble members must share the same frozen backbone"
            )
        if ca_model.bank.specs[ROLE_CONTENT] != content_model.bank.specs[ROLE_CONTENT]:
            raise IncompatibleCheckpointError(
                "ensemble members must agree on the content encoder spec"
            )
        self.ca_model = ca_model
        self.content_model = content_model
        self.guide_texts = tuple(guide_texts)
        self.variant = VARIANT_E
        self.tokenizer = ByteTokenizer()

    @property
    def backbone(self) -> CausalBackbone:
        return self.ca_model.backbone

    @property
    def bank(self) -> BankConfig:
        return self.ca_model.bank

    def features_for(self, audio: AudioRef) -> dict[str, LayerFeatures]:
        return self.ca_model.features_for(audio)

    def _guide_segments(self) -> tuple[Segment, Segment, Segment]:
        names = ("guide-overall", "guide-pass-one", "guide-pass-two")
        segs = []
        for text, name in zip(self.guide_texts, names):
            ids = self.tokenizer.encode(text)
            segs.append(Segment(TAG_INSTRUCTION, self.backbone.embed_tokens(ids),
                                token_ids=tuple(ids), name=name))
        return tuple(segs)

    def audio_region(self, features: dict[str, LayerFeatures]) -> AudioPromptSequence:
        fused = self.ca_model.audio_region(features)
        content = self.content_model.audio_region({ROLE_CONTENT: features[ROLE_CONTENT]})
        return assemble_ensemble_e(fused, content, self._guide_segments(),
                                   self.ca_model.boundary, self.content_model.boundary)

    def assemble(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
                 target_ids: list[int] | None = None) -> AudioPromptSequence:
        region = self.audio_region(features)
        prompt = Segment(TAG_PROMPT, self.backbone.embed_tokens(prompt_ids),
                         token_ids=tuple(prompt_ids), name="prompt")
        target = None
        if target_ids:
            target = Segment(TAG_TARGET, self.backbone.embed_tokens(target_ids),
                             token_ids=tuple(target_ids), name="target")
        return wrap_audio_prompt(region, prompt, target, None)

    def generate(self, features: dict[str, LayerFeatures], prompt_ids: list[int],
                 max_new_tokens: int) -> list[int]:
        seq = self.assemble(features, prompt_ids)
        with torch.no_grad():
            return self.backbone.generate(seq.embeddings(), max_new_tokens)

    def census(self) -> dict[str, Tensor]:
        """The ensemble introduces no trainable parameters of its own."""
        return {}


def load_ensemble(ca_path: str | Path, content_path: str | Path,
                  guide_texts: tuple[str, str, str] = DEFAULT_GUIDE_TEXTS) -> EnsembleModel:
    ca_model, _ = load_model(ca_path)
    content_model, _ = load_model(content_path)
    return EnsembleModel(ca_model, content_model, guide_texts)
