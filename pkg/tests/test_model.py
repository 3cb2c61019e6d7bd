"""Variant model assembly, census, and checkpoint round-trip tests."""

import numpy as np
import pytest
import torch

from alarm.backbone import BackboneConfig, CausalBackbone, ByteTokenizer
from alarm.checkpoint import load_arrays, save_arrays
from alarm.encoders import (
    ROLE_CONTENT,
    ROLE_MUSIC,
    ROLE_ORDER,
    ROLE_SOUND,
    ROLE_SPEECH_TRAITS,
    AudioRef,
    EncoderSpec,
    BankConfig,
    default_toy_bank,
)
from alarm.errors import (
    IncompatibleCheckpointError,
    InvalidInputError,
    InvalidSpecError,
)
from alarm.fusion import AudioPromptSequence
from alarm.model import (
    AudioTextModel,
    EnsembleModel,
    SINGLE_VARIANTS,
    VARIANT_CA,
    VARIANT_P,
    load_model,
    model_from_snapshot,
    save_model,
    single_variant,
)


def tiny_backbone(seed=0, dim=16, max_context=1200):
    config = BackboneConfig(dim=dim, n_layers=1, n_heads=2, ff_dim=32,
                            max_context=max_context)
    return CausalBackbone(config, generator=torch.Generator().manual_seed(seed))


def make_model(variant, seed=0, backbone_seed=0, feature_dim=16):
    return AudioTextModel(default_toy_bank(feature_dim=feature_dim),
                          tiny_backbone(seed=backbone_seed), variant,
                          mlp_hidden=32, heads=2, seed=seed)


CLIP = AudioRef(id="clip-10s", duration=10.0, seed=7)


class TestRatePipeline:
    def test_adapted_streams_are_250_frames_for_10s(self):
        model = make_model(VARIANT_CA)
        features = model.features_for(CLIP)
        for role in ROLE_ORDER:
            adapted = model.frontends[role](features[role])
            assert adapted.data.shape[0] == 250
            assert adapted.token_rate == 25

    def test_ca_region_is_250_tokens(self):
        model = make_model(VARIANT_CA)
        region = model.audio_region(model.features_for(CLIP))
        assert region.data.shape == (250, 16)
        assert region.dim_space == "backbone"

    def test_p_region_is_62_plus_250(self):
        model = make_model(VARIANT_P)
        region = model.audio_region(model.features_for(CLIP))
        assert isinstance(region, AudioPromptSequence)
        assert region.total_length == 62 + 250

    def test_naive_concat_would_be_1750(self):
        bank = default_toy_bank(feature_dim=16)
        assert bank.naive_concat_rate == 175
        assert bank.naive_concat_frames(10.0) == 1750


class TestCensus:
    def test_backbone_always_excluded_and_frozen(self):
        for variant in (*SINGLE_VARIANTS, VARIANT_CA, VARIANT_P):
            model = make_model(variant)
            census = model.census()
            assert census, variant
            assert all(not name.startswith("backbone.") for name in census)
            assert all(param.requires_grad for param in census.values())
            assert all(not p.requires_grad for p in model.backbone.parameters())

    def test_single_content_census_contents(self):
        census = make_model(single_variant(ROLE_CONTENT)).census()
        names = set(census)
        assert "frontends.content.aggregator.weights" in names
        assert "projection.linear.weight" in names
        assert {"boundary.pre", "boundary.post"} <= names
        assert any(".adapter.conv1." in name for name in names)

    def test_single_music_uses_mlp_adapter(self):
        names = set(make_model(single_variant(ROLE_MUSIC)).census())
        assert any(".adapter.up." in name for name in names)
        assert not any(".conv" in name for name in names)

    def test_ca_census_adds_fusion_stages(self):
        names = set(make_model(VARIANT_CA).census())
        assert any(name.startswith("fusion.stages.2.") for name in names)
        for role in ROLE_ORDER:
            assert f"frontends.{role}.aggregator.weights" in names

    def test_p_census_has_compressors_and_inner_boundary(self):
        model = make_model(VARIANT_P)
        names = set(model.census())
        assert {"prefix_boundary.pre", "prefix_boundary.post"} <= names
        for role in (ROLE_SPEECH_TRAITS, ROLE_MUSIC, ROLE_SOUND):
            assert f"compressors.{role}.latents" in names
            # Auxiliary streams feed the compressors directly, no adapter.
            assert not any(
                name.startswith(f"frontends.{role}.adapter.") for name in names
            )

    def test_unknown_variant_rejected(self):
        with pytest.raises(InvalidInputError):
            make_model("e")


class TestAssembly:
    def test_span_arithmetic_through_single_model(self):
        model = make_model(single_variant(ROLE_CONTENT))
        features = model.features_for(CLIP)
        prompt = list(range(65, 75))
        target = list(range(97, 117))
        seq = model.assemble(features, prompt, target)
        assert seq.total_length == 1 + 250 + 1 + 10 + 20 == 282
        assert seq.target_span() == (262, 282)

    def test_missing_role_features_raise(self):
        model = make_model(VARIANT_CA)
        features = model.features_for(CLIP)
        del features[ROLE_SOUND]
        with pytest.raises(InvalidInputError):
            model.audio_region(features)

    def test_loss_is_finite_and_flows_to_census_only(self):
        model = make_model(single_variant(ROLE_CONTENT))
        clip = AudioRef(id="short", duration=1.0, seed=3)
        loss = model.loss(model.features_for(clip), [65, 66], [100, 101, 102])
        assert torch.isfinite(loss)
        loss.backward()
        assert all(p.grad is None for p in model.backbone.parameters())
        grads = [p.grad for p in model.census().values() if p.grad is not None]
        assert grads and any(g.abs().max() > 0 for g in grads)

    def test_generate_budget_and_determinism(self):
        model = make_model(single_variant(ROLE_CONTENT))
        clip = AudioRef(id="short", duration=1.0, seed=3)
        features = model.features_for(clip)
        out1 = model.generate(features, [65, 66], 6)
        out2 = model.generate(features, [65, 66], 6)
        assert out1 == out2
        assert len(out1) <= 6

    def test_same_seed_builds_identical_models(self):
        a = make_model(VARIANT_P, seed=5)
        b = make_model(VARIANT_P, seed=5)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_ca_requires_shared_native_width(self):
        bank = default_toy_bank(feature_dim=16)
        specs = dict(bank.specs)
        wide = specs[ROLE_MUSIC]
        specs[ROLE_MUSIC] = EncoderSpec(
            name=wide.name, role=wide.role, native_rate=wide.native_rate,
            feature_dim=24, layer_indices=wide.layer_indices, source=wide.source,
        )
        with pytest.raises(InvalidSpecError):
            AudioTextModel(BankConfig(specs=specs), tiny_backbone(), VARIANT_CA,
                           mlp_hidden=32, heads=2)


class TestCheckpointRoundTrip:
    def test_forward_bit_identical_after_reload(self, tmp_path):
        model = make_model(single_variant(ROLE_CONTENT), seed=2)
        clip = AudioRef(id="rt", duration=1.0, seed=9)
        features = model.features_for(clip)
        logits, _ = model(features, [65], [66, 67])
        path = tmp_path / "model.ckpt"
        save_model(path, model, step=12)
        loaded, metadata = load_model(path)
        assert metadata["step"] == 12
        assert metadata["census"] == sorted(model.census())
        logits2, _ = loaded(features, [65], [66, 67])
        assert torch.equal(logits, logits2)

    def test_snapshot_rebuilds_equivalent_census(self):
        model = make_model(VARIANT_P, seed=4)
        rebuilt = model_from_snapshot(model.config_snapshot())
        assert sorted(rebuilt.census()) == sorted(model.census())
        assert rebuilt.variant == VARIANT_P

    def test_fingerprint_mismatch_detected(self, tmp_path):
        model = make_model(single_variant(ROLE_CONTENT))
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        arrays, metadata = load_arrays(path)
        arrays["backbone.final_norm.bias"] = arrays["backbone.final_norm.bias"] + 1e-6
        save_arrays(path, arrays, metadata)
        with pytest.raises(IncompatibleCheckpointError):
            load_model(path)

    def test_non_model_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "other.ckpt"
        save_arrays(path, {"w": np.zeros(3)}, metadata={"kind": "backbone"})
        with pytest.raises(IncompatibleCheckpointError):
            load_model(path)


class TestEnsemble:
    def test_region_arithmetic_and_no_census(self):
        ca = make_model(VARIANT_CA)
        content = make_model(single_variant(ROLE_CONTENT), seed=1)
        ensemble = EnsembleModel(ca, content)
        region = ensemble.audio_region(ensemble.features_for(CLIP))
        tok = ByteTokenizer()
        guide = sum(len(tok.encode(t)) for t in ensemble.guide_texts)
        assert region.audio_token_count() == 500
        assert region.total_length == guide + 4 + 500
        assert ensemble.census() == {}

    def test_effective_rate_is_50(self):
        ca = make_model(VARIANT_CA)
        content = make_model(single_variant(ROLE_CONTENT), seed=1)
        ensemble = EnsembleModel(ca, content)
        region = ensemble.audio_region(ensemble.features_for(CLIP))
        assert region.audio_token_count() / CLIP.duration == 50.0

    def test_backbone_mismatch_rejected(self):
        ca = make_model(VARIANT_CA, backbone_seed=0)
        content = make_model(single_variant(ROLE_CONTENT), backbone_seed=1)
        with pytest.raises(IncompatibleCheckpointError):
            EnsembleModel(ca, content)

    def test_variant_roles_enforced(self):
        content = make_model(single_variant(ROLE_CONTENT))
        with pytest.raises(InvalidInputError):
            EnsembleModel(content, content)
        ca = make_model(VARIANT_CA)
        with pytest.raises(InvalidInputError):
            EnsembleModel(ca, ca)

    def test_generation_deterministic(self):
        ca = make_model(VARIANT_CA)
        content = make_model(single_variant(ROLE_CONTENT), seed=1)
        ensemble = EnsembleModel(ca, content)
        clip = AudioRef(id="short", duration=1.0, seed=5)
        features = ensemble.features_for(clip)
        assert ensemble.generate(features, [65], 5) == ensemble.generate(features, [65], 5)
