import numpy as np
import pytest

from alarm.encoders import (
    ROLE_CONTENT,
    ROLE_MUSIC,
    ROLE_ORDER,
    ROLE_SOUND,
    ROLE_SPEECH_TRAITS,
    AudioRef,
    EncoderSpec,
    default_toy_bank,
    encode_pseudo,
    export_features,
    frame_count,
    import_features,
    load_bank_config,
    validate_bank,
)
from alarm.errors import (
    BankError,
    FeatureIOError,
    FormatError,
    InvalidInputError,
    InvalidSpecError,
    SpecMismatchError,
)


def content_spec(dim=64, layers=(8, 16, 24, 32)):
    return EncoderSpec("pseudo-content", ROLE_CONTENT, 50, dim, layers)


def music_spec(dim=64):
    return EncoderSpec("pseudo-music", ROLE_MUSIC, 25, dim, (5, 9, 13))


class TestEncoderSpec:
    def test_rejects_zero_feature_dim(self):
        with pytest.raises(InvalidSpecError):
            EncoderSpec("bad", ROLE_CONTENT, 50, 0, (1, 2))

    def test_rejects_empty_layers(self):
        with pytest.raises(InvalidSpecError):
            EncoderSpec("bad", ROLE_CONTENT, 50, 64, ())

    def test_rejects_non_increasing_layers(self):
        with pytest.raises(InvalidSpecError):
            EncoderSpec("bad", ROLE_CONTENT, 50, 64, (4, 4, 8))

    def test_rejects_rate_role_mismatch(self):
        with pytest.raises(InvalidSpecError):
            EncoderSpec("bad", ROLE_MUSIC, 50, 64, (1, 2))

    def test_rejects_unknown_role(self):
        with pytest.raises(InvalidSpecError):
            EncoderSpec("bad", "vision", 50, 64, (1, 2))


class TestEncodePseudo:
    def test_content_shape_10s(self):
        # frame count oracle: round(10.0 * 50) = 500
        feats = encode_pseudo(AudioRef("a", 10.0, seed=1), content_spec())
        assert len(feats.layers) == 4
        assert all(layer.shape == (500, 64) for layer in feats.layers)
        assert feats.token_rate == 50

    def test_music_shape_4s(self):
        # round(4.0 * 25) = 100
        feats = encode_pseudo(AudioRef("a", 4.0, seed=1), music_spec())
        assert feats.num_frames == 100

    def test_zero_duration_rejected(self):
        with pytest.raises(InvalidInputError):
            encode_pseudo(AudioRef("a", 0.0, seed=1), content_spec())

    def test_negative_duration_rejected(self):
        with pytest.raises(InvalidInputError):
            encode_pseudo(AudioRef("a", -1.0, seed=1), content_spec())

    def test_deterministic_bit_identical(self):
        a = encode_pseudo(AudioRef("clip-7", 2.3, seed=42), content_spec())
        b = encode_pseudo(AudioRef("clip-7", 2.3, seed=42), content_spec())
        for la, lb in zip(a.layers, b.layers):
            assert la.tobytes() == lb.tobytes()

    def test_seed_and_id_change_output(self):
        base = encode_pseudo(AudioRef("clip", 1.0, seed=1), content_spec())
        other_seed = encode_pseudo(AudioRef("clip", 1.0, seed=2), content_spec())
        other_id = encode_pseudo(AudioRef("clip2", 1.0, seed=1), content_spec())
        assert not np.array_equal(base.layers[0], other_seed.layers[0])
        assert not np.array_equal(base.layers[0], other_id.layers[0])

    def test_layers_differ_from_each_other(self):
        feats = encode_pseudo(AudioRef("a", 1.0, seed=3), content_spec())
        assert not np.array_equal(feats.layers[0], feats.layers[1])

    def test_rate_law_over_random_durations(self):
        # |T - duration * rate| <= 0.5 for every pseudo output
        rng = np.random.default_rng(0)
        for _ in range(25):
            duration = float(rng.uniform(0.1, 30.0))
            for spec in (content_spec(dim=8), music_spec(dim=8)):
                feats = encode_pseudo(AudioRef("r", duration, seed=5), spec)
                assert abs(feats.num_frames - duration * spec.native_rate) <= 0.5

    def test_round_half_up(self):
        assert frame_count(0.05, 50) == 3  # 2.5 rounds up
        assert frame_count(0.03, 50) == 2  # 1.5 rounds up

    def test_entries_finite_and_standardized(self):
        feats = encode_pseudo(AudioRef("a", 8.0, seed=9), content_spec())
        layer = feats.layers[0].astype(np.float64)
        assert np.isfinite(layer).all()
        assert np.allclose(layer.mean(axis=0), 0.0, atol=1e-4)
        assert np.allclose(layer.std(axis=0), 1.0, atol=1e-3)


class TestImportFeatures:
    def imported_spec(self, dim=32, layers=(1, 2, 3)):
        return EncoderSpec("imp", ROLE_CONTENT, 50, dim, layers, source="imported")

    def write_file(self, tmp_path, n_layers=3, frames=250, dim=32, rate=50, layer_ids=None):
        rng = np.random.default_rng(1)
        feats_path = str(tmp_path / "f.feat")
        from alarm.encoders import LayerFeatures

        layers = [rng.standard_normal((frames, dim)).astype(np.float32) for _ in range(n_layers)]
        lf = LayerFeatures("imp", layers, rate, frames / rate)
        export_features(feats_path, lf, layer_ids or tuple(range(1, n_layers + 1)))
        return feats_path, lf

    def test_round_trip(self, tmp_path):
        path, original = self.write_file(tmp_path)
        loaded = import_features(AudioRef("a", 5.0, path=path), self.imported_spec())
        assert loaded.num_frames == 250
        assert loaded.token_rate == 50
        for la, lb in zip(loaded.layers, original.layers):
            assert np.array_equal(la, lb)

    def test_layer_count_mismatch(self, tmp_path):
        path, _ = self.write_file(tmp_path, n_layers=2)
        with pytest.raises(FormatError):
            import_features(AudioRef("a", 5.0, path=path), self.imported_spec())

    def test_rate_mismatch(self, tmp_path):
        path, _ = self.write_file(tmp_path, rate=50)
        spec = EncoderSpec("imp", ROLE_MUSIC, 25, 32, (1, 2, 3), source="imported")
        with pytest.raises(SpecMismatchError):
            import_features(AudioRef("a", 5.0, path=path), spec)

    def test_dim_mismatch(self, tmp_path):
        path, _ = self.write_file(tmp_path, dim=16)
        with pytest.raises(FormatError):
            import_features(AudioRef("a", 5.0, path=path), self.imported_spec(dim=32))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FeatureIOError):
            import_features(
                AudioRef("a", 5.0, path=str(tmp_path / "missing.feat")), self.imported_spec()
            )

    def test_truncated_payload(self, tmp_path):
        path, _ = self.write_file(tmp_path)
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-8])
        with pytest.raises(FormatError):
            import_features(AudioRef("a", 5.0, path=path), self.imported_spec())

    def test_frame_count_tolerance_one(self, tmp_path):
        # 249 frames for a declared 5.0 s clip at 50 frames/s is within +/- 1
        path, _ = self.write_file(tmp_path, frames=249)
        loaded = import_features(AudioRef("a", 5.0, path=path), self.imported_spec())
        assert loaded.num_frames == 249

    def test_frame_count_beyond_tolerance_rejected(self, tmp_path):
        path, _ = self.write_file(tmp_path, frames=240)
        with pytest.raises(FormatError):
            import_features(AudioRef("a", 5.0, path=path), self.imported_spec())


class TestBank:
    def test_valid_bank(self):
        bank = default_toy_bank()
        assert bank.num_encoders == 4
        assert bank.order == ROLE_ORDER
        assert tuple(bank.specs) == ROLE_ORDER

    def test_naive_concat_rate_is_175(self):
        assert default_toy_bank().naive_concat_rate == 175

    def test_naive_concat_frames_10s(self):
        assert default_toy_bank().naive_concat_frames(10.0) == 1750

    def test_missing_role(self):
        specs = [default_toy_bank().specs[r] for r in (ROLE_CONTENT, ROLE_MUSIC, ROLE_SOUND)]
        with pytest.raises(BankError):
            validate_bank(specs)

    def test_duplicate_role(self):
        bank = default_toy_bank()
        specs = list(bank.specs.values()) + [content_spec()]
        with pytest.raises(BankError):
            validate_bank(specs)

    def test_load_bank_config_json(self, tmp_path):
        import json

        entries = [
            {
                "name": f"enc-{role}",
                "role": role,
                "native_rate": 25 if role == ROLE_MUSIC else 50,
                "feature_dim": 16,
                "layer_indices": [1, 2],
            }
            for role in (ROLE_SPEECH_TRAITS, ROLE_CONTENT, ROLE_SOUND, ROLE_MUSIC)
        ]
        path = tmp_path / "bank.json"
        path.write_text(json.dumps({"encoders": entries}))
        bank = load_bank_config(str(path))
        assert tuple(bank.specs) == ROLE_ORDER
        assert bank.specs[ROLE_MUSIC].native_rate == 25
