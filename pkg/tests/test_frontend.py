import math

import numpy as np
import pytest
import torch

from alarm.encoders import LayerFeatures
from alarm.errors import InvalidInputError, RateError, TooShortError
from alarm.frontend import (
    DIM_SPACE_BACKBONE,
    DIM_SPACE_NATIVE,
    DTYPE,
    ConvDownsampler,
    FrameMatrix,
    LayerAggregator,
    LinearProjection,
    MlpAdapter,
    features_to_tensor,
)
from alarm.testing import check_gradients


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=gen(seed), dtype=DTYPE)


def feats(num_layers=4, frames=10, dim=8, rate=50, seed=0):
    rng = np.random.default_rng(seed)
    layers = [rng.standard_normal((frames, dim)).astype(np.float32) for _ in range(num_layers)]
    return LayerFeatures("enc", layers, rate, frames / rate)


class TestLayerAggregator:
    def test_zero_logits_give_mean(self):
        f = feats()
        agg = LayerAggregator(4)
        out = agg.aggregate(f)
        mean = features_to_tensor(f).mean(dim=0)
        assert torch.allclose(out.data, mean, atol=1e-12)
        assert out.token_rate == 50
        assert out.dim_space == DIM_SPACE_NATIVE

    def test_ln2_weights_give_two_thirds_one_third(self):
        # independent softmax oracle: alpha_i = exp(w_i) / sum exp(w_j)
        w = (math.log(2.0), 0.0)
        z = sum(math.exp(x) for x in w)
        alpha = [math.exp(x) / z for x in w]
        assert abs(alpha[0] - 2.0 / 3.0) < 1e-15 and abs(alpha[1] - 1.0 / 3.0) < 1e-15

        f = feats(num_layers=2)
        agg = LayerAggregator(2)
        with torch.no_grad():
            agg.weights.copy_(torch.tensor(w, dtype=DTYPE))
        out = agg.aggregate(f)
        stack = features_to_tensor(f)
        expected = alpha[0] * stack[0] + alpha[1] * stack[1]
        assert torch.allclose(out.data, expected, atol=1e-12)

    def test_single_layer_is_identity(self):
        f = feats(num_layers=1)
        agg = LayerAggregator(1)
        with torch.no_grad():
            agg.weights.fill_(5.0)
        out = agg.aggregate(f)
        assert torch.allclose(out.data, features_to_tensor(f)[0], atol=1e-15)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            LayerAggregator(3).aggregate(feats(num_layers=4))

    def test_softmax_normalization(self):
        agg = LayerAggregator(5)
        with torch.no_grad():
            agg.weights.copy_(rand(5, seed=3) * 10)
        alpha = torch.softmax(agg.weights, dim=0)
        assert abs(alpha.sum().item() - 1.0) < 1e-9
        assert (alpha > 0).all()

    def test_logit_shift_invariance(self):
        stack = rand(4, 6, 5, seed=1)
        agg = LayerAggregator(4)
        with torch.no_grad():
            agg.weights.copy_(rand(4, seed=2))
        base = agg(stack)
        with torch.no_grad():
            agg.weights += 3.7
        shifted = agg(stack)
        assert (base - shifted).abs().max().item() < 1e-12

    def test_gradients(self):
        stack = rand(3, 6, 4, seed=4).requires_grad_(True)
        agg = LayerAggregator(3)
        with torch.no_grad():
            agg.weights.copy_(rand(3, seed=5))
        coeffs = rand(6, 4, seed=6)

        def loss():
            return (agg(stack) * coeffs).sum()

        check_gradients(loss, [agg.weights, stack])


class TestConvDownsampler:
    def conv_len_oracle(self, t):
        # conv1: k=3 s=1 p=1, conv2: k=4 s=2 p=1
        l1 = (t + 2 * 1 - 3) // 1 + 1
        return (l1 + 2 * 1 - 4) // 2 + 1

    def test_500_to_250(self):
        assert self.conv_len_oracle(500) == 250
        adapter = ConvDownsampler(8, gen())
        out = adapter(FrameMatrix(rand(500, 8), token_rate=50))
        assert out.num_frames == 250
        assert out.token_rate == 25

    def test_501_to_250(self):
        assert self.conv_len_oracle(501) == 250
        adapter = ConvDownsampler(8, gen())
        out = adapter(FrameMatrix(rand(501, 8), token_rate=50))
        assert out.num_frames == 250

    def test_halving_law_all_lengths(self):
        adapter = ConvDownsampler(4, gen())
        for t in range(4, 64):
            assert self.conv_len_oracle(t) == t // 2
            out = adapter(FrameMatrix(rand(t, 4, seed=t), token_rate=50))
            assert out.num_frames == t // 2

    def test_wrong_rate_rejected(self):
        with pytest.raises(RateError):
            ConvDownsampler(8, gen())(FrameMatrix(rand(100, 8), token_rate=25))

    def test_too_short_rejected(self):
        with pytest.raises(TooShortError):
            ConvDownsampler(8, gen())(FrameMatrix(rand(3, 8), token_rate=50))

    def test_gradients(self):
        adapter = ConvDownsampler(4, gen(7))
        x = rand(8, 4, seed=8).requires_grad_(True)
        coeffs = rand(4, 4, seed=9)

        def loss():
            return (adapter(FrameMatrix(x, token_rate=50)).data * coeffs).sum()

        check_gradients(loss, list(adapter.parameters()) + [x])


class TestMlpAdapter:
    def test_length_preserved(self):
        adapter = MlpAdapter(8, 16, gen())
        out = adapter(FrameMatrix(rand(100, 8), token_rate=25))
        assert out.num_frames == 100
        assert out.token_rate == 25

    def test_zero_input_zero_output(self):
        # GELU(0) = 0 and biases start at zero, so zeros propagate
        adapter = MlpAdapter(8, 16, gen())
        out = adapter(FrameMatrix(torch.zeros(5, 8, dtype=DTYPE), token_rate=25))
        assert out.data.abs().max().item() == 0.0

    def test_frame_permutation_equivariance(self):
        adapter = MlpAdapter(6, 12, gen(1))
        x = rand(9, 6, seed=2)
        perm = torch.randperm(9, generator=gen(3))
        out = adapter(FrameMatrix(x, token_rate=25)).data
        out_perm = adapter(FrameMatrix(x[perm], token_rate=25)).data
        assert torch.equal(out[perm], out_perm)

    def test_wrong_rate_rejected(self):
        with pytest.raises(RateError):
            MlpAdapter(8, 16, gen())(FrameMatrix(rand(10, 8), token_rate=50))

    def test_gradients(self):
        adapter = MlpAdapter(4, 8, gen(4))
        x = rand(6, 4, seed=5).requires_grad_(True)
        coeffs = rand(6, 4, seed=6)

        def loss():
            return (adapter(FrameMatrix(x, token_rate=25)).data * coeffs).sum()

        check_gradients(loss, list(adapter.parameters()) + [x])


class TestLinearProjection:
    def test_identity_init_passthrough(self):
        proj = LinearProjection(8, 8, gen())
        with torch.no_grad():
            proj.linear.weight.copy_(torch.eye(8, dtype=DTYPE))
            proj.linear.bias.zero_()
        x = rand(10, 8, seed=1)
        out = proj(FrameMatrix(x, token_rate=25))
        assert torch.equal(out.data, x)
        assert out.dim_space == DIM_SPACE_BACKBONE

    def test_shape_contract(self):
        proj = LinearProjection(64, 96, gen())
        out = proj(FrameMatrix(rand(250, 64), token_rate=25))
        assert out.data.shape == (250, 96)
        assert out.token_rate == 25

    def test_rejects_backbone_space_input(self):
        proj = LinearProjection(8, 8, gen())
        with pytest.raises(InvalidInputError):
            proj(FrameMatrix(rand(10, 8), token_rate=25, dim_space=DIM_SPACE_BACKBONE))

    def test_rejects_dim_mismatch(self):
        proj = LinearProjection(8, 12, gen())
        with pytest.raises(InvalidInputError):
            proj(FrameMatrix(rand(10, 6), token_rate=25))

    def test_gradients(self):
        proj = LinearProjection(4, 6, gen(2))
        x = rand(5, 4, seed=3).requires_grad_(True)
        coeffs = rand(5, 6, seed=4)

        def loss():
            return (proj(FrameMatrix(x, token_rate=25)).data * coeffs).sum()

        check_gradients(loss, list(proj.parameters()) + [x])


class TestRateComposition:
    def test_fifty_hz_path_ends_at_25(self):
        agg = LayerAggregator(4)
        adapter = ConvDownsampler(8, gen())
        out = adapter(agg.aggregate(feats(frames=20, rate=50)))
        assert out.token_rate == 25

    def test_music_path_ends_at_25(self):
        agg = LayerAggregator(4)
        adapter = MlpAdapter(8, 16, gen())
        out = adapter(agg.aggregate(feats(frames=20, rate=25)))
        assert out.token_rate == 25
