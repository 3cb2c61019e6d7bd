"""Per-encoder feature frontend: layer aggregation, adapters, projection.

All modules run in float64 so analytic gradients can be validated against
central finite differences. Streams are single sequences [T, D]; batching
happens later, at backbone assembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .encoders import LayerFeatures
from .errors import InvalidInputError, RateError, TooShortError

DTYPE = torch.float64

DIM_SPACE_NATIVE = "encoder-native"
DIM_SPACE_BACKBONE = "backbone"


@dataclass
class FrameMatrix:
    """A [T, D] frame stream with its token rate and embedding space.

    token_rate is None for rateless blocks (compressed prefix tokens).
    """

    data: Tensor
    token_rate: float | None
    dim_space: str = DIM_SPACE_NATIVE

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def features_to_tensor(features: LayerFeatures) -> Tensor:
    """Stack LayerFeatures into an [L, T, D] float64 tensor."""
    return torch.from_numpy(np.stack(features.layers)).to(DTYPE)


def normal_(param: Tensor, std: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        param.copy_(torch.randn(param.shape, generator=generator, dtype=DTYPE) * std)


def fan_in_init_(weight: Tensor, generator: torch.Generator) -> None:
    fan_in = weight.shape[1] if weight.ndim == 2 else weight[0].numel()
    normal_(weight, fan_in**-0.5, generator)


def zero_(param: Tensor) -> None:
    with torch.no_grad():
        param.zero_()


class LayerAggregator(nn.Module):
    """Trainable softmax-weighted average over encoder layers.

    Logits start at zero, so the initial aggregate is the plain layer mean.
    """

    def __init__(self, num_layers: int):
        super().__init__()
        self.num_layers = num_layers
        self.weights = nn.Parameter(torch.zeros(num_layers, dtype=DTYPE))

    def forward(self, layers: Tensor) -> Tensor:
        if layers.shape[0] != self.num_layers:
            raise InvalidInputError(
                f"got {layers.shape[0]} layers, aggregator expects {self.num_layers}"
            )
        alpha = torch.softmax(self.weights, dim=0)
        return torch.einsum("l,ltd->td", alpha, layers)

    def aggregate(self, features: LayerFeatures) -> FrameMatrix:
        data = self.forward(features_to_tensor(features))
        return FrameMatrix(data, token_rate=features.token_rate, dim_space=DIM_SPACE_NATIVE)


def aggregate_layers(features: LayerFeatures, aggregator: LayerAggregator) -> FrameMatrix:
    return aggregator.aggregate(features)


class ConvDownsampler(nn.Module):
    """Two-layer convolutional adapter halving 50 frames/s to 25 frames/s.

    conv(k=3, s=1, p=1) -> GELU -> per-frame LayerNorm -> conv(k=4, s=2, p=1),
    so the output length is floor(T / 2). Inputs shorter than 4 frames are
    rejected rather than padded.
    """

    MIN_FRAMES = 4

    def __init__(self, dim: int, generator: torch.Generator):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, kernel_size=3, stride=1, padding=1, dtype=DTYPE)
        self.act = nn.GELU()
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size=4, stride=2, padding=1, dtype=DTYPE)
        for conv in (self.conv1, self.conv2):
            fan_in_init_(conv.weight, generator)
            zero_(conv.bias)

    def forward(self, x: FrameMatrix) -> FrameMatrix:
        if x.token_rate != 50:
            raise RateError(f"conv adapter expects 50 frames/s input, got {x.token_rate}")
        if x.num_frames < self.MIN_FRAMES:
            raise TooShortError(
                f"need at least {self.MIN_FRAMES} frames to downsample, got {x.num_frames}"
            )
        y = self.conv1(x.data.T.unsqueeze(0))
        y = self.norm(self.act(y).transpose(1, 2)).transpose(1, 2)
        y = self.conv2(y)
        return FrameMatrix(y.squeeze(0).T, token_rate=25, dim_space=x.dim_space)


class MlpAdapter(nn.Module):
    """Per-frame two-layer MLP adapter for streams already at 25 frames/s."""

    def __init__(self, dim: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.up = nn.Linear(dim, hidden, dtype=DTYPE)
        self.act = nn.GELU()
        self.down = nn.Linear(hidden, dim, dtype=DTYPE)
        for lin in (self.up, self.down):
            fan_in_init_(lin.weight, generator)
            zero_(lin.bias)

    def forward(self, x: FrameMatrix) -> FrameMatrix:
        if x.token_rate != 25:
            raise RateError(f"mlp adapter expects 25 frames/s input, got {x.token_rate}")
        return FrameMatrix(self.down(self.act(self.up(x.data))), token_rate=25, dim_space=x.dim_space)


def adapt_conv(x: FrameMatrix, adapter: ConvDownsampler) -> FrameMatrix:
    return adapter(x)


def adapt_mlp(x: FrameMatrix, adapter: MlpAdapter) -> FrameMatrix:
    return adapter(x)


class LinearProjection(nn.Module):
    """Affine map from encoder-native width to the backbone embedding width."""

    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim, dtype=DTYPE)
        fan_in_init_(self.linear.weight, generator)
        zero_(self.linear.bias)

    def forward(self, x: FrameMatrix) -> FrameMatrix:
        if x.dim_space != DIM_SPACE_NATIVE:
            raise InvalidInputError(f"projection expects encoder-native input, got {x.dim_space}")
        if x.dim != self.linear.in_features:
            raise InvalidInputError(
                f"projection expects width {self.linear.in_features}, got {x.dim}"
            )
        return FrameMatrix(self.linear(x.data), token_rate=x.token_rate, dim_space=DIM_SPACE_BACKBONE)


def project(x: FrameMatrix, projection: LinearProjection) -> FrameMatrix:
    return projection(x)
