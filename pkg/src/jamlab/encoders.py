"""Desk-scale 2D and 3D encoders producing shape-matched feature maps.

The 2D path is three blocks of 3x3 convolution, leaky relu, and 2x2 mean
pooling. The 3D path is a set function: two per-point linear layers, a max pool
over points, and a linear projection reshaped to the same (H, W, C) grid as
the 2D path. A single compression head, shared by both domains, reduces the
attention-modified map to an embedding vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderDims:
    image_hw: int = 32
    image_channels: int = 1
    points: int = 256
    feature_hw: int = 4
    feature_channels: int = 32
    embed_dim: int = 64
    conv_channels: tuple = (8, 16)  # 2D intermediate widths
    point_channels: tuple = (64, 128)  # per-point widths
    compress_channels: int = 32

    @property
    def positions(self) -> int:
        return self.feature_hw * self.feature_hw

    def __post_init__(self):
        blocks = 3
        if self.image_hw != self.feature_hw * 2**blocks:
            raise ValueError(
                f"image side {self.image_hw} must be feature side "
                f"{self.feature_hw} times {2 ** blocks}"
            )


def _linear(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)),
                  requires_grad=True)


def _bias(fan_out):
    return Tensor(np.zeros(fan_out), requires_grad=True)


class Encoder2D:
    """Three blocks of 3x3 conv, leaky relu, and 2x2 mean pooling."""

    def __init__(self, dims: EncoderDims, rng: np.random.Generator):
        self.dims = dims
        widths = (dims.image_channels, *dims.conv_channels, dims.feature_channels)
        self.weights = [_linear(rng, 9 * a, b) for a, b in zip(widths, widths[1:])]
        self.biases = [_bias(b) for b in widths[1:]]

    def __call__(self, image: Tensor) -> Tensor:
        d = self.dims
        if image.shape != (d.image_hw, d.image_hw, d.image_channels):
            raise ValueError(
                f"encode_2d: image {image.shape}, expected "
                f"({d.image_hw}, {d.image_hw}, {d.image_channels})"
            )
        x = image
        for w, b in zip(self.weights, self.biases):
            x = ad.avgpool2x2(ad.leaky_relu(ad.conv3x3(x, w, b)))
        return x

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc2d.w{i}"] = w
            out[f"enc2d.b{i}"] = b
        return out


class Encoder3D:
    """Shared per-point layers, max pool, projection to the feature grid,
    then a channel-mixing block so the reshaped map matches the statistics
    of the 2D branch feeding the same shared attention and compression."""

    def __init__(self, dims: EncoderDims, rng: np.random.Generator):
        self.dims = dims
        widths = (3, *dims.point_channels)
        self.point_weights = [_linear(rng, a, b) for a, b in zip(widths, widths[1:])]
        self.point_biases = [_bias(b) for b in widths[1:]]
        flat = dims.positions * dims.feature_channels
        # damp the projection so both branches feed the shared layers at a
        # comparable feature scale; max-pooled point features run much
        # hotter than pooled image convolutions
        self.project_w = Tensor(
            _linear(rng, widths[-1], flat).values / 5.0, requires_grad=True
        )
        self.project_b = _bias(flat)
        self.mix_w = _linear(rng, dims.feature_channels, dims.feature_channels)
        self.mix_b = _bias(dims.feature_channels)

    def __call__(self, points: Tensor) -> Tensor:
        d = self.dims
        if points.shape != (d.points, 3):
            raise ValueError(
                f"encode_3d: cloud {points.shape}, expected ({d.points}, 3)"
            )
        x = points
        for w, b in zip(self.point_weights, self.point_biases):
            x = ad.leaky_relu(ad.conv1x1(x, w, b))
        pooled = ad.reshape(ad.colmax(x), (1, d.point_channels[-1]))
        flat = ad.add_bias(ad.matmul(pooled, self.project_w), self.project_b)
        grid = ad.reshape(flat, (d.positions, d.feature_channels))
        grid = ad.leaky_relu(ad.conv1x1(grid, self.mix_w, self.mix_b))
        return ad.reshape(grid, (d.feature_hw, d.feature_hw, d.feature_channels))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.point_weights, self.point_biases)):
            out[f"enc3d.w{i}"] = w
            out[f"enc3d.b{i}"] = b
        out["enc3d.proj_w"] = self.project_w
        out["enc3d.proj_b"] = self.project_b
        out["enc3d.mix_w"] = self.mix_w
        out["enc3d.mix_b"] = self.mix_b
        return out


class CompressionHead:
    """Shared channel compression, coarse spatial pooling, FC to the embedding.

    Pooling down to a 2x2 grid keeps only coarse layout, so fine position
    emphasis is left to the attention block while the head stays tolerant to
    each branch's spatial convention.
    """

    def __init__(self, dims: EncoderDims, rng: np.random.Generator):
        self.dims = dims
        self.squeeze_w = _linear(rng, dims.feature_channels, dims.compress_channels)
        self.squeeze_b = _bias(dims.compress_channels)
        pooled_hw = dims.feature_hw // 2
        flat = pooled_hw * pooled_hw * dims.compress_channels
        self.fc_w = _linear(rng, flat, dims.embed_dim)
        self.fc_b = _bias(dims.embed_dim)

    def __call__(self, feature_map: Tensor) -> Tensor:
        d = self.dims
        expect = (d.feature_hw, d.feature_hw, d.feature_channels)
        if feature_map.shape != expect:
            raise ValueError(f"compress: map {feature_map.shape}, expected {expect}")
        flat = ad.reshape(feature_map, (d.positions, d.feature_channels))
        x = ad.leaky_relu(ad.conv1x1(flat, self.squeeze_w, self.squeeze_b))
        grid = ad.reshape(x, (d.feature_hw, d.feature_hw, d.compress_channels))
        coarse = ad.avgpool2x2(grid)
        pooled_hw = d.feature_hw // 2
        vec = ad.reshape(coarse, (1, pooled_hw * pooled_hw * d.compress_channels))
        return ad.add_bias(ad.matmul(vec, self.fc_w), self.fc_b)  # (1, E)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "comp.squeeze_w": self.squeeze_w,
            "comp.squeeze_b": self.squeeze_b,
            "comp.fc_w": self.fc_w,
            "comp.fc_b": self.fc_b,
        }
