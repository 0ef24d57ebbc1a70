"""Multi-stage per-frame encoder with a tap after every stage.

Each stage is conv3x3 -> relu -> conv3x3 -> relu -> 2x2 average pool, so
stage ``s`` halves the spatial size ``s`` times. A fusion branch anchored
at stage ``s`` re-enters the network through ``continue_from_stage``,
which applies the remaining stages with the *same* parameter tensors used
for per-frame encoding, then pools and projects to the embedding size.
Projections are per-branch; everything else is shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, avg_pool2d, relu, reshape, tmean
from .nn import Conv3x3, Linear, Module


@dataclass(frozen=True)
class BackboneConfig:
    num_stages: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    input_shape: tuple[int, int, int] = (3, 32, 16)
    embed_dim: int = 768

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError("multi-stage fusion needs at least 2 stages")
        if len(self.channels) != self.num_stages:
            raise ValueError(
                f"expected {self.num_stages} channel counts, got {self.channels}")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        c, h, w = self.input_shape
        if c <= 0 or h <= 0 or w <= 0:
            raise ValueError(f"bad input shape {self.input_shape}")
        factor = 2 ** self.num_stages
        if h % factor or w % factor:
            raise ValueError(
                f"input {h}x{w} must be divisible by 2^{self.num_stages} "
                "so every stage can pool")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")

    def stage_shape(self, s: int) -> tuple[int, int, int]:
        """Output shape [C_s, H_s, W_s] of stage ``s`` (1-based)."""
        _, h, w = self.input_shape
        return (self.channels[s - 1], h // 2 ** s, w // 2 ** s)


class StageBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv3x3(c_in, c_out, rng)
        self.conv2 = Conv3x3(c_out, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return avg_pool2d(relu(self.conv2(relu(self.conv1(x)))), 2)


class Backbone(Module):
    """Shared stages plus one embedding projection per fusion branch."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self._cfg = cfg
        self._stages: list[StageBlock] = []
        c_prev = cfg.input_shape[0]
        for s, c_out in enumerate(cfg.channels, start=1):
            block = StageBlock(c_prev, c_out, rng)
            setattr(self, f"stage{s}", block)
            self._stages.append(block)
            c_prev = c_out
        self._projections: list[Linear] = []
        for s in range(1, cfg.num_stages + 1):
            proj = Linear(cfg.channels[-1], cfg.embed_dim, rng,
                          init_scale=np.sqrt(1.0 / cfg.channels[-1]))
            setattr(self, f"proj{s}", proj)
            self._projections.append(proj)

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    def _check_frames(self, frames: Tensor) -> None:
        if frames.ndim != 4:
            raise ValueError(f"expected frames [L, C, H, W], got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("empty tracklet: no frames to encode")
        if tuple(frames.shape[1:]) != tuple(self._cfg.input_shape):
            raise ValueError(
                f"frame shape {tuple(frames.shape[1:])} does not match "
                f"configured input {self._cfg.input_shape}")

    def encode_stages(self, frames: Tensor, upto: int | None = None) -> list[Tensor]:
        """Run frames through stages 1..upto, returning every tap.

        Frames are independent: the batched convolution treats the leading
        axis as a plain batch dimension.
        """
        upto = self._cfg.num_stages if upto is None else upto
        if not 1 <= upto <= self._cfg.num_stages:
            raise ValueError(f"stage {upto} out of range 1..{self._cfg.num_stages}")
        self._check_frames(frames)
        taps = []
        x = frames
        for block in self._stages[:upto]:
            x = block(x)
            taps.append(x)
        return taps

    def encode_to_stage(self, frames: Tensor, s: int) -> Tensor:
        """Per-frame maps after stage ``s``: Tensor [L, C_s, H_s, W_s]."""
        return self.encode_stages(frames, upto=s)[-1]

    def continue_from_stage(self, fused_map: Tensor, s: int) -> Tensor:
        """Encode one fused stage-``s`` map to the final embedding [d_g].

        Applies the shared suffix stages s+1..S, then a global average
        pool and the branch-``s`` projection. At ``s == S`` the suffix is
        empty and only pool + projection run.
        """
        if not 1 <= s <= self._cfg.num_stages:
            raise ValueError(f"stage {s} out of range 1..{self._cfg.num_stages}")
        expected = self._cfg.stage_shape(s)
        if fused_map.ndim != 3 or tuple(fused_map.shape) != expected:
            raise ValueError(
                f"fused map shape {tuple(fused_map.shape)} does not match "
                f"stage {s} boundary {expected}")
        x = fused_map
        for block in self._stages[s:]:
            x = block(x)
        pooled = tmean(x, axis=(1, 2))
        row = reshape(pooled, (1, pooled.shape[0]))
        return reshape(self._projections[s - 1](row), (self._cfg.embed_dim,))

    def pool_frame_features(self, maps: Tensor) -> Tensor:
        """Global average over spatial dims: [L, C, H, W] -> [L, C]."""
        if maps.ndim != 4:
            raise ValueError(f"expected stage maps [L, C, H, W], got {maps.shape}")
        return tmean(maps, axis=(2, 3))

    def frame_embeddings(self, frames: Tensor) -> Tensor:
        """Per-frame embeddings through the full network: [L, d_g].

        This is the image-level pathway: final-stage maps pooled per frame
        and sent through the last branch projection.
        """
        maps = self.encode_to_stage(frames, self._cfg.num_stages)
        pooled = self.pool_frame_features(maps)
        return self._projections[-1](pooled)
