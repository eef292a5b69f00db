"""Image encoder: patchify, transformer stack, and the conv neck that turns
the last few blocks' features into one fused image embedding.

Every tapped layer goes through the same neck (shared weights) and the neck
outputs are summed. Single-feature mode keeps only the final layer, so the
downstream interface is one [C, G, G] embedding either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from promptseg.errors import ConfigurationError, ShapeError
from promptseg.layers import LayerNorm2d, TransformerBlock


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 6
    heads: int = 4
    neck_dim: int = 32
    num_tap_layers: int = 4
    in_channels: int = 1
    multi_feature: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not (self.depth >= self.num_tap_layers >= 1):
            raise ConfigurationError(
                f"need depth >= num_tap_layers >= 1, got depth={self.depth}, "
                f"num_tap_layers={self.num_tap_layers}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class FeaturePyramid:
    """Per-tap neck outputs plus their fused sum, all [B, C, G, G]."""

    taps: list[torch.Tensor] = field(default_factory=list)
    fused: torch.Tensor | None = None

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.taps}
        if len(shapes) > 1:
            raise ShapeError(f"taps are not identically shaped: {sorted(shapes)}")
        if self.fused is not None and self.taps:
            if tuple(self.fused.shape) != tuple(self.taps[0].shape):
                raise ShapeError(
                    f"fused {tuple(self.fused.shape)} does not match "
                    f"taps {tuple(self.taps[0].shape)}"
                )

    def recompute_fused(self) -> torch.Tensor:
        out = self.taps[0]
        for t in self.taps[1:]:
            out = out + t
        return out


class ConvNeck(nn.Module):
    """1x1 conv to C channels, norm, 3x3 same-padded conv, norm."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, out_dim, kernel_size=1)
        self.norm1 = LayerNorm2d(out_dim)
        self.conv2 = nn.Conv2d(out_dim, out_dim, kernel_size=3, padding=1)
        self.norm2 = LayerNorm2d(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"neck expects [B, {self.conv1.in_channels}, G, G], "
                f"got {tuple(x.shape)}"
            )
        return self.norm2(self.conv2(self.norm1(self.conv1(x))))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.grid_size
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.embed_dim,
            kernel_size=cfg.patch_size, stride=cfg.patch_size,
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth)
        )
        self.neck = ConvNeck(cfg.embed_dim, cfg.neck_dim)

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.ndim != 4:
            raise ShapeError(f"image must be rank 3 or 4, got {tuple(image.shape)}")
        s = self.cfg.image_size
        if image.shape[1] != self.cfg.in_channels or image.shape[2:] != (s, s):
            raise ShapeError(
                f"expected [B, {self.cfg.in_channels}, {s}, {s}] image, "
                f"got {tuple(image.shape)}"
            )
        return image

    def patchify(self, image: torch.Tensor) -> torch.Tensor:
        """[B, in_ch, S, S] -> [B, G*G, embed_dim] patch tokens with learned
        positional embeddings added."""
        image = self._check_image(image)
        x = self.patch_embed(image)  # [B, D, G, G]
        x = x.flatten(2).transpose(1, 2)
        return x + self.pos_embed

    def tap_indices(self) -> list[int]:
        if self.cfg.multi_feature:
            return list(range(self.cfg.depth - self.cfg.num_tap_layers,
                              self.cfg.depth))
        return [self.cfg.depth - 1]

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        x = self.patchify(image)
        wanted = set(self.tap_indices())
        g = self.cfg.grid_size
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in wanted:
                fmap = x.transpose(1, 2).reshape(-1, self.cfg.embed_dim, g, g)
                taps.append(self.neck(fmap))
        fused = taps[0]
        for t in taps[1:]:
            fused = fused + t
        return FeaturePyramid(taps=taps, fused=fused)
