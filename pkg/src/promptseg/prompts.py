"""Geometric prompt encoding: points, boxes, and mask prompts become sparse
tokens plus a dense map; a learned silent embedding stands in when no
geometric prompt is given.

Token width equals the image-embedding channel count so sparse tokens and
image features meet in the decoder without extra projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from promptseg.errors import ConfigurationError, PromptError, ShapeError
from promptseg.layers import LayerNorm2d


class PointLabel(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INVALID = "invalid"


@dataclass
class PointPrompt:
    x: float
    y: float
    label: PointLabel = PointLabel.POSITIVE

    def __post_init__(self):
        self.label = PointLabel(self.label)
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise PromptError(f"point coordinates must be finite, got ({self.x}, {self.y})")


@dataclass
class BoxPrompt:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise PromptError(f"box corners must be finite, got {vals}")
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise PromptError(
                f"degenerate box: need x0 < x1 and y0 < y1, got "
                f"({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )


@dataclass
class GeometricEmbeddings:
    """sparse: [K, token_dim] prompt tokens; dense: [C, G, G] map added to
    the image embedding. K = #points + 2*#boxes, or 1 for the silent token."""

    sparse: torch.Tensor
    dense: torch.Tensor

    def __post_init__(self):
        if self.sparse.ndim != 2:
            raise ShapeError(f"sparse tokens must be [K, D], got {tuple(self.sparse.shape)}")
        if self.dense.ndim != 3:
            raise ShapeError(f"dense map must be [C, G, G], got {tuple(self.dense.shape)}")


@dataclass
class PromptConfig:
    image_size: int = 64
    patch_size: int = 8
    token_dim: int = 32
    fourier_sigma: float = 1.0
    fourier_seed: int = 0

    def __post_init__(self):
        if self.token_dim <= 0 or self.token_dim % 2 != 0:
            raise ConfigurationError(f"token_dim must be positive even, got {self.token_dim}")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        n = self.patch_size
        while n % 2 == 0:
            n //= 2
        if n != 1:
            raise ConfigurationError(
                f"patch_size must be a power of two for the mask downsampler, "
                f"got {self.patch_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


class PromptEncoder(nn.Module):
    def __init__(self, cfg: PromptConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim

        # random Fourier basis, frozen at init; deterministic for a seed
        gen = torch.Generator().manual_seed(cfg.fourier_seed)
        basis = torch.randn(2, d // 2, generator=gen) * cfg.fourier_sigma
        self.register_buffer("fourier_basis", basis)

        self.point_label_embed = nn.Embedding(2, d)  # 0=positive, 1=negative
        self.invalid_token = nn.Parameter(torch.randn(d) * 0.02)
        self.corner_embed = nn.Embedding(2, d)  # 0=top-left, 1=bottom-right
        self.silent_token = nn.Parameter(torch.randn(d) * 0.02)
        self.silent_dense = nn.Parameter(torch.randn(d) * 0.02)

        # strided conv stack: H x W down to G x G, channels up to token_dim
        n_halvings = int(math.log2(cfg.patch_size))
        chans = [max(4, d >> (n_halvings - 1 - i)) for i in range(n_halvings)]
        layers: list[nn.Module] = []
        prev = 1
        for c in chans:
            layers += [nn.Conv2d(prev, c, kernel_size=2, stride=2), LayerNorm2d(c), nn.GELU()]
            prev = c
        layers.append(nn.Conv2d(prev, d, kernel_size=1))
        self.mask_downsampler = nn.Sequential(*layers)

        # counts coordinates clamped back into bounds; diagnostic only
        self.clamp_count = 0

    # -- coordinates --------------------------------------------------------

    def positional_encode(self, coords: torch.Tensor) -> torch.Tensor:
        """[N, 2] pixel (x, y) -> [N, token_dim] Fourier features.

        Coordinates are clamped into [0, image_size]; each clamped value
        bumps clamp_count rather than raising.
        """
        coords = torch.as_tensor(coords, dtype=self.fourier_basis.dtype).reshape(-1, 2)
        clamped = coords.clamp(0.0, float(self.cfg.image_size))
        self.clamp_count += int((clamped != coords).sum())
        unit = clamped / self.cfg.image_size
        proj = 2.0 * math.pi * unit @ self.fourier_basis
        return torch.cat([proj.sin(), proj.cos()], dim=-1)

    # -- sparse prompts ------------------------------------------------------

    def embed_points(self, points: list[PointPrompt]) -> torch.Tensor:
        if not points:
            return torch.zeros(0, self.cfg.token_dim, dtype=self.fourier_basis.dtype)
        tokens = []
        for p in points:
            if p.label is PointLabel.INVALID:
                tokens.append(self.invalid_token)
                continue
            pe = self.positional_encode(torch.tensor([[p.x, p.y]]))[0]
            idx = 0 if p.label is PointLabel.POSITIVE else 1
            tokens.append(pe + self.point_label_embed.weight[idx])
        return torch.stack(tokens)

    def embed_box(self, box: BoxPrompt) -> torch.Tensor:
        corners = torch.tensor([[box.x0, box.y0], [box.x1, box.y1]])
        pe = self.positional_encode(corners)
        return pe + self.corner_embed.weight

    def embed_mask(self, mask: torch.Tensor) -> torch.Tensor:
        """[H, W] or [B, 1, H, W] mask -> dense [C, G, G] (batched if input
        was batched)."""
        squeeze = False
        if mask.ndim == 2:
            mask = mask[None, None]
            squeeze = True
        s = self.cfg.image_size
        if mask.ndim != 4 or mask.shape[1] != 1 or mask.shape[2:] != (s, s):
            raise ShapeError(
                f"mask must be [{s}, {s}] or [B, 1, {s}, {s}], got {tuple(mask.shape)}"
            )
        out = self.mask_downsampler(mask.to(self.fourier_basis.dtype))
        return out[0] if squeeze else out

    def silent_embedding(self) -> GeometricEmbeddings:
        g = self.cfg.grid_size
        return GeometricEmbeddings(
            sparse=self.silent_token[None, :],
            dense=self.silent_dense[:, None, None].expand(-1, g, g),
        )

    # -- bundles -------------------------------------------------------------

    def encode(
        self,
        points: list[PointPrompt] | None = None,
        boxes: list[BoxPrompt] | None = None,
        mask: torch.Tensor | None = None,
    ) -> GeometricEmbeddings:
        """Full geometric bundle for one sample. K = #points + 2*#boxes, or
        1 silent token when no point/box is given; dense comes from the mask
        prompt when present, else the learned silent map."""
        points = points or []
        boxes = boxes or []
        parts = []
        if points:
            parts.append(self.embed_points(points))
        for box in boxes:
            parts.append(self.embed_box(box))
        sparse = torch.cat(parts) if parts else self.silent_token[None, :]
        if mask is not None:
            dense = self.embed_mask(mask)
        else:
            g = self.cfg.grid_size
            dense = self.silent_dense[:, None, None].expand(-1, g, g)
        return GeometricEmbeddings(sparse=sparse, dense=dense)

    def batch_encode(
        self,
        bundles: list[tuple[list[PointPrompt] | None, list[BoxPrompt] | None, torch.Tensor | None]],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of (points, boxes, mask) bundles with a uniform
        token count; returns sparse [B, K, D] and dense [B, C, G, G]."""
        encoded = [self.encode(*b) for b in bundles]
        ks = {e.sparse.shape[0] for e in encoded}
        if len(ks) > 1:
            raise ShapeError(f"batch mixes prompt token counts {sorted(ks)}")
        sparse = torch.stack([e.sparse for e in encoded])
        dense = torch.stack([e.dense for e in encoded])
        return sparse, dense
