"""Mask decoder: two-way attention between prompt tokens and image
embedding, a learned output token whose final state is dotted with upscaled
image features to give low-res logits, then bilinear recovery to full
resolution.

Block order per two-way block: tokens attend to image, tokens self-attend,
token MLP, image attends back to tokens. Post-norm residuals throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from promptseg.errors import ConfigurationError, ShapeError
from promptseg.layers import LayerNorm2d, MLPBlock, MultiHeadAttention


@dataclass
class DecoderConfig:
    token_dim: int = 32
    heads: int = 4
    num_blocks: int = 2
    upscale: int = 4
    grid_size: int = 8

    def __post_init__(self):
        if self.token_dim % self.heads != 0:
            raise ConfigurationError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        n = self.upscale
        while n % 2 == 0:
            n //= 2
        if n != 1 or self.upscale < 2:
            raise ConfigurationError(
                f"upscale must be a power of two >= 2, got {self.upscale}"
            )
        if self.token_dim % self.upscale != 0:
            raise ConfigurationError(
                f"token_dim {self.token_dim} must be divisible by upscale "
                f"{self.upscale} (channel halving per 2x stage)"
            )

    @property
    def low_res_size(self) -> int:
        return self.grid_size * self.upscale


@dataclass
class MaskLogits:
    """low_res: decoder-native logits; full_res: logits at the input size."""

    low_res: torch.Tensor
    full_res: torch.Tensor

    def __post_init__(self):
        if self.low_res.ndim != self.full_res.ndim:
            raise ShapeError(
                f"low_res rank {self.low_res.ndim} != full_res rank {self.full_res.ndim}"
            )


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.token_to_image = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_self = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, dim * 4)
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = MultiHeadAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, image_seq: torch.Tensor):
        attn, _ = self.token_to_image(tokens, key_value=image_seq)
        tokens = self.norm1(tokens + attn)
        attn, _ = self.token_self(tokens)
        tokens = self.norm2(tokens + attn)
        tokens = self.norm3(tokens + self.mlp(tokens))
        attn, _ = self.image_to_token(image_seq, key_value=tokens)
        image_seq = self.norm4(image_seq + attn)
        return tokens, image_seq


class MaskDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d, g = cfg.token_dim, cfg.grid_size
        self.output_token = nn.Parameter(torch.randn(d) * 0.02)
        self.image_pos = nn.Parameter(torch.zeros(d, g, g))
        nn.init.trunc_normal_(self.image_pos, std=0.02)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, cfg.heads) for _ in range(cfg.num_blocks)
        )

        # 2x stages halve channels: d -> d/2 -> ... -> d/upscale
        stages: list[nn.Module] = []
        ch = d
        n_stages = cfg.upscale.bit_length() - 1
        for i in range(n_stages):
            stages.append(nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2))
            ch //= 2
            if i < n_stages - 1:
                stages.append(LayerNorm2d(ch))
            stages.append(nn.GELU())
        self.upscaler = nn.Sequential(*stages)
        self.readout_mlp = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, ch)
        )
        self.logit_bias = nn.Parameter(torch.zeros(1))

    def forward(
        self,
        fused_image: torch.Tensor,
        prompt_tokens: torch.Tensor,
        dense_prompt: torch.Tensor,
    ) -> torch.Tensor:
        """fused_image/dense_prompt [C, G, G] (or batched), prompt_tokens
        [N, D] (or [B, N, D]) -> low-res logits [G*u, G*u] (or batched)."""
        squeeze = fused_image.ndim == 3
        if squeeze:
            fused_image = fused_image.unsqueeze(0)
            dense_prompt = dense_prompt.unsqueeze(0)
            prompt_tokens = prompt_tokens.unsqueeze(0)
        d, g = self.cfg.token_dim, self.cfg.grid_size
        if fused_image.shape[1:] != (d, g, g):
            raise ShapeError(
                f"fused_image must be [B, {d}, {g}, {g}], got {tuple(fused_image.shape)}"
            )
        if dense_prompt.shape != fused_image.shape:
            raise ShapeError(
                f"dense_prompt {tuple(dense_prompt.shape)} does not match "
                f"fused_image {tuple(fused_image.shape)}"
            )
        if prompt_tokens.ndim != 3 or prompt_tokens.shape[-1] != d:
            raise ShapeError(
                f"prompt_tokens must be [B, N, {d}], got {tuple(prompt_tokens.shape)}"
            )
        if prompt_tokens.shape[1] < 1:
            raise ShapeError("prompt_tokens must be nonempty")
        b = fused_image.shape[0]

        image = fused_image + dense_prompt + self.image_pos
        image_seq = image.flatten(2).transpose(1, 2)  # [B, G*G, D]
        tokens = torch.cat(
            [self.output_token[None, None, :].expand(b, 1, d), prompt_tokens], dim=1
        )
        for block in self.blocks:
            tokens, image_seq = block(tokens, image_seq)

        feat = image_seq.transpose(1, 2).reshape(b, d, g, g)
        up = self.upscaler(feat)  # [B, d/u, G*u, G*u]
        hyper = self.readout_mlp(tokens[:, 0])  # [B, d/u]
        logits = torch.einsum("bc,bchw->bhw", hyper, up) + self.logit_bias
        return logits[0] if squeeze else logits


def upsample(low_res: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample of logits to target (H, W); output never leaves
    [min(low_res), max(low_res)], and a constant map stays exactly constant."""
    h, w = target
    squeeze = low_res.ndim == 2
    x = low_res[None, None] if squeeze else low_res.unsqueeze(1)
    if h < x.shape[-2] or w < x.shape[-1]:
        raise ShapeError(
            f"target {target} smaller than low-res {tuple(x.shape[-2:])}"
        )
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    out = torch.maximum(torch.minimum(out, hi), lo)
    return out[0, 0] if squeeze else out.squeeze(1)


def binarize(logits: torch.Tensor, threshold: float = 0.0) -> torch.Tensor:
    """Threshold logits into a binary mask; 0.0 is probability 0.5."""
    return logits > threshold
