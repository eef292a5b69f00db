"""Shared neural building blocks: attention, transformer blocks, MLPs, and
channels-first layer norm."""

from __future__ import annotations

import torch
import torch.nn as nn

from promptseg.errors import ConfigurationError, ShapeError


class MLPBlock(nn.Module):
    """Two-layer feedforward with GELU."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(self.act(self.lin1(x)))


class MultiHeadAttention(nn.Module):
    """Multi-head attention over [B, N, dim] sequences.

    Queries may come from a different sequence than keys/values (cross
    attention); kv_dim allows the key/value source to have its own width.
    forward can return the averaged-over-heads attention weights so tests
    and diagnostics can inspect where queries look.
    """

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by heads {num_heads}")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key_value: torch.Tensor | None = None,
        attn_mask: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        """attn_mask is additive, broadcast over [B, heads, Nq, Nk]."""
        kv = query if key_value is None else key_value
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if attn_mask is not None:
            scores = scores + attn_mask
        weights = scores.softmax(dim=-1)
        out = weights @ v
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.num_heads * self.head_dim)
        out = self.out_proj(out)
        if need_weights:
            return out, weights.mean(dim=1)
        return out, None


def causal_mask(n: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Additive mask forbidding attention to future positions."""
    m = torch.full((n, n), float("-inf"), device=device, dtype=dtype)
    return torch.triu(m, diagonal=1)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a GELU MLP, expansion 4."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))

    def forward(
        self, x: torch.Tensor, attn_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        attn_out, _ = self.attn(self.norm1(x), attn_mask=attn_mask)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of [B, C, H, W] maps."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"expected [B, {self.weight.shape[0]}, H, W], got {tuple(x.shape)}"
            )
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]
