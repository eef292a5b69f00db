"""Image-text prompting: a small dual encoder maps the 224x224-resized
image and the tokenized prompt into a shared space, and cross-attention
(text queries, image keys/values) turns them into prompt tokens for the
decoder.

Both encoders train jointly with the segmentation loss; pass precomputed
image_tokens/text_tokens to fuse() to splice in an external aligned encoder
instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from promptseg.errors import ConfigurationError, PromptError, ShapeError
from promptseg.layers import MultiHeadAttention, TransformerBlock, causal_mask

_DEFAULT_VOCAB = Path(__file__).parent / "vocab.txt"


class Tokenizer:
    """Lowercase whitespace tokenizer over a fixed vocabulary file (one
    token per line, line number = id). Unknown words map to <oov>."""

    def __init__(self, vocab_path: str | Path = _DEFAULT_VOCAB, t_max: int = 16):
        lines = Path(vocab_path).read_text(encoding="utf-8").splitlines()
        self.words = [w for w in lines if w]
        self.ids = {w: i for i, w in enumerate(self.words)}
        for special in ("<pad>", "<bos>", "<eos>", "<oov>"):
            if special not in self.ids:
                raise ConfigurationError(f"vocabulary lacks {special}")
        self.pad_id = self.ids["<pad>"]
        self.bos_id = self.ids["<bos>"]
        self.eos_id = self.ids["<eos>"]
        self.oov_id = self.ids["<oov>"]
        self.t_max = t_max
        # bumps when a prompt had to be cut down to t_max; diagnostic only
        self.truncation_count = 0

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise PromptError("text prompt must be nonempty")
        words = text.lower().split()
        body = [self.ids.get(w, self.oov_id) for w in words]
        if len(body) > self.t_max - 2:
            body = body[: self.t_max - 2]
            self.truncation_count += 1
        return [self.bos_id] + body + [self.eos_id]


@dataclass
class TextPrompt:
    text: str
    token_ids: list[int]

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise PromptError("token_ids must be nonempty")

    @classmethod
    def from_text(cls, text: str, tokenizer: Tokenizer) -> "TextPrompt":
        return cls(text=text, token_ids=tokenizer.encode(text))


@dataclass
class AlignedEmbeddings:
    """CLIP-style pair: image_tokens [M, d] and text_tokens [T, d]."""

    image_tokens: torch.Tensor
    text_tokens: torch.Tensor

    def __post_init__(self):
        if self.image_tokens.shape[-1] != self.text_tokens.shape[-1]:
            raise ShapeError(
                f"image tokens width {self.image_tokens.shape[-1]} != "
                f"text tokens width {self.text_tokens.shape[-1]}"
            )


@dataclass
class FusedPromptTokens:
    """One fused token per text token, at the decoder's token width."""

    tokens: torch.Tensor


@dataclass
class TextFusionConfig:
    d_clip: int = 64
    heads: int = 4
    ctx_image_size: int = 224
    ctx_patch: int = 32
    ctx_depth: int = 2
    text_depth: int = 2
    t_max: int = 16
    token_dim: int = 32
    in_channels: int = 1
    freeze_context_encoders: bool = False
    vocab_path: str | None = None

    def __post_init__(self):
        if self.d_clip % self.heads != 0:
            raise ConfigurationError(
                f"d_clip {self.d_clip} not divisible by heads {self.heads}"
            )
        if self.ctx_image_size % self.ctx_patch != 0:
            raise ConfigurationError(
                f"ctx_image_size {self.ctx_image_size} not divisible by "
                f"ctx_patch {self.ctx_patch}"
            )

    @property
    def num_image_tokens(self) -> int:
        return (self.ctx_image_size // self.ctx_patch) ** 2


class ImageTextEncoder(nn.Module):
    def __init__(self, cfg: TextFusionConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.vocab_path or _DEFAULT_VOCAB, t_max=cfg.t_max)
        d = cfg.d_clip
        m = cfg.num_image_tokens

        # context image tower
        self.ctx_patch_embed = nn.Conv2d(
            cfg.in_channels, d, kernel_size=cfg.ctx_patch, stride=cfg.ctx_patch
        )
        self.ctx_pos_embed = nn.Parameter(torch.zeros(1, m, d))
        nn.init.trunc_normal_(self.ctx_pos_embed, std=0.02)
        self.ctx_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads) for _ in range(cfg.ctx_depth)
        )
        self.ctx_norm = nn.LayerNorm(d)

        # text tower (causal)
        self.tok_embed = nn.Embedding(len(self.tokenizer), d)
        self.text_pos_embed = nn.Parameter(torch.zeros(1, cfg.t_max, d))
        nn.init.trunc_normal_(self.text_pos_embed, std=0.02)
        self.text_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads) for _ in range(cfg.text_depth)
        )
        self.text_norm = nn.LayerNorm(d)

        # fusion: text queries look at image keys/values
        self.cross_attn = MultiHeadAttention(d, cfg.heads)
        self.fuse_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.token_dim)

        if cfg.freeze_context_encoders:
            self.set_towers_frozen(True)

    def set_towers_frozen(self, frozen: bool) -> None:
        """Freeze/unfreeze the two encoder towers; fusion stays trainable."""
        towers = [
            self.ctx_patch_embed, self.ctx_blocks, self.ctx_norm,
            self.tok_embed, self.text_blocks, self.text_norm,
        ]
        for mod in towers:
            for p in mod.parameters():
                p.requires_grad = not frozen
        self.ctx_pos_embed.requires_grad = not frozen
        self.text_pos_embed.requires_grad = not frozen

    # -- towers ---------------------------------------------------------------

    def encode_context_image(self, image: torch.Tensor) -> torch.Tensor:
        """[C, H, W] or [B, C, H, W] image of any size -> [M, d] (or
        [B, M, d]) aligned image tokens; resizes to the context resolution
        internally."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected [B, {self.cfg.in_channels}, H, W] image, got {tuple(image.shape)}"
            )
        s = self.cfg.ctx_image_size
        if image.shape[2:] != (s, s):
            image = F.interpolate(
                image, size=(s, s), mode="bilinear", align_corners=False
            )
        x = self.ctx_patch_embed(image).flatten(2).transpose(1, 2)
        x = x + self.ctx_pos_embed
        for block in self.ctx_blocks:
            x = block(x)
        x = self.ctx_norm(x)
        return x[0] if squeeze else x

    def encode_text(self, prompt: TextPrompt | list[TextPrompt]) -> torch.Tensor:
        """One d_clip vector per token, causal attention. Batched prompts
        must share a length (uniform templates make this the common case)."""
        prompts = [prompt] if isinstance(prompt, TextPrompt) else prompt
        lengths = {len(p.token_ids) for p in prompts}
        if len(lengths) > 1:
            raise ShapeError(f"batch mixes text lengths {sorted(lengths)}")
        t = lengths.pop()
        if t > self.cfg.t_max:
            raise ShapeError(f"prompt length {t} exceeds t_max {self.cfg.t_max}")
        ids = torch.tensor([p.token_ids for p in prompts], dtype=torch.long)
        x = self.tok_embed(ids) + self.text_pos_embed[:, :t]
        mask = causal_mask(t, device=x.device, dtype=x.dtype)
        for block in self.text_blocks:
            x = block(x, attn_mask=mask)
        x = self.text_norm(x)
        return x[0] if isinstance(prompt, TextPrompt) else x

    # -- fusion ----------------------------------------------------------------

    def cross_fuse(
        self,
        text_tokens: torch.Tensor,
        image_tokens: torch.Tensor,
        need_weights: bool = False,
    ):
        """Fuse aligned embeddings into decoder prompt tokens.

        Accepts [T, d]/[M, d] or batched [B, T, d]/[B, M, d]; returns
        FusedPromptTokens with matching rank (and the [.., T, M] attention
        weights when asked).
        """
        if text_tokens.shape[-1] != image_tokens.shape[-1]:
            raise ShapeError(
                f"d_clip mismatch: text {text_tokens.shape[-1]} vs "
                f"image {image_tokens.shape[-1]}"
            )
        squeeze = text_tokens.ndim == 2
        if squeeze:
            text_tokens = text_tokens.unsqueeze(0)
            image_tokens = image_tokens.unsqueeze(0)
        attn_out, weights = self.cross_attn(
            text_tokens, key_value=image_tokens, need_weights=need_weights
        )
        fused = self.out_proj(self.fuse_norm(text_tokens + attn_out))
        if squeeze:
            fused = fused[0]
            weights = weights[0] if weights is not None else None
        out = FusedPromptTokens(tokens=fused)
        return (out, weights) if need_weights else out

    def fuse(
        self,
        image: torch.Tensor,
        prompt: TextPrompt | list[TextPrompt],
        image_tokens: torch.Tensor | None = None,
        text_tokens: torch.Tensor | None = None,
    ) -> FusedPromptTokens:
        """image + text prompt -> fused prompt tokens. image_tokens /
        text_tokens override the built-in towers when provided."""
        if image_tokens is None:
            image_tokens = self.encode_context_image(image)
        if text_tokens is None:
            text_tokens = self.encode_text(prompt)
        return self.cross_fuse(text_tokens, image_tokens)
