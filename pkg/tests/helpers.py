"""Small model/dataset builders shared across test modules."""

import torch

from promptseg.decoder import DecoderConfig
from promptseg.encoder import EncoderConfig
from promptseg.model import ModelConfig, Segmenter
from promptseg.prompts import PromptConfig
from promptseg.textfusion import TextFusionConfig


def tiny_model_config(image_size: int = 32) -> ModelConfig:
    """Smallest config that still exercises every pathway; image 32, grid 4."""
    return ModelConfig(
        encoder=EncoderConfig(
            image_size=image_size, patch_size=8, embed_dim=32, depth=4,
            heads=2, neck_dim=16, num_tap_layers=4,
        ),
        prompts=PromptConfig(image_size=image_size, patch_size=8, token_dim=16),
        text=TextFusionConfig(
            d_clip=32, heads=2, ctx_patch=56, ctx_depth=1, text_depth=1,
            t_max=8, token_dim=16,
        ),
        decoder=DecoderConfig(
            token_dim=16, heads=2, num_blocks=1, upscale=4,
            grid_size=image_size // 8,
        ),
    )


def tiny_model(seed: int = 0, image_size: int = 32) -> Segmenter:
    torch.manual_seed(seed)
    return Segmenter(tiny_model_config(image_size))
