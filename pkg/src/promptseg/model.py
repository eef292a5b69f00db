"""Full promptable segmenter: image encoder + geometric and image-text
prompt encoders + mask decoder, with checkpoint io and config hashing.

Prompt token order in the decoder sequence is geometric first, then
text-fused tokens. A bundle with neither geometric nor text prompts is
rejected; the silent token covers the no-geometric case whenever geometric
prompting is on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from promptseg.decoder import DecoderConfig, MaskDecoder, MaskLogits, binarize, upsample
from promptseg.encoder import EncoderConfig, ImageEncoder
from promptseg.errors import ConfigurationError, PromptError, ShapeError
from promptseg.prompts import BoxPrompt, PointPrompt, PromptConfig, PromptEncoder
from promptseg.textfusion import ImageTextEncoder, TextFusionConfig, TextPrompt

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    text: TextFusionConfig = field(default_factory=TextFusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        widths = {
            "encoder.neck_dim": self.encoder.neck_dim,
            "prompts.token_dim": self.prompts.token_dim,
            "text.token_dim": self.text.token_dim,
            "decoder.token_dim": self.decoder.token_dim,
        }
        if len(set(widths.values())) != 1:
            raise ConfigurationError(f"token widths must agree, got {widths}")
        if self.encoder.image_size != self.prompts.image_size:
            raise ConfigurationError(
                f"encoder image_size {self.encoder.image_size} != "
                f"prompts image_size {self.prompts.image_size}"
            )
        if self.encoder.patch_size != self.prompts.patch_size:
            raise ConfigurationError(
                f"encoder patch_size {self.encoder.patch_size} != "
                f"prompts patch_size {self.prompts.patch_size}"
            )
        if self.decoder.grid_size != self.encoder.grid_size:
            raise ConfigurationError(
                f"decoder grid_size {self.decoder.grid_size} != "
                f"encoder grid {self.encoder.grid_size}"
            )

    def to_dict(self) -> dict:
        return {
            "decoder": asdict(self.decoder),
            "encoder": asdict(self.encoder),
            "prompts": asdict(self.prompts),
            "text": asdict(self.text),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**doc["encoder"]),
            prompts=PromptConfig(**doc["prompts"]),
            text=TextFusionConfig(**doc["text"]),
            decoder=DecoderConfig(**doc["decoder"]),
        )

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass
class PromptBundle:
    """Everything one sample's prompts can carry. use_geometric=False drops
    the geometric token path entirely (pure-text conditioning); with it on
    and no points/boxes given, the silent token stands in."""

    points: list[PointPrompt] | None = None
    boxes: list[BoxPrompt] | None = None
    mask: torch.Tensor | None = None
    text: str | None = None
    use_geometric: bool = True

    def __post_init__(self):
        if not self.use_geometric and self.text is None:
            raise PromptError("a bundle needs geometric prompts or text")
        if not self.use_geometric and (self.points or self.boxes or self.mask is not None):
            raise PromptError("use_geometric=False forbids points/boxes/mask")


@dataclass
class SegmentResult:
    mask: torch.Tensor  # bool [H, W]
    logits: MaskLogits


class Segmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg.encoder)
        self.prompt_encoder = PromptEncoder(cfg.prompts)
        self.text_encoder = ImageTextEncoder(cfg.text)
        self.mask_decoder = MaskDecoder(cfg.decoder)

    @property
    def image_size(self) -> int:
        return self.cfg.encoder.image_size

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:  # [B, H, W] grayscale
            images = images.unsqueeze(1)
        s = self.image_size
        if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (s, s):
            raise ShapeError(
                f"expected [B, 1, {s}, {s}] images, got {tuple(images.shape)}"
            )
        return images

    def forward(
        self, images: torch.Tensor, bundles: list[PromptBundle]
    ) -> MaskLogits:
        """Batched forward. All bundles must agree on which prompt kinds
        they carry so token counts stay uniform."""
        images = self._check_images(images)
        b = images.shape[0]
        if len(bundles) != b:
            raise ShapeError(f"{b} images but {len(bundles)} prompt bundles")
        geo = {bu.use_geometric for bu in bundles}
        has_text = {bu.text is not None for bu in bundles}
        if len(geo) > 1 or len(has_text) > 1:
            raise ShapeError("batch mixes prompt modes")
        use_geometric, with_text = geo.pop(), has_text.pop()

        pyramid = self.image_encoder(images)
        d = self.cfg.decoder.token_dim
        g = self.cfg.encoder.grid_size

        if use_geometric:
            sparse, dense = self.prompt_encoder.batch_encode(
                [(bu.points, bu.boxes, bu.mask) for bu in bundles]
            )
        else:
            sparse = torch.zeros(b, 0, d, device=images.device, dtype=images.dtype)
            dense = (
                self.prompt_encoder.silent_dense[None, :, None, None]
                .expand(b, -1, g, g)
            )

        parts = [sparse]
        if with_text:
            prompts = [
                TextPrompt.from_text(bu.text, self.text_encoder.tokenizer)
                for bu in bundles
            ]
            fused = self.text_encoder.fuse(images, prompts)
            parts.append(fused.tokens)
        tokens = torch.cat(parts, dim=1)
        if tokens.shape[1] < 1:
            raise PromptError("prompt bundles produced no tokens")

        low_res = self.mask_decoder(pyramid.fused, tokens, dense)
        full_res = upsample(low_res, (self.image_size, self.image_size))
        return MaskLogits(low_res=low_res, full_res=full_res)

    @torch.no_grad()
    def segment(
        self,
        image: torch.Tensor,
        points: list[PointPrompt] | None = None,
        boxes: list[BoxPrompt] | None = None,
        mask: torch.Tensor | None = None,
        text: str | None = None,
        use_geometric: bool = True,
        threshold: float = 0.0,
    ) -> SegmentResult:
        """One image, one prompt bundle, one binary mask at input size."""
        image = torch.as_tensor(image, dtype=torch.float32)
        if image.ndim == 2:
            image = image[None]
        if image.ndim != 3:
            raise ShapeError(f"image must be [H, W] or [1, H, W], got {tuple(image.shape)}")
        bundle = PromptBundle(
            points=points, boxes=boxes, mask=mask, text=text,
            use_geometric=use_geometric,
        )
        was_training = self.training
        self.eval()
        try:
            out = self.forward(image[None], [bundle])
        finally:
            self.train(was_training)
        logits = MaskLogits(low_res=out.low_res[0], full_res=out.full_res[0])
        return SegmentResult(mask=binarize(logits.full_res, threshold), logits=logits)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Segmenter, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "weights": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Segmenter, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = ModelConfig.from_dict(payload["config"])
    model = Segmenter(cfg)
    model.load_state_dict(payload["weights"])
    return model, payload.get("extra", {})


def weights_fingerprint(model: nn.Module) -> str:
    """Order-stable digest of all parameters and buffers; two models with
    the same fingerprint produce the same outputs."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
