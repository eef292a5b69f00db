"""Promptable multi-organ segmentation toolkit.

Model stack (multi-scale ViT encoder, geometric and image-text prompt
encoders, mask decoder), training loop with a compound Dice+BCE loss,
surface-distance metrics, a synthetic-shapes benchmark, an HTTP inference
service and a CLI.
"""

__version__ = "0.1.0"

from promptseg.errors import (
    ArchiveFormatError,
    ConfigurationError,
    GenerationError,
    PromptError,
    ShapeError,
)

__all__ = [
    "ArchiveFormatError",
    "ConfigurationError",
    "GenerationError",
    "PromptError",
    "ShapeError",
    "__version__",
]
