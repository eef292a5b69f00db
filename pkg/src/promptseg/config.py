"""One declarative YAML file per experiment. Every section is optional and
falls back to defaults, but unknown keys anywhere are a hard error so typos
cannot silently change a run. Each command materializes the fully-resolved
config next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from promptseg.decoder import DecoderConfig
from promptseg.encoder import EncoderConfig
from promptseg.errors import ConfigurationError
from promptseg.evaluation import EvalParams
from promptseg.losses import LossConfig
from promptseg.model import ModelConfig
from promptseg.prompts import PromptConfig
from promptseg.textfusion import TextFusionConfig
from promptseg.training import TrainConfig

SECTIONS = ("encoder", "prompt", "decoder", "loss", "train", "metrics", "service")

RESOLVED_NAME = "config_resolved.yaml"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    cors_origins: tuple[str, ...] = ()
    allow_reload: bool = False
    checkpoint: str | None = None
    datasets: dict[str, str] = field(default_factory=dict)  # name -> root

    def __post_init__(self):
        if not (0 < self.port < 65536):
            raise ConfigurationError(f"port must be in 1..65535, got {self.port}")


def _build(cls, doc: dict, where: str, tuple_fields: tuple[str, ...] = ()):
    """Construct a config dataclass from a mapping, rejecting unknown keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} in section {where!r}")
    kwargs = dict(doc)
    for name in tuple_fields:
        if name in kwargs and isinstance(kwargs[name], list):
            kwargs[name] = tuple(kwargs[name])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad section {where!r}: {exc}") from None


@dataclass
class ExperimentConfig:
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    metrics: EvalParams
    service: ServiceConfig
    dataset: str | None = None  # prepared dataset root, from train.dataset

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigurationError("config root must be a mapping")
        for key in doc:
            if key not in SECTIONS:
                raise ConfigurationError(f"unknown config section {key!r}")

        prompt_doc = doc.get("prompt") or {}
        if not isinstance(prompt_doc, dict):
            raise ConfigurationError("section 'prompt' must be a mapping")
        for key in prompt_doc:
            if key not in ("geometric", "text"):
                raise ConfigurationError(f"unknown key {key!r} in section 'prompt'")

        model = ModelConfig(
            encoder=_build(EncoderConfig, doc.get("encoder"), "encoder"),
            prompts=_build(PromptConfig, prompt_doc.get("geometric"), "prompt.geometric"),
            text=_build(TextFusionConfig, prompt_doc.get("text"), "prompt.text"),
            decoder=_build(DecoderConfig, doc.get("decoder"), "decoder"),
        )
        train_doc = doc.get("train") or {}
        if not isinstance(train_doc, dict):
            raise ConfigurationError(
                f"section 'train' must be a mapping, got {type(train_doc).__name__}"
            )
        train_doc = dict(train_doc)
        dataset = train_doc.pop("dataset", None)
        return cls(
            model=model,
            loss=_build(LossConfig, doc.get("loss"), "loss"),
            train=_build(TrainConfig, train_doc, "train"),
            metrics=_build(EvalParams, doc.get("metrics"), "metrics",
                           tuple_fields=("spacing",)),
            service=_build(ServiceConfig, doc.get("service"), "service",
                           tuple_fields=("cors_origins",)),
            dataset=dataset,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["dataset"] = self.dataset
        return _plain({
            "encoder": dataclasses.asdict(self.model.encoder),
            "prompt": {
                "geometric": dataclasses.asdict(self.model.prompts),
                "text": dataclasses.asdict(self.model.text),
            },
            "decoder": dataclasses.asdict(self.model.decoder),
            "loss": dataclasses.asdict(self.loss),
            "train": train,
            "metrics": dataclasses.asdict(self.metrics),
            "service": dataclasses.asdict(self.service),
        })

    def require_dataset(self) -> str:
        if not self.dataset:
            raise ConfigurationError("missing config key 'train.dataset'")
        return self.dataset

    def write_resolved(self, out_dir: str | Path) -> Path:
        return write_resolved(out_dir, self.to_dict())


def _plain(value):
    """Recursively strip tuples/Paths down to YAML-safe builtins."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_resolved(out_dir: str | Path, doc: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(
        yaml.safe_dump(_plain(doc), sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )
    return path


def config_schema_text() -> str:
    """The full schema with defaults, for --help: generated from the config
    dataclasses so it cannot drift."""
    default = ExperimentConfig.from_dict({})
    doc = default.to_dict()
    doc["train"]["dataset"] = "<prepared dataset root; required for train/ablate>"
    body = yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)
    return (
        "config file schema (YAML; every key optional, defaults shown; "
        "unknown keys are errors):\n\n" + body
    )
