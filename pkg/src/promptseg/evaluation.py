"""Evaluation harnesses: split-level metric reports, the text-conditioning
probe (does the prompt select the named structure?), and the three-variant
ablation comparison.

Text-only evaluation uses the silent+text bundle, the same convention the
service applies to requests without geometric prompts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from promptseg import metrics
from promptseg.datasets import DatasetManifest, SliceSample
from promptseg.errors import ConfigurationError
from promptseg.losses import LossConfig
from promptseg.model import ModelConfig, Segmenter
from promptseg.training import TrainConfig, bundle_for, fit, strip_text

ABLATION_VARIANTS = ("full", "no_multiscale", "no_text")


@dataclass
class EvalParams:
    prompt_mode: str = "box+text"
    tau: float = 1.0
    spacing: tuple[float, float] = (1.0, 1.0)
    threshold: float = 0.0
    exclusion_threshold: float = 0.1


def model_predict_fn(model: Segmenter, mode: str, threshold: float = 0.0):
    """Wrap a model as sample -> bool mask for evaluate_split."""

    def predict(sample: SliceSample) -> np.ndarray:
        bundle = bundle_for(sample, mode)
        result = model.segment(
            torch.as_tensor(np.asarray(sample.image)),
            points=bundle.points,
            boxes=bundle.boxes,
            mask=bundle.mask,
            text=bundle.text,
            use_geometric=bundle.use_geometric,
            threshold=threshold,
        )
        return result.mask.numpy()

    return predict


def evaluate_split(
    manifest: DatasetManifest,
    split: str,
    predict_fn,
    params: EvalParams | None = None,
) -> tuple[list[metrics.MetricReport], metrics.MetricSummary]:
    """One MetricReport per sample plus the aggregate. predict_fn maps a
    SliceSample to a predicted bool mask."""
    params = params or EvalParams()
    samples = manifest.load_samples(split)
    if not samples:
        raise ConfigurationError(f"split {split!r} of {manifest.root} is empty")
    reports = []
    for sample in samples:
        pred = np.asarray(predict_fn(sample)) > 0
        ref = np.asarray(sample.mask) > 0
        reports.append(
            metrics.evaluate_pair(
                pred,
                ref,
                sample_id=f"{sample.source[0]}_{sample.source[1]}_{sample.organ_name}",
                organ_id=sample.organ_id,
                organ_name=sample.organ_name,
                tau=params.tau,
                spacing=params.spacing,
            )
        )
    summary = metrics.aggregate(reports, params.exclusion_threshold)
    return reports, summary


def write_report(
    path: str | Path,
    reports: list[metrics.MetricReport],
    summary: metrics.MetricSummary,
) -> None:
    doc = {
        "reports": [r.to_json() for r in reports],
        "summary": summary.to_json(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# text conditioning probe

@dataclass
class ConditioningReport:
    """Per-sample DSC of text-only predictions against the named target and
    against the other structure in the same image."""

    n: int
    dsc_named_mean: float
    dsc_distractor_mean: float
    per_sample: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "dsc_distractor_mean": self.dsc_distractor_mean,
            "dsc_named_mean": self.dsc_named_mean,
            "n": self.n,
            "per_sample": self.per_sample,
        }


def conditioning_report(
    model: Segmenter,
    manifest: DatasetManifest,
    split: str = "test",
    threshold: float = 0.0,
) -> ConditioningReport:
    """Text-only (silent+text) predictions scored against the named shape
    and its same-image distractor. Needs the two-structures-per-image
    dataset layout."""
    samples = manifest.load_samples(split)
    if not samples:
        raise ConfigurationError(f"split {split!r} of {manifest.root} is empty")
    by_volume: dict[str, list[SliceSample]] = {}
    for s in samples:
        by_volume.setdefault(s.source[0], []).append(s)

    predict = model_predict_fn(model, "silent+text", threshold)
    named_scores, distractor_scores, rows = [], [], []
    for vid, group in sorted(by_volume.items()):
        if len(group) != 2:
            raise ConfigurationError(
                f"volume {vid} has {len(group)} structures, conditioning "
                f"probe needs exactly 2"
            )
        for sample, other in ((group[0], group[1]), (group[1], group[0])):
            pred = predict(sample) > 0
            named = metrics.dsc(pred, np.asarray(sample.mask) > 0)
            distractor = metrics.dsc(pred, np.asarray(other.mask) > 0)
            named_scores.append(named)
            distractor_scores.append(distractor)
            rows.append({
                "dsc_distractor": distractor,
                "dsc_named": named,
                "target": sample.organ_name,
                "volume": vid,
            })
    return ConditioningReport(
        n=len(rows),
        dsc_named_mean=float(np.mean(named_scores)),
        dsc_distractor_mean=float(np.mean(distractor_scores)),
        per_sample=rows,
    )


# ---------------------------------------------------------------------------
# ablation comparison

def ablate(
    model_cfg: ModelConfig,
    manifest: DatasetManifest,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    loss_cfg: LossConfig | None = None,
    model_seed: int = 0,
    eval_split: str = "test",
    params: EvalParams | None = None,
) -> dict:
    """Train and evaluate full / no_multiscale / no_text with shared init
    seed and data order; emit a three-row comparison (DSC, NSD, HD95) plus
    the conditioning probe per variant."""
    params = params or EvalParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = {}
    for variant in ABLATION_VARIANTS:
        torch.manual_seed(model_seed)
        model = Segmenter(ModelConfig.from_dict(model_cfg.to_dict()))
        cfg_kwargs = {**train_cfg.__dict__}
        cfg_kwargs.update(
            ablation=variant,
            run_name=f"{train_cfg.run_name}_{variant}",
            out_dir=str(out_dir),
        )
        variant_cfg = TrainConfig(**cfg_kwargs)
        fit(model, manifest, variant_cfg, loss_cfg)

        eval_mode = params.prompt_mode
        if variant == "no_text":
            eval_mode = strip_text(eval_mode)
        reports, summary = evaluate_split(
            manifest, eval_split,
            model_predict_fn(model, eval_mode, params.threshold),
            params,
        )
        conditioning = conditioning_report(model, manifest, eval_split,
                                           params.threshold)
        rows[variant] = {
            "conditioning_dsc_distractor": conditioning.dsc_distractor_mean,
            "conditioning_dsc_named": conditioning.dsc_named_mean,
            "dsc_mean": summary.dsc_mean,
            "eval_prompt_mode": eval_mode,
            "hd95_mean": summary.hd95_mean,
            "n_samples": len(reports),
            "nsd_mean": summary.nsd_mean,
        }

    report = {
        "direction_holds": (
            rows["no_text"]["conditioning_dsc_named"]
            < rows["full"]["conditioning_dsc_named"]
        ),
        "eval_split": eval_split,
        "variants": rows,
    }
    (out_dir / "ablation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report
