"""Training loop: Adam over the compound loss with per-batch prompt-mode
sampling, ablation switches, JSONL step logs, and seeded determinism.

Everything random in a run (data order, prompt modes, box jitter) comes
from one numpy Generator seeded by TrainConfig.seed, so a rerun with the
same seed reproduces the loss curve exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from promptseg import metrics
from promptseg.datasets import DatasetManifest, SliceSample
from promptseg.errors import ConfigurationError, TrainingDiverged
from promptseg.losses import LossConfig, batch_loss_terms
from promptseg.model import PromptBundle, Segmenter, save_checkpoint
from promptseg.prompts import BoxPrompt

ABLATIONS = ("full", "no_multiscale", "no_text")
PROMPT_MODES = ("box", "text", "box+text", "silent+text", "silent")

#: modes a schedule may sample from ("silent" is only an ablation target)
SCHEDULABLE_MODES = ("box", "text", "box+text", "silent+text")


def default_schedule() -> dict[str, float]:
    return {m: 0.25 for m in SCHEDULABLE_MODES}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    ablation: str = "full"
    prompt_mode_schedule: dict[str, float] = field(default_factory=default_schedule)
    run_name: str = "run"
    out_dir: str = "runs"
    max_steps: int | None = None
    checkpoint_every: int = 0  # 0 = final checkpoint only
    eval_every: int = 50
    early_stop_train_dsc: float | None = None
    box_jitter: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(
                f"ablation must be one of {ABLATIONS}, got {self.ablation!r}"
            )
        bad = set(self.prompt_mode_schedule) - set(SCHEDULABLE_MODES)
        if bad:
            raise ConfigurationError(f"unknown prompt modes in schedule: {sorted(bad)}")
        probs = list(self.prompt_mode_schedule.values())
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"schedule must be a distribution, got {self.prompt_mode_schedule}"
            )
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError(f"max_steps must be >= 0, got {self.max_steps}")

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class TrainResult:
    records: list[dict]
    checkpoint_path: Path
    log_path: Path
    final_step: int
    final_train_dsc: float | None
    stopped_early: bool


def tight_box(mask: np.ndarray, jitter: float = 0.0,
              rng: np.random.Generator | None = None) -> BoxPrompt:
    """Tight bounding box of a nonempty mask, in (x, y) pixel corners;
    optional uniform jitter keeps the box valid."""
    ys, xs = np.nonzero(mask)
    x0, x1 = float(xs.min()), float(xs.max()) + 1.0
    y0, y1 = float(ys.min()), float(ys.max()) + 1.0
    if jitter > 0 and rng is not None:
        h, w = mask.shape
        x0 = float(np.clip(x0 + rng.uniform(-jitter, jitter), 0, x1 - 1))
        y0 = float(np.clip(y0 + rng.uniform(-jitter, jitter), 0, y1 - 1))
        x1 = float(np.clip(x1 + rng.uniform(-jitter, jitter), x0 + 1, w))
        y1 = float(np.clip(y1 + rng.uniform(-jitter, jitter), y0 + 1, h))
    return BoxPrompt(x0, y0, x1, y1)


def strip_text(mode: str) -> str:
    """no_text ablation: the same geometric prompting without fused tokens."""
    return {"box+text": "box", "text": "silent", "silent+text": "silent"}.get(mode, mode)


def bundle_for(sample: SliceSample, mode: str, jitter: float = 0.0,
               rng: np.random.Generator | None = None) -> PromptBundle:
    mask = np.asarray(sample.mask)
    if mode == "box":
        return PromptBundle(boxes=[tight_box(mask, jitter, rng)])
    if mode == "text":
        return PromptBundle(text=sample.text_prompt, use_geometric=False)
    if mode == "box+text":
        return PromptBundle(boxes=[tight_box(mask, jitter, rng)],
                            text=sample.text_prompt)
    if mode == "silent+text":
        return PromptBundle(text=sample.text_prompt)
    if mode == "silent":
        return PromptBundle()
    raise ConfigurationError(f"unknown prompt mode {mode!r}")


def apply_ablation(model: Segmenter, ablation: str) -> None:
    if ablation == "no_multiscale":
        model.image_encoder.cfg.multi_feature = False


@torch.no_grad()
def train_split_dsc(model: Segmenter, samples: list[SliceSample],
                    mode: str = "box+text", batch_size: int = 8) -> float:
    """Mean DSC of thresholded predictions over samples (plain mean, no
    exclusion rule; this is the overfit progress measure)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    scores = []
    try:
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            images = torch.stack(
                [torch.as_tensor(s.image, dtype=dtype) for s in chunk]
            ).unsqueeze(1)
            bundles = [bundle_for(s, mode) for s in chunk]
            out = model(images, bundles)
            preds = (out.full_res > 0).cpu().numpy()
            for pred, s in zip(preds, chunk):
                scores.append(metrics.dsc(pred, np.asarray(s.mask) > 0))
    finally:
        model.train(was_training)
    return float(np.mean(scores))


def fit(
    model: Segmenter,
    manifest: DatasetManifest,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    split: str = "train",
) -> TrainResult:
    """Run the optimizer loop; returns the step log and final checkpoint.

    Steps per epoch = ceil(N / batch_size); the last short batch runs. A
    non-finite loss aborts with the offending step and sample ids.
    """
    loss_cfg = loss_cfg or LossConfig()
    samples = manifest.load_samples(split)
    if not samples:
        raise ConfigurationError(f"split {split!r} of {manifest.root} is empty")

    apply_ablation(model, train_cfg.ablation)
    dtype = train_cfg.torch_dtype()
    model.to(dtype)

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    modes = sorted(train_cfg.prompt_mode_schedule)
    mode_probs = np.array([train_cfg.prompt_mode_schedule[m] for m in modes])

    images = torch.stack(
        [torch.as_tensor(s.image, dtype=dtype) for s in samples]
    ).unsqueeze(1)
    targets = torch.stack(
        [torch.as_tensor(np.asarray(s.mask), dtype=dtype) for s in samples]
    )

    run_dir = Path(train_cfg.out_dir) / train_cfg.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "log.jsonl"

    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    model.train()

    records: list[dict] = []
    step = 0
    stopped_early = False
    final_train_dsc = None
    n = len(samples)

    def step_budget_left() -> bool:
        return train_cfg.max_steps is None or step < train_cfg.max_steps

    with log_path.open("w", encoding="utf-8") as log_file:
        for epoch in range(train_cfg.epochs):
            if stopped_early or not step_budget_left():
                break
            order = rng.permutation(n)
            for lo in range(0, n, train_cfg.batch_size):
                if stopped_early or not step_budget_left():
                    break
                idx = order[lo:lo + train_cfg.batch_size]
                mode = str(rng.choice(modes, p=mode_probs))
                if train_cfg.ablation == "no_text":
                    mode = strip_text(mode)
                bundles = [
                    bundle_for(samples[i], mode, train_cfg.box_jitter, rng)
                    for i in idx
                ]
                batch_images = images[idx]
                batch_targets = targets[idx]

                out = model(batch_images, bundles)
                probs = torch.sigmoid(out.full_res)
                total, dice_term, bce_term = batch_loss_terms(
                    probs, batch_targets, loss_cfg
                )

                loss_val = float(total.detach())
                step += 1
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_val} at step {step}",
                        step=step,
                        batch_ids=[samples[i].source[0] for i in idx],
                    )

                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()

                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss_val,
                    "dice_term": float(dice_term.detach()),
                    "bce_term": float(bce_term.detach()),
                    "prompt_mode": mode,
                }
                records.append(record)
                log_file.write(json.dumps(record, sort_keys=True) + "\n")

                if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                    save_checkpoint(model, run_dir / f"ckpt_{step}",
                                    extra=_extra(train_cfg, step, epoch, optimizer))

                if (train_cfg.early_stop_train_dsc is not None
                        and step % train_cfg.eval_every == 0):
                    eval_mode = strip_text("box+text") \
                        if train_cfg.ablation == "no_text" else "box+text"
                    final_train_dsc = train_split_dsc(
                        model, samples, mode=eval_mode,
                        batch_size=train_cfg.batch_size,
                    )
                    if final_train_dsc >= train_cfg.early_stop_train_dsc:
                        stopped_early = True

    checkpoint_path = run_dir / f"ckpt_{step}"
    save_checkpoint(model, checkpoint_path,
                    extra=_extra(train_cfg, step, train_cfg.epochs, optimizer))
    return TrainResult(
        records=records,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        final_step=step,
        final_train_dsc=final_train_dsc,
        stopped_early=stopped_early,
    )


def _extra(cfg: TrainConfig, step: int, epoch: int, optimizer) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "ablation": cfg.ablation,
        "seed": cfg.seed,
        "optimizer": optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
