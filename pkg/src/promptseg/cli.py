"""Command-line entrypoint: data preparation, synthetic generation,
training, evaluation, ablation, gradient checks, and serving.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2
usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from promptseg import evaluation, gradcheck
from promptseg.config import ExperimentConfig, config_schema_text, write_resolved
from promptseg.datasets import (
    DatasetManifest,
    ORGAN_NAMES,
    prepare_dataset,
    read_volume_npz,
    synth_dataset,
)
from promptseg.errors import (
    ArchiveFormatError,
    ConfigurationError,
    GenerationError,
    TrainingDiverged,
)
from promptseg.model import Segmenter, load_checkpoint
from promptseg.training import ABLATIONS, fit

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return parts[0], parts[1]


def _dataset_spec(text: str) -> tuple[str, str]:
    name, sep, root = text.partition("=")
    if not sep or not name or not root:
        raise argparse.ArgumentTypeError(f"expected 'name=root', got {text!r}")
    return name, root


# ---------------------------------------------------------------------------
# commands

def cmd_prepare_data(args) -> int:
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        print(f"error: input directory {in_dir} does not exist", file=sys.stderr)
        return EXIT_USAGE
    paths = sorted(in_dir.glob("*.npz"))
    if not paths:
        print(f"error: no .npz volumes in {in_dir}", file=sys.stderr)
        return EXIT_USAGE
    volumes, failures = [], 0
    for path in paths:
        try:
            volumes.append(read_volume_npz(path))
        except Exception as exc:
            failures += 1
            print(f"skipping {path.name}: {exc}", file=sys.stderr)
    if not volumes:
        print(f"error: all {failures} volumes failed to load", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = prepare_dataset(
        volumes,
        args.out,
        organs=args.organs,
        window=args.window,
        min_pixels=args.min_pixels,
        seed=args.seed,
    )
    write_resolved(args.out, {
        "command": "prepare-data",
        "organs": args.organs or sorted(ORGAN_NAMES),
        "window": list(args.window),
        "min_pixels": args.min_pixels,
        "seed": args.seed,
    })
    print(f"wrote {len(manifest.entries)} slices to {manifest.root} "
          f"({failures} volumes skipped)")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    manifest = synth_dataset(args.n, args.size, args.seed, args.out)
    write_resolved(args.out, {
        "command": "synth-data",
        "n": args.n,
        "size": args.size,
        "seed": args.seed,
    })
    print(f"wrote {len(manifest.entries)} slices to {manifest.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    if args.run_name is not None:
        overrides["run_name"] = args.run_name
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        cfg.train = type(cfg.train)(**{**cfg.train.__dict__, **overrides})
    manifest = DatasetManifest.load(cfg.require_dataset())

    run_dir = Path(cfg.train.out_dir) / cfg.train.run_name
    cfg.write_resolved(run_dir)
    torch.manual_seed(cfg.train.seed)
    model = Segmenter(cfg.model)
    result = fit(model, manifest, cfg.train, cfg.loss)
    last = result.records[-1]["loss"] if result.records else None
    print(json.dumps({
        "checkpoint": str(result.checkpoint_path),
        "final_step": result.final_step,
        "final_loss": last,
        "final_train_dsc": result.final_train_dsc,
        "stopped_early": result.stopped_early,
    }, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    params = evaluation.EvalParams(
        prompt_mode=args.mode,
        tau=args.tau,
        threshold=args.threshold,
        exclusion_threshold=args.exclusion_threshold,
    )
    reports, summary = evaluation.evaluate_split(
        manifest, args.split,
        evaluation.model_predict_fn(model, params.prompt_mode, params.threshold),
        params,
    )
    evaluation.write_report(args.report, reports, summary)
    write_resolved(Path(args.report).parent, {
        "command": "eval",
        "checkpoint": str(args.ckpt),
        "data": str(args.data),
        "split": args.split,
        "metrics": {
            "prompt_mode": params.prompt_mode,
            "tau": params.tau,
            "threshold": params.threshold,
            "exclusion_threshold": params.exclusion_threshold,
        },
    })
    print(json.dumps(summary.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    manifest = DatasetManifest.load(cfg.require_dataset())
    cfg.write_resolved(args.out)
    report = evaluation.ablate(
        cfg.model,
        manifest,
        cfg.train,
        args.out,
        loss_cfg=cfg.loss,
        model_seed=cfg.train.seed,
        eval_split=args.split,
        params=cfg.metrics,
    )
    for variant in evaluation.ABLATION_VARIANTS:
        row = report["variants"][variant]
        print(json.dumps({"variant": variant, **row}, sort_keys=True))
    print(f"direction_holds: {report['direction_holds']}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from promptseg.service import create_app, load_state

    state = load_state(
        checkpoint=args.ckpt,
        datasets=dict(args.data or []),
        allow_reload=args.allow_reload,
    )
    app = create_app(state, cors_origins=tuple(args.cors or ()))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    try:
        results = gradcheck.run_registered_checks(
            names=args.component or None,
            num_probes=args.probes,
            h=args.step,
            tolerance=args.tolerance,
        )
    except KeyError as exc:
        known = ", ".join(sorted(gradcheck.REGISTERED_CHECKS))
        print(f"error: unknown component {exc}; known: {known}", file=sys.stderr)
        return EXIT_USAGE
    for r in results:
        print(json.dumps(r.to_json(), sort_keys=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Promptable segmentation workflows.",
        epilog=config_schema_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="slice labeled volumes into a dataset")
    p.add_argument("--input", required=True, help="directory of volume .npz files")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.add_argument("--organs", type=_int_list, default=None,
                   help="comma-separated target ids, default all")
    p.add_argument("--window", type=_float_pair, default=(-200.0, 300.0),
                   help="intensity window 'lo,hi'")
    p.add_argument("--min-pixels", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth-data", help="generate the synthetic-shapes dataset")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.add_argument("--run-name", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="prepared dataset root")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--mode", default="box+text",
                   choices=("box", "text", "box+text", "silent+text", "silent"))
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--exclusion-threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the three variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data", type=_dataset_spec, action="append",
                   help="register a dataset as name=root (repeatable)")
    p.add_argument("--cors", action="append", help="allowed origin (repeatable)")
    p.add_argument("--allow-reload", action="store_true")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--component", action="append",
                   help="component to check (repeatable, default all)")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, GenerationError, ArchiveFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
