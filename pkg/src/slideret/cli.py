"""Command-line front end: gen / run / compare.

`gen` materializes a synthetic stream to a manifest directory, `run` trains
one experiment configuration and writes stage reports, the consistency table,
checkpoints, a trajectory CSV, and figures, and `compare` lays completed run
directories side by side in the style of an ablation table.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .corpus import SyntheticSpec, generate_synthetic_stream, load_manifest, write_manifest
from .encoder import save_params
from .errors import SlideretError
from .metrics import (
    aggregate_krc,
    aggregate_src,
    consistency_evaluation,
    holdout_split,
    stage_report,
)
from .trainer import TrainerConfig, run_stream
from . import reporting

# Config-file keys follow the hyperparameter-table naming; every key is
# optional and falls back to the TrainerConfig default.
_TRAINER_KEYS = {
    "mode": "mode",
    "number_of_epochs": "epochs_per_task",
    "batch_size": "batch_size",
    "minibatch_size": "replay_batch_size",
    "learning_rate": "learning_rate",
    "distance_consistency_loss_weight": "alpha",
    "margin": "margin",
    "patch_sampling_number": "patch_sample",
    "buffer_size": "buffer_capacity",
    "scheduler_step": "scheduler_step",
    "scheduler_gamma": "scheduler_gamma",
    "hidden_dim": "hidden",
    "attention_dim": "attn_dim",
    "representation_dim": "d_repr",
    "pairwise_scope": "pairwise_scope",
    "resample_patches_each_epoch": "resample_patches_each_epoch",
}


class ConfigError(SlideretError):
    pass


def load_experiment_config(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    stream = doc.get("stream", {})
    if ("manifest" in stream) == ("synthetic" in stream):
        raise ConfigError("stream: exactly one of 'manifest' or 'synthetic' is required")
    for key in doc.get("trainer", {}):
        if key not in _TRAINER_KEYS:
            raise ConfigError(f"trainer: unknown key {key!r}")
    return doc


def build_trainer_config(doc: dict, seed: int, mode: str | None) -> TrainerConfig:
    kwargs = {_TRAINER_KEYS[k]: v for k, v in doc.get("trainer", {}).items()}
    kwargs["seed"] = seed
    if mode is not None:
        kwargs["mode"] = mode
    try:
        return TrainerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_stream(doc: dict, seed: int, config_dir: Path):
    stream_doc = doc["stream"]
    if "manifest" in stream_doc:
        return load_manifest(config_dir / stream_doc["manifest"])
    spec_doc = dict(stream_doc["synthetic"])
    spec_doc.setdefault("seed", seed)
    try:
        spec = SyntheticSpec(**spec_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc
    return generate_synthetic_stream(spec)


def execute_run(doc: dict, out_dir: Path, seed: int, mode: str | None,
                config_dir: Path = Path(".")) -> dict:
    """Full pipeline for one configuration; returns the final report dict."""
    trainer_config = build_trainer_config(doc, seed, mode)
    stream = resolve_stream(doc, seed, config_dir)
    metric_doc = doc.get("metrics", {})
    split_fraction = float(metric_doc.get("split_fraction", 0.2))
    k_recall = int(metric_doc.get("k_recall", 3))
    k_precision = int(metric_doc.get("k_precision", 5))

    split = holdout_split(stream, split_fraction, seed)
    checkpoints = run_stream(stream, trainer_config)

    reports = [stage_report(ck, stream, split, k_recall=k_recall, k_precision=k_precision)
               for ck in checkpoints]

    table = None
    if len(checkpoints) >= 2:
        table = consistency_evaluation(checkpoints, stream, split)
        reports[-1].src = aggregate_src(table)
        reports[-1].krc = aggregate_krc(table)

    out_dir = Path(out_dir)
    (out_dir / "figures").mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    echo = {"seed": seed, "trainer": {k: v for k, v in asdict(trainer_config).items()},
            "stream": doc["stream"], "metrics": {"split_fraction": split_fraction,
                                                 "k_recall": k_recall, "k_precision": k_precision}}
    (out_dir / "config_echo.json").write_text(json.dumps(echo, indent=2) + "\n")

    for report in reports:
        (out_dir / f"stage_{report.stage:03d}.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n")
    if table is not None:
        doc_table = {
            "num_tasks": table.num_tasks,
            "rho": {f"{i},{j}": v for (i, j), v in sorted(table.rho.items())},
            "tau": {f"{i},{j}": v for (i, j), v in sorted(table.tau.items())},
            "src": reports[-1].src,
            "krc": reports[-1].krc,
        }
        (out_dir / "consistency.json").write_text(json.dumps(doc_table, indent=2) + "\n")
        reporting.plot_consistency_heatmap(table, out_dir / "figures" / "consistency.png")

    for ck in checkpoints:
        save_params(ck.params, out_dir / "checkpoints" / f"stage_{ck.stage:03d}")

    reporting.write_trajectory_csv(reports, out_dir / "trajectories.csv")
    reporting.plot_trajectories(reports, out_dir / "figures" / "trajectories.png")
    return reports[-1].to_dict()


def cmd_run(args) -> int:
    doc = load_experiment_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    execute_run(doc, Path(args.out), seed, args.mode, config_dir=Path(args.config).parent)
    return 0


def cmd_gen(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    try:
        spec = SyntheticSpec(**spec_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc
    stream = generate_synthetic_stream(spec)
    manifest = write_manifest(stream, Path(args.out))
    print(f"wrote {manifest}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        stage_files = sorted(run_dir.glob("stage_*.json"))
        if not stage_files:
            raise ConfigError(f"{run_dir}: no stage reports found")
        final = json.loads(stage_files[-1].read_text())
        echo_path = run_dir / "config_echo.json"
        name = run_dir.name
        if echo_path.is_file():
            echo = json.loads(echo_path.read_text())
            name = echo.get("trainer", {}).get("mode", name)
        rows.append({"run": name, **final})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_comparison(rows, out_dir / "comparison.csv", out_dir / "comparison.txt")
    reporting.plot_comparison(rows, out_dir / "comparison.png")
    print((out_dir / "comparison.txt").read_text(), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="slideret",
                                     description="continual whole-slide retrieval experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="materialize a synthetic stream to disk")
    p_gen.add_argument("--spec", required=True, help="JSON file of synthetic stream parameters")
    p_gen.add_argument("--out", required=True, help="output manifest directory")
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="train, evaluate, and report one configuration")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--out", required=True, help="output run directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--mode", default=None, help="override the trainer mode")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate completed run directories side by side")
    p_cmp.add_argument("runs", nargs="+", help="run directories produced by `slideret run`")
    p_cmp.add_argument("--out", required=True, help="output directory for the comparison")
    p_cmp.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SlideretError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
