"""Command-line front door: gen-data, train, eval, grad-check, ablate.

Every run directory receives the fully resolved configuration plus the tool
version, so a run is reproducible from its own artifacts. A JSON config
file may supply any option; explicit flags override file values. Relative
--out paths resolve against $ACTIONCAST_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import apply_feature_stats, compute_feature_stats, load_dataset, save_dataset
from .evaluation import evaluate
from .grammar import (
    FeatureModel,
    default_feature_model,
    generate_dataset,
    resolve_grammar,
)
from .gradcheck import (
    check_combined,
    check_cp_loss,
    check_cross_entropy,
    check_l2,
    check_streams,
    run_all,
)
from .model import LossWeights, ModelConfig, load_checkpoint
from .report import (
    format_ablation_table,
    plot_loss_curves,
    write_ablation_table,
    write_loss_history_csv,
    write_metrics,
)
from .sampling import EvalClipConfig, SamplerConfig
from .training import OptimizerConfig, TrainConfig, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ACTIONCAST_OUTPUT_ROOT"

MODEL_GRANULARITIES = {
    "local": (),
    "+5": (5,),
    "+5+10": (5, 10),
    "+5+10+20": (5, 10, 20),
    "combined": (5, 10, 20),
}

LOSS_ALIASES = {
    "ce": "cross_entropy",
    "cross-entropy": "cross_entropy",
    "cross_entropy": "cross_entropy",
    "cploss": "cploss",
    "l2": "l2",
}


def _resolve_out(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    resolved = {
        k: v for k, v in vars(args).items() if k not in ("func", "config") and not k.startswith("_")
    }
    resolved["command"] = command
    resolved["tool_version"] = __version__
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _parse_loss(name: str) -> str:
    key = name.strip().lower()
    if key not in LOSS_ALIASES:
        raise SystemExit(f"error: unknown progress loss '{name}' (choices: ce, cross_entropy, cploss, l2)")
    return LOSS_ALIASES[key]


def _parse_int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    grammar = resolve_grammar(args.grammar)
    n_classes = len(grammar.class_names)
    if args.grammar == "ikea-default":
        fm = default_feature_model(
            args.feature_dim, args.seed,
            noise_std=args.noise_std, smoothing_window=args.smoothing_window,
        )
    else:
        fm = FeatureModel.random(
            n_classes, args.feature_dim, np.random.default_rng((args.seed, 0)),
            noise_std=args.noise_std, smoothing_window=args.smoothing_window,
        )
    total = args.sequences + args.test_sequences
    sequences = generate_dataset(
        grammar, fm, total, args.seed, null_gaps=not args.no_null_gaps
    )
    splits = {
        seq.source_id: ("train" if idx < args.sequences else "test")
        for idx, seq in enumerate(sequences)
    }
    save_dataset(
        sequences, out_dir,
        class_names=grammar.class_names,
        null_class_ids=grammar.null_class_ids,
        splits=splits,
    )
    _echo_config(out_dir, "gen-data", args)
    print(
        f"wrote {args.sequences} train + {args.test_sequences} test sequences "
        f"({sum(s.n_frames for s in sequences)} frames) to {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_config_from_args(args: argparse.Namespace, input_dim: int, n_classes: int) -> ModelConfig:
    if args.model not in MODEL_GRANULARITIES:
        raise SystemExit(f"error: unknown model '{args.model}' (choices: {sorted(MODEL_GRANULARITIES)})")
    return ModelConfig(
        input_dim=input_dim,
        n_classes=n_classes,
        granularities=MODEL_GRANULARITIES[args.model],
        hidden_size=args.hidden_size,
        proj_dim=args.proj_dim,
        dropout=args.dropout,
        progress_loss=_parse_loss(args.progress_loss),
    )


def _train_config_from_args(args: argparse.Namespace, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batches_per_epoch=args.batches_per_epoch,
        batch_size=args.batch_size,
        seed=seed,
        val_fraction=args.val_fraction,
        sampler=SamplerConfig(
            clip_len=args.clip_len,
            balance_classes=not args.no_balance,
            max_stride=args.max_stride,
            progress_label_mode=args.progress_label_mode,
        ),
        optimizer=OptimizerConfig(
            learning_rate=args.learning_rate,
            grad_clip_norm=args.grad_clip_norm if args.grad_clip_norm > 0 else None,
        ),
        weights=LossWeights(),
        eval_clips=EvalClipConfig(
            clip_len=args.clip_len,
            frame_stride=args.eval_frame_stride,
            window_stride=args.eval_window_stride,
        ),
    )


def _run_training(
    args: argparse.Namespace,
    seed: int,
    out_dir: Path | None,
    loaded,
    model_name: str,
    progress_loss: str,
):
    train_seqs = loaded.split("train")
    if not train_seqs:
        raise SystemExit("error: dataset has no train-split sequences")
    feature_stats = None
    if args.standardize:
        mean, std = compute_feature_stats(train_seqs)
        train_seqs = apply_feature_stats(train_seqs, mean, std)
        feature_stats = {"mean": mean.tolist(), "std": std.tolist()}
    granularities = MODEL_GRANULARITIES[model_name]
    model_cfg = ModelConfig(
        input_dim=loaded.feature_dim,
        n_classes=loaded.n_classes,
        granularities=granularities,
        hidden_size=args.hidden_size,
        proj_dim=args.proj_dim,
        dropout=args.dropout,
        progress_loss=progress_loss,
    )
    train_cfg = _train_config_from_args(args, seed)
    extra = {
        "class_names": loaded.class_names,
        "train_sequence_ids": sorted(s.source_id for s in train_seqs),
        "clip_len": args.clip_len,
        "feature_stats": feature_stats,
        "tool_version": __version__,
    }
    result = train(model_cfg, train_seqs, train_cfg, out_dir, checkpoint_extra=extra)
    return result, model_cfg, extra


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    loaded = load_dataset(args.data)
    result, _, _ = _run_training(
        args, args.seed, out_dir, loaded, args.model, _parse_loss(args.progress_loss)
    )
    write_loss_history_csv(result.history, out_dir / "loss_history.csv")
    plot_loss_curves(result.history, out_dir / "loss_curves.png")
    if result.val_accuracy:
        with open(out_dir / "val_accuracy.csv", "w") as fh:
            fh.write("epoch,accuracy\n")
            for epoch, acc in result.val_accuracy:
                fh.write(f"{epoch},{acc:.6f}\n")
    _echo_config(out_dir, "train", args)
    final = result.val_accuracy[-1][1] if result.val_accuracy else float("nan")
    print(
        f"trained {args.model} ({_parse_loss(args.progress_loss)}) for {args.epochs} epochs; "
        f"final val accuracy {final:.4f}; checkpoints in {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    params, extra = load_checkpoint(args.checkpoint)
    loaded = load_dataset(args.data)
    sequences = loaded.split(args.split)
    if not sequences:
        raise SystemExit(f"error: dataset has no '{args.split}' sequences")
    train_ids = set(extra.get("train_sequence_ids", []))
    overlap = train_ids & {s.source_id for s in sequences}
    if args.split == "test" and overlap:
        raise SystemExit(
            f"error: evaluation split overlaps training sequences: {sorted(overlap)[:5]}"
        )
    stats = extra.get("feature_stats")
    if stats:
        sequences = apply_feature_stats(
            sequences, np.asarray(stats["mean"]), np.asarray(stats["std"])
        )
    eval_cfg = EvalClipConfig(
        clip_len=args.clip_len or extra.get("clip_len", 10),
        frame_stride=args.eval_frame_stride,
        window_stride=args.eval_window_stride,
        granularities=params.config.granularities,
        progress_label_mode=args.progress_label_mode,
    )
    report = evaluate(params, sequences, eval_cfg, class_names=loaded.class_names)
    write_metrics(report, out_dir)
    _echo_config(out_dir, "eval", args)
    print(report.to_table())
    print(f"metrics written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------

def cmd_grad_check(args: argparse.Namespace) -> int:
    if args.component == "all":
        results = run_all(trials=args.trials, seed=args.seed)
    elif args.component == "losses":
        results = [
            check_cp_loss(trials=args.trials, seed=args.seed),
            check_cp_loss(trials=args.trials, seed=args.seed, truncated=True),
            check_cross_entropy(seed=args.seed + 1),
            check_l2(seed=args.seed + 2),
        ]
    elif args.component == "streams":
        results = [check_streams(seed=args.seed + 3)]
    elif args.component == "combined":
        results = [
            check_combined(seed=args.seed + 4, progress_loss="cploss"),
            check_combined(seed=args.seed + 5, progress_loss="cross_entropy"),
        ]
    else:
        raise SystemExit(f"error: unknown component '{args.component}'")
    for res in results:
        print(res.line())
    all_ok = all(r.ok for r in results)
    if args.out:
        out_dir = _resolve_out(args.out)
        payload = [
            {
                "component": r.component,
                "n_trials": r.n_trials,
                "max_rel_err": r.max_rel_err,
                "tolerance": r.tolerance,
                "passed": r.passed,
                "expected_to_fail": r.expected_to_fail,
                "ok": r.ok,
            }
            for r in results
        ]
        (out_dir / "gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n")
        _echo_config(out_dir, "grad-check", args)
    print("all gradient checks behaved as expected" if all_ok else "GRADIENT CHECK FAILURE")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args: argparse.Namespace) -> int:
    out_dir = _resolve_out(args.out)
    loaded = load_dataset(args.data)
    test_seqs = loaded.split("test")
    if not test_seqs:
        raise SystemExit("error: ablation needs a test split (gen-data --test-sequences)")
    seeds = _parse_int_list(args.seeds)
    configs = [c.strip() for c in args.configs.split(",") if c.strip()]
    kinds = [_parse_loss(k) for k in args.losses.split(",") if k.strip()]

    cell_metrics: dict[tuple[str, str], list] = {}
    for config_name in configs:
        loss_kinds = ["cross_entropy"] if config_name == "local" else kinds
        for kind in loss_kinds:
            for seed in seeds:
                cell_dir = out_dir / "cells" / f"{config_name.replace('+', 'p')}_{kind}_s{seed}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                result, model_cfg, extra = _run_training(
                    args, seed, cell_dir if args.keep_checkpoints else None,
                    loaded, config_name, kind,
                )
                eval_cfg = EvalClipConfig(
                    clip_len=args.clip_len,
                    frame_stride=args.eval_frame_stride,
                    window_stride=args.eval_window_stride,
                    granularities=model_cfg.granularities,
                    progress_label_mode=args.progress_label_mode,
                )
                test = test_seqs
                if extra["feature_stats"]:
                    stats = extra["feature_stats"]
                    test = apply_feature_stats(
                        test, np.asarray(stats["mean"]), np.asarray(stats["std"])
                    )
                report = evaluate(result.params, test, eval_cfg, class_names=loaded.class_names)
                (cell_dir / "metrics.json").write_text(report.to_json() + "\n")
                cell_metrics.setdefault((config_name, kind), []).append(report)
                print(
                    f"[{config_name:>9} / {kind:<13} seed {seed}] "
                    f"accuracy {report.forecast_accuracy:.4f}"
                )

    rows = []
    # the local configuration has no progress stream, so its row is the same
    # baseline under either progress-loss column
    for config_name in configs:
        for kind in kinds:
            key = (config_name, "cross_entropy") if config_name == "local" else (config_name, kind)
            reports = cell_metrics.get(key)
            if not reports:
                continue
            acc = float(np.mean([r.forecast_accuracy for r in reports]))
            base_reports = cell_metrics.get(("local", "cross_entropy"))
            base = float(np.mean([r.forecast_accuracy for r in base_reports])) if base_reports else float("nan")
            rows.append(
                {
                    "configuration": config_name,
                    "progress_loss": kind,
                    "seeds": ",".join(str(s) for s in seeds),
                    "accuracy": acc,
                    "mean_precision": float(np.mean([r.mean_precision for r in reports])),
                    "mean_recall": float(np.mean([r.mean_recall for r in reports])),
                    "delta_vs_local": acc - base,
                }
            )
    write_ablation_table(rows, out_dir)
    _echo_config(out_dir, "ablate", args)
    print()
    print(format_ablation_table(rows))
    print(f"ablation artifacts written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batches-per-epoch", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=1e-3)
    p.add_argument("--grad-clip-norm", type=float, default=5.0, help="<=0 disables clipping")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--proj-dim", type=int, default=100)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--clip-len", type=int, default=10)
    p.add_argument("--max-stride", type=int, default=8)
    p.add_argument("--no-balance", action="store_true", help="disable class-balanced sampling")
    p.add_argument("--standardize", action="store_true", help="per-dim standardization from train stats")
    p.add_argument("--progress-label-mode", choices=("prefix", "window"), default="prefix")
    p.add_argument("--eval-frame-stride", type=int, default=3)
    p.add_argument("--eval-window-stride", type=int, default=None)


def build_parser() -> tuple[argparse.ArgumentParser, argparse._SubParsersAction]:
    parser = argparse.ArgumentParser(
        prog="actioncast",
        description="Next-action forecasting via multi-granularity task-progress estimation.",
    )
    parser.add_argument("--version", action="version", version=f"actioncast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic grammar dataset")
    p.add_argument("--grammar", default="ikea-default", help="builtin name or grammar JSON path")
    p.add_argument("--sequences", type=int, default=40)
    p.add_argument("--test-sequences", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--smoothing-window", type=int, default=5)
    p.add_argument("--no-null-gaps", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a forecasting model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default="combined", help=f"one of {sorted(MODEL_GRANULARITIES)}")
    p.add_argument("--progress-loss", default="cploss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    _add_common_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--clip-len", type=int, default=None, help="default: training clip length")
    p.add_argument("--eval-frame-stride", type=int, default=3)
    p.add_argument("--eval-window-stride", type=int, default=None)
    p.add_argument("--progress-label-mode", choices=("prefix", "window"), default="prefix")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--component", choices=("all", "losses", "streams", "combined"), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="fusion-configuration sweep with a comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--configs", default="local,+5,+5+10,+5+10+20")
    p.add_argument("--losses", default="cross_entropy,cploss")
    p.add_argument("--keep-checkpoints", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    _add_common_training_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser, sub


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser, sub = build_parser()
    if "--config" in argv:
        config_path = argv[argv.index("--config") + 1]
        try:
            file_values = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config file {config_path}: {exc}", file=sys.stderr)
            return 1
        for sp in sub.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in file_values.items() if k in dests})
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return int(exc.code or 0)
    except Exception as exc:  # surface one-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
