"""Command-line entry point.

Subcommands: synth-data, pretrain-cpc, pretrain-mae, finetune, eval,
visualize, gradcheck, pipeline. Configuration comes from one JSON file
(--config, all fields defaulted) plus repeated --set key.path=value
overrides; COMAE_DATA_DIR overrides data.root. Exit codes: 0 success,
2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import Config, ConfigError, load_config
from .data import materialize_synthetic
from .encoder import build_model
from .errors import NumericError
from .gradcheck import LOSS_NAMES, grad_check
from .pipeline import PLANS, build_datasets, run_pipeline
from .train import evaluate, train_cpc, train_finetune, train_mmmae
from .visualize import attention_quadrants, reconstruction_grid


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="JSON config file (defaults apply)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. mask.ratio=0.5")


def _resolve_ckpt(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        finals = sorted(p.glob("*-final.ckpt"))
        if not finals:
            raise ConfigError(f"no *-final.ckpt in {p}")
        return finals[-1]
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def _init_state(path: str | None):
    if path is None:
        return None
    state, _ = load_checkpoint(_resolve_ckpt(path))
    return state


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comae",
                                     description="Paired RGB-depth curriculum pre-training and fine-tuning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialize a synthetic manifest + PNGs")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--raw-depth", action="store_true",
                   help="store 16-bit raw millimeters instead of the 8-bit encoding")

    for name, help_text in (("pretrain-cpc", "stage 1: cross-modal patch contrast"),
                            ("pretrain-mae", "stage 2: multi-modal masked autoencoding"),
                            ("finetune", "supervised classification fine-tuning")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--out", required=True)
        p.add_argument("--init", default=None, help="checkpoint file or stage directory")

    p = sub.add_parser("eval", help="accuracy report for a fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modality", default="both", choices=["both", "rgb", "depth"])
    p.add_argument("--out", default=None, help="report path (default: next to the checkpoint)")
    p.add_argument("--force", action="store_true", help="skip the config-hash check")

    p = sub.add_parser("visualize", help="reconstruction grids and attention heatmaps")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--loss", default="all", choices=["all", *LOSS_NAMES])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pipeline", help="run a full pre-training plan")
    _add_common(p)
    p.add_argument("--plan", required=True, choices=sorted(PLANS))
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth_data(args, cfg: Config) -> int:
    path = materialize_synthetic(cfg.data.synthetic, args.out, args.count,
                                 split=args.split, raw_depth=args.raw_depth)
    print(f"wrote {args.count} pairs, manifest at {path}")
    return 0


def _cmd_pretrain(args, cfg: Config, stage: str) -> int:
    train_set, test_set, num_classes = build_datasets(cfg)
    init = _init_state(args.init)
    if stage == "cpc":
        ckpt = train_cpc(cfg, train_set, args.out, init, test_set)
    elif stage == "mmmae":
        ckpt = train_mmmae(cfg, train_set, args.out, init, test_set)
    else:
        ckpt = train_finetune(cfg, train_set, args.out, num_classes, init, test_set)
    print(f"final checkpoint: {ckpt}")
    return 0


def _cmd_eval(args, cfg: Config) -> int:
    ckpt_path = _resolve_ckpt(args.ckpt)
    state, meta = load_checkpoint(ckpt_path)
    if meta.get("stage") != "finetune":
        raise ConfigError(f"eval needs a finetune checkpoint, got stage {meta.get('stage')!r}")
    expected = cfg.stage_hash("finetune")
    if meta.get("config_hash") != expected and not args.force:
        raise ConfigError(
            f"checkpoint config hash {meta.get('config_hash')} != current {expected}; "
            "pass --force to evaluate anyway")
    _, test_set, num_classes = build_datasets(cfg)
    model = build_model(cfg.model, "finetune", num_classes=num_classes,
                        seed=cfg.stage_seed("finetune"))
    model.load_state_dict(state)
    report = evaluate(model, test_set, num_classes, args.modality,
                      cfg.finetune.batch_size, meta.get("config_hash", ""))
    print(f"acc_s={report.acc_s:.4f} acc_c={report.acc_c:.4f} modality={args.modality}")
    out = Path(args.out) if args.out else ckpt_path.with_suffix(f".eval-{args.modality}.json")
    out.write_text(json.dumps(report.to_dict(), indent=2))
    print(f"report written to {out}")
    return 0


def _cmd_visualize(args, cfg: Config) -> int:
    state, meta = load_checkpoint(_resolve_ckpt(args.ckpt))
    stage = meta.get("stage")
    if stage not in ("mmmae", "joint"):
        raise ConfigError(f"visualize needs an mmmae/joint checkpoint, got {stage!r}")
    model = build_model(cfg.model, stage, seed=cfg.stage_seed(stage))
    model.load_state_dict(state)
    train_set, test_set, _ = build_datasets(cfg)
    dataset = test_set if args.split == "test" else train_set
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = reconstruction_grid(model, dataset, cfg, out_dir / "reconstructions.png", args.count)
    attn = attention_quadrants(model, dataset, cfg, out_dir / "attention_quadrants.png")
    print(f"wrote {grid} and {attn}")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    for name in (LOSS_NAMES if args.loss == "all" else [args.loss]):
        tol = 1e-4 if name == "mmmae" else 1e-6
        err, _ = grad_check(name, seed=args.seed)
        status = "ok" if err < tol else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} tol={tol:.0e} {status}")
        failed |= err >= tol
    return 3 if failed else 0


def _cmd_pipeline(args, cfg: Config) -> int:
    result = run_pipeline(cfg, args.plan, args.out,
                          eval_modalities=("both", "rgb", "depth"))
    for modality, report in result["reports"].items():
        print(f"[{args.plan}] {modality}: acc_s={report['acc_s']:.4f} acc_c={report['acc_c']:.4f}")
    print(f"final checkpoint: {result['checkpoint']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        cfg = load_config(args.config, args.overrides)
        if args.command == "synth-data":
            return _cmd_synth_data(args, cfg)
        if args.command == "pretrain-cpc":
            return _cmd_pretrain(args, cfg, "cpc")
        if args.command == "pretrain-mae":
            return _cmd_pretrain(args, cfg, "mmmae")
        if args.command == "finetune":
            return _cmd_pretrain(args, cfg, "finetune")
        if args.command == "eval":
            return _cmd_eval(args, cfg)
        if args.command == "visualize":
            return _cmd_visualize(args, cfg)
        if args.command == "pipeline":
            return _cmd_pipeline(args, cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
