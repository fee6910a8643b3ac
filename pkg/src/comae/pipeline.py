"""Curriculum plans: which stages run, in what order, and what carries over.

Plan names:
  scratch  finetune only, random init
  cpc      contrastive pre-training -> finetune
  mae      masked pre-training -> finetune
  comae    contrastive -> masked -> finetune (the curriculum)
  reverse  masked -> contrastive -> finetune (ordering ablation)
  joint    both objectives summed per step -> finetune

Each stage writes its checkpoints and metrics under its own subdirectory and
initializes from the previous stage's final checkpoint via the documented
transfer rules; a stage failure halts the plan and leaves earlier checkpoints
on disk untouched.
"""

from __future__ import annotations

import json
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import Config, ConfigError
from .data import SyntheticPairs, load_manifest
from .encoder import build_model
from .train import (evaluate, train_cpc, train_finetune, train_joint,
                    train_mmmae)

PLANS = {
    "scratch": [],
    "cpc": ["cpc"],
    "mae": ["mmmae"],
    "comae": ["cpc", "mmmae"],
    "reverse": ["mmmae", "cpc"],
    "joint": ["joint"],
}

_TRAINERS = {"cpc": train_cpc, "mmmae": train_mmmae, "joint": train_joint}


def build_datasets(cfg: Config):
    """(train, test, num_classes) from the config's data section."""
    if cfg.data.source == "synthetic":
        train = SyntheticPairs(cfg.data.synthetic, cfg.data.train_count, "train")
        test = SyntheticPairs(cfg.data.synthetic, cfg.data.test_count, "test")
        return train, test, cfg.data.synthetic.num_classes
    root = cfg.data.resolved_root()
    if not root:
        raise ConfigError("data.source=manifest needs data.root or COMAE_DATA_DIR")
    root = Path(root)
    train = load_manifest(root / "train" if (root / "train").exists() else root)
    test_dir = root / "test"
    test = load_manifest(test_dir) if test_dir.exists() else train
    return train, test, len(train.class_names)


def run_pipeline(cfg: Config, plan: str, out_root: str | Path,
                 eval_modalities: tuple[str, ...] = ("both",)) -> dict:
    """Execute a plan end to end; returns {"checkpoint", "reports", "stages"}."""
    if plan not in PLANS:
        raise ConfigError(f"unknown plan {plan!r}; choose from {sorted(PLANS)}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    train_set, test_set, num_classes = build_datasets(cfg)

    state = None
    stage_dirs = {}
    for stage in PLANS[plan]:
        stage_dir = out_root / stage
        ckpt = _TRAINERS[stage](cfg, train_set, stage_dir,
                                init_state=state, eval_set=test_set)
        state, _ = load_checkpoint(ckpt)
        stage_dirs[stage] = str(stage_dir)

    ft_dir = out_root / "finetune"
    ckpt = train_finetune(cfg, train_set, ft_dir, num_classes,
                          init_state=state, eval_set=test_set)
    stage_dirs["finetune"] = str(ft_dir)

    state, meta = load_checkpoint(ckpt)
    model = build_model(cfg.model, "finetune", num_classes=num_classes,
                        seed=cfg.stage_seed("finetune"))
    model.load_state_dict(state)
    reports = {}
    for modality in eval_modalities:
        report = evaluate(model, test_set, num_classes, modality,
                          cfg.finetune.batch_size, meta["config_hash"])
        reports[modality] = report.to_dict()
    (out_root / "eval_report.json").write_text(json.dumps(reports, indent=2))
    return {"checkpoint": str(ckpt), "reports": reports, "stages": stage_dirs}
