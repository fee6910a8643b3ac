"""Per-stage training loops, evaluation, and JSONL metrics logging.

Every stage: seeded init (or transfer from a source checkpoint), AdamW with
the linear lr scaling rule and warmup-then-cosine schedule, per-epoch JSONL
records {epoch, stage, loss, lr, wall_seconds, extra}. The first few step
losses of epoch 0 are logged so two runs can be compared bitwise.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import rng_state_hex, save_checkpoint, transfer_weights
from .config import Config
from .cpc import cpc_features, cpc_loss, cpc_retrieval_accuracy
from .data import PairedSample, augment_pretrain
from .encoder import CoMAEModel, build_model
from .errors import NumericError
from .finetune import classify, effective_lr, finetune_batch_loss, param_groups
from .masking import make_mask_batch
from .metrics import EvalReport, compute_report
from .mmmae import mmmae_forward, mmmae_loss
from .seeding import seed_torch, stream

TRACE_STEPS = 5     # per-step losses logged from epoch 0 for determinism audits


class JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images))


def collate(samples: list[PairedSample]):
    """Stack a list of paired samples into (rgb, depth, labels) tensors;
    a modality absent from every sample collates to None."""
    rgb = None if samples[0].rgb is None else _to_tensor([s.rgb for s in samples])
    depth = None if samples[0].depth is None else _to_tensor([s.depth for s in samples])
    labels = None
    if samples[0].label is not None:
        labels = torch.tensor([s.label for s in samples], dtype=torch.int64)
    return rgb, depth, labels


def epoch_batches(count: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def cosine_lr(eff_lr: float, epoch_frac: float, warmup: float, total: int,
              min_lr: float) -> float:
    if warmup > 0 and epoch_frac < warmup:
        return eff_lr * epoch_frac / warmup
    span = max(total - warmup, 1e-9)
    return min_lr + (eff_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * (epoch_frac - warmup) / span))


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in {stage} at epoch {epoch} step {step}: {loss.item()}")


def _save(model: CoMAEModel, cfg: Config, stage: str, epoch: int, out_dir: Path,
          name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    meta = {"stage": stage, "epoch": epoch,
            "config_hash": cfg.stage_hash(stage), "rng_state": rng_state_hex()}
    save_checkpoint(path, model.state_dict(), meta)
    return path


def _pretrain_batch(dataset, indices, cfg: Config, stage: str, epoch: int):
    samples = []
    for idx in indices:
        rng = stream(cfg.seed, stage, "aug", epoch, int(idx))
        samples.append(augment_pretrain(dataset[int(idx)], rng,
                                        cfg.data.resolution, cfg.data.augment))
    return collate(samples)


def _run_stage(stage: str, cfg: Config, dataset, out_dir: Path,
               init_state=None, eval_set=None, num_classes: int | None = None,
               log: JsonlLogger | None = None) -> Path:
    """Shared trainer for cpc / mmmae / joint / finetune."""
    out_dir = Path(out_dir)
    log = log or JsonlLogger(out_dir / "metrics.jsonl")
    # the joint baseline trains both objectives for the masked stage's budget
    stage_cfg = getattr(cfg, "mmmae" if stage == "joint" else stage)
    mm_cfg = cfg.mmmae

    drop_path = cfg.model.drop_path if stage == "finetune" else 0.0
    model = build_model(cfg.model, stage, num_classes=num_classes,
                        seed=cfg.stage_seed(stage), drop_path_rate=drop_path)
    if init_state is not None:
        transfer_weights(init_state, model)
    seed_torch(cfg.stage_seed(stage), "train")

    layer_decay = cfg.finetune.layer_decay if stage == "finetune" else 1.0
    groups = param_groups(model, stage_cfg.weight_decay, layer_decay)
    optimizer = torch.optim.AdamW(groups, lr=0.0,
                                  betas=(stage_cfg.beta1, stage_cfg.beta2))
    eff_lr = effective_lr(stage_cfg.base_lr, stage_cfg.batch_size)
    epochs = stage_cfg.epochs
    start = time.perf_counter()

    for epoch in range(epochs):
        model.train()
        order_rng = stream(cfg.seed, stage, "order", epoch)
        batches = epoch_batches(len(dataset), stage_cfg.batch_size, order_rng)
        losses, lr, trace = [], 0.0, []
        for step, indices in enumerate(batches):
            lr = cosine_lr(eff_lr, epoch + step / len(batches),
                           stage_cfg.warmup_epochs, epochs, stage_cfg.min_lr)
            set_lr(optimizer, lr)

            if stage == "finetune":
                rgb, depth, labels = collate([dataset[int(i)] for i in indices])
                if cfg.finetune.modality == "rgb":
                    depth = None
                elif cfg.finetune.modality == "depth":
                    rgb = None
                drop_rngs = [stream(cfg.seed, stage, "drop", epoch, int(i)) for i in indices]
                loss = finetune_batch_loss(
                    model, rgb, depth, labels, cfg.finetune, num_classes,
                    drop_rngs, lambda gi: stream(cfg.seed, stage, "mix", epoch, step, gi))
            else:
                rgb, depth, _ = _pretrain_batch(dataset, indices, cfg, stage, epoch)
                n = (cfg.data.resolution // cfg.model.patch_size) ** 2
                if stage in ("mmmae", "joint"):
                    rngs = [stream(cfg.seed, "mask", epoch, int(i)) for i in indices]
                    plans = make_mask_batch(n, cfg.mask.ratio, cfg.mask.strategy, rngs)
                    loss = mmmae_loss(mmmae_forward(model, rgb, depth, plans, mm_cfg.norm_eps))
                    if stage == "joint":
                        loss = loss + cpc_loss(*cpc_features(model, rgb, depth),
                                               cfg.cpc.temperature)
                else:
                    loss = cpc_loss(*cpc_features(model, rgb, depth), cfg.cpc.temperature)

            _check_finite(loss, stage, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            if epoch == 0 and step < TRACE_STEPS:
                trace.append(loss.item())

        extra: dict = {}
        if epoch == 0:
            extra["first_step_losses"] = trace
        if eval_set is not None and (epoch + 1) % max(1, epochs // 4) == 0:
            extra.update(_stage_eval(stage, model, cfg, eval_set, num_classes))
        log.log({"epoch": epoch, "stage": stage, "loss": float(np.mean(losses)),
                 "lr": lr, "wall_seconds": time.perf_counter() - start, "extra": extra})

        if stage_cfg.checkpoint_every and (epoch + 1) % stage_cfg.checkpoint_every == 0 \
                and epoch + 1 < epochs:
            _save(model, cfg, stage, epoch, out_dir, f"{stage}-epoch{epoch + 1:04d}.ckpt")

    return _save(model, cfg, stage, epochs - 1, out_dir, f"{stage}-final.ckpt")


def _stage_eval(stage: str, model: CoMAEModel, cfg: Config, eval_set,
                num_classes: int | None) -> dict:
    model.eval()
    take = min(len(eval_set), 128)
    samples = [eval_set[i] for i in range(take)]
    rgb, depth, _ = collate(samples)
    with torch.no_grad():
        if stage in ("cpc", "joint"):
            return {"retrieval_acc": cpc_retrieval_accuracy(*cpc_features(model, rgb, depth))}
        if stage == "mmmae":
            n = (cfg.data.resolution // cfg.model.patch_size) ** 2
            rngs = [stream(cfg.seed, "eval-mask", i) for i in range(take)]
            plans = make_mask_batch(n, cfg.mask.ratio, cfg.mask.strategy, rngs)
            out = mmmae_forward(model, rgb, depth, plans, cfg.mmmae.norm_eps)
            return {"eval_recon_loss": float(mmmae_loss(out))}
    report = evaluate(model, eval_set, num_classes, "both", cfg.finetune.batch_size)
    return {"eval_acc_s": report.acc_s, "eval_acc_c": report.acc_c}


def train_cpc(cfg: Config, dataset, out_dir, init_state=None, eval_set=None) -> Path:
    return _run_stage("cpc", cfg, dataset, Path(out_dir), init_state, eval_set)


def train_mmmae(cfg: Config, dataset, out_dir, init_state=None, eval_set=None) -> Path:
    return _run_stage("mmmae", cfg, dataset, Path(out_dir), init_state, eval_set)


def train_joint(cfg: Config, dataset, out_dir, init_state=None, eval_set=None) -> Path:
    return _run_stage("joint", cfg, dataset, Path(out_dir), init_state, eval_set)


def train_finetune(cfg: Config, dataset, out_dir, num_classes: int,
                   init_state=None, eval_set=None) -> Path:
    return _run_stage("finetune", cfg, dataset, Path(out_dir), init_state,
                      eval_set, num_classes=num_classes)


def _predict(model: CoMAEModel, dataset, modality: str, batch_size: int) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            samples = [dataset[i] for i in range(lo, min(lo + batch_size, len(dataset)))]
            rgb, depth, _ = collate(samples)
            logits = classify(model,
                              rgb if modality in ("both", "rgb") else None,
                              depth if modality in ("both", "depth") else None)
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds)


def evaluate(model: CoMAEModel, dataset, num_classes: int, modality: str = "both",
             batch_size: int = 64, config_hash: str = "") -> EvalReport:
    """Deterministic eval (no train-mode stochasticity): accuracy report for
    the chosen modality mode."""
    if modality not in ("both", "rgb", "depth"):
        raise ValueError(f"modality must be both|rgb|depth, got {modality!r}")
    preds = _predict(model, dataset, modality, batch_size)
    labels = np.array([dataset[i].label for i in range(len(dataset))])
    return compute_report(preds, labels, num_classes, modality, config_hash)
