"""Downstream scene classification on the pre-trained encoder.

Present modalities are tokenized and concatenated (2N tokens for a pair, N
for one modality); an absent modality contributes no tokens at all — no
padding, no zero tokens, the sequence just shrinks, which GAP pooling and
self-attention both tolerate. Training drops a modality per sample with
probability 0.5, mixes within same-presence groups, and optimizes soft-target
cross-entropy under layer-decayed AdamW.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import FinetuneStageConfig
from .data import augment_finetune
from .encoder import CoMAEModel
from .tokenizer import tokenize_pair


def effective_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: lr = base_lr * batch_size / 256."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def layer_index(param_name: str, depth: int) -> int:
    """Layer assignment for lr decay: patch projections 0, block k -> k+1,
    everything at the head (final norm, classifier) -> depth+1."""
    if param_name.startswith("patch_proj."):
        return 0
    if param_name.startswith("encoder.blocks."):
        return int(param_name.split(".")[2]) + 1
    if param_name.startswith(("encoder.norm.", "classifier.")):
        return depth + 1
    raise ValueError(f"parameter {param_name!r} has no layer assignment")


def layer_lr_scale(param_name: str, depth: int, decay: float) -> float:
    """Multiplier decay^(depth+1-layer): 1 at the head, smallest at the
    patch projections."""
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must be in (0,1]")
    return decay ** (depth + 1 - layer_index(param_name, depth))


def param_groups(model: CoMAEModel, weight_decay: float,
                 layer_decay: float = 1.0) -> list[dict]:
    """AdamW groups keyed by (lr scale, decay). 1-D parameters (biases, norms,
    mask token) are excluded from weight decay. layer_decay=1 skips the layer
    assignment entirely, which pre-training stages rely on (their parameter
    families have no layer index)."""
    groups: dict[tuple, dict] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        scale = 1.0 if layer_decay == 1.0 else layer_lr_scale(name, model.cfg.depth, layer_decay)
        decay = weight_decay if param.ndim > 1 else 0.0
        key = (scale, decay)
        entry = groups.setdefault(key, {"params": [], "lr_scale": scale, "weight_decay": decay})
        entry["params"].append(param)
    return list(groups.values())


def classify(model: CoMAEModel, rgb: Tensor | None, depth: Tensor | None) -> Tensor:
    """Logits (B, num_classes) from whatever modalities are present: encode
    with no masking, mean-pool over ALL tokens, linear classify."""
    if rgb is None and depth is None:
        raise ValueError("classification needs at least one modality")
    seq = tokenize_pair(model.patch_proj, rgb, depth, model.cfg.patch_size, add_pos=True)
    encoded = model.encode(seq)
    pooled = encoded.tokens.mean(dim=1)
    return model.classifier(pooled)


def soft_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean -sum_c target_c * log softmax(logits)_c; targets sum to 1 per row."""
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def finetune_batch_loss(model: CoMAEModel, rgb: Tensor, depth: Tensor,
                        labels: Tensor, cfg: FinetuneStageConfig,
                        num_classes: int, drop_rngs, group_rng) -> Tensor:
    """Training loss of one labeled paired batch.

    Per-sample modality drop (drop_rngs[i] drives sample i, keyed upstream by
    dataset index) splits the batch into up to three presence groups (both /
    rgb-only / depth-only); mixup-or-cutmix runs within each group with
    group_rng(gi), and group losses recombine with sample-count weights,
    preserving per-sample semantics.
    """
    batch = labels.shape[0]
    keep_rgb = torch.full((batch,), rgb is not None)
    keep_depth = torch.full((batch,), depth is not None)
    # modality drop needs a pair to choose from; unimodal batches pass through
    if cfg.modality_drop_p > 0 and rgb is not None and depth is not None:
        for i in range(batch):
            rng = drop_rngs[i]
            if rng.random() < cfg.modality_drop_p:
                if rng.random() < 0.5:
                    keep_rgb[i] = False
                else:
                    keep_depth[i] = False

    total = None
    for gi, (use_rgb, use_depth) in enumerate([(True, True), (True, False), (False, True)]):
        member = (keep_rgb == use_rgb) & (keep_depth == use_depth)
        if not member.any():
            continue
        idx = member.nonzero(as_tuple=True)[0]
        g_rgb = rgb[idx] if use_rgb else None
        g_depth = depth[idx] if use_depth else None
        g_rgb, g_depth, targets = augment_finetune(
            g_rgb, g_depth, labels[idx], num_classes, group_rng(gi),
            mixup_alpha=cfg.mixup_alpha, cutmix_alpha=cfg.cutmix_alpha,
            erase_prob=cfg.erase_prob, label_smoothing=cfg.label_smoothing)
        logits = classify(model, g_rgb, g_depth)
        loss = soft_cross_entropy(logits, targets) * (len(idx) / batch)
        total = loss if total is None else total + loss
    return total
