"""Stage-2 objective: multi-modal masked autoencoding.

Both modalities run through the one shared encoder and the one shared
decoder; only the patch projections and the final prediction heads are
modality-specific, and the learnable mask token is shared. Reconstruction
targets are per-patch normalized pixels; the loss is the sum of the two
modalities' masked-patch MSEs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .encoder import CoMAEModel
from .masking import MaskPlan, scatter_full, split_visible
from .tokenizer import (DEPTH, RGB, PatchGrid, patchify, per_patch_stats,
                        tokenize_pair, unpatchify)


@dataclass
class ReconstructionOutput:
    """Predictions and targets of one masked forward pass.

    pred_* are (B, N, P*P*3); target_* are per-patch normalized originals;
    *_stats hold the (mean, var) used to normalize, kept so visualization can
    de-normalize without recomputation. plans are the exact MaskPlans used.
    """
    pred_rgb: Tensor
    pred_depth: Tensor
    target_rgb: Tensor
    target_depth: Tensor
    rgb_stats: tuple[Tensor, Tensor]
    depth_stats: tuple[Tensor, Tensor]
    plans: tuple[MaskPlan, MaskPlan]
    grid: PatchGrid
    norm_eps: float


def _normalized_target(image: Tensor, patch_size: int, eps: float):
    patches, grid = patchify(image, patch_size)
    mean, var = per_patch_stats(patches)
    return (patches - mean) / torch.sqrt(var + eps), (mean, var), grid


def mmmae_forward(model: CoMAEModel, rgb: Tensor, depth: Tensor,
                  plans: tuple[MaskPlan, MaskPlan], norm_eps: float = 1e-6,
                  ) -> ReconstructionOutput:
    """Full masked-reconstruction pipeline on a paired batch (B, H, W, 3) x2:
    tokenize with shared positional embeddings, drop masked tokens, encode,
    scatter the shared mask token back in, decode, and route decoder features
    to the modality heads by token tag."""
    if rgb is None or depth is None:
        raise ValueError("masked pre-training requires both modalities")
    seq = tokenize_pair(model.patch_proj, rgb, depth, model.cfg.patch_size, add_pos=True)
    grid = PatchGrid.for_image(rgb.shape[1], rgb.shape[2], model.cfg.patch_size)
    split = split_visible(seq, plans, grid)
    encoded = model.encode(split.visible)
    projected = model.decoder.embed(encoded.tokens)
    full = scatter_full(projected, model.mask_token, split)
    decoded = model.decode(full)
    feats_rgb = decoded.tokens[:, decoded.modality == RGB]
    feats_depth = decoded.tokens[:, decoded.modality == DEPTH]
    pred_rgb = model.head["rgb"](feats_rgb)
    pred_depth = model.head["depth"](feats_depth)

    target_rgb, rgb_stats, _ = _normalized_target(rgb, model.cfg.patch_size, norm_eps)
    target_depth, depth_stats, _ = _normalized_target(depth, model.cfg.patch_size, norm_eps)
    return ReconstructionOutput(pred_rgb, pred_depth, target_rgb, target_depth,
                                rgb_stats, depth_stats, plans, grid, norm_eps)


def _masked_mse(pred: Tensor, target: Tensor, plan: MaskPlan) -> Tensor:
    """Per-sample mean over (masked patches x pixels); 0 when nothing is
    masked. Visible patches contribute nothing, so their gradients are 0."""
    batch = pred.shape[0]
    masked = (~plan.visible).reshape(-1, plan.n_tokens).expand(batch, -1)
    n_masked = plan.n_tokens - plan.n_visible
    if n_masked == 0:
        return pred.new_zeros(batch)
    err = (pred - target) ** 2
    per_sample = (err * masked.unsqueeze(-1)).sum(dim=(1, 2))
    return per_sample / (n_masked * pred.shape[-1])


def mmmae_loss(out: ReconstructionOutput) -> Tensor:
    """Sum of the two modalities' masked-patch MSEs, averaged over the batch."""
    loss_rgb = _masked_mse(out.pred_rgb, out.target_rgb, out.plans[0])
    loss_depth = _masked_mse(out.pred_depth, out.target_depth, out.plans[1])
    return (loss_rgb + loss_depth).mean()


def _denormalize(pred: Tensor, stats: tuple[Tensor, Tensor], eps: float) -> Tensor:
    mean, var = stats
    return pred * torch.sqrt(var + eps) + mean


def render_reconstruction(out: ReconstructionOutput, rgb: Tensor, depth: Tensor,
                          index: int = 0) -> dict[str, tuple[Tensor, Tensor, Tensor]]:
    """Triplets (ground truth, masked input, overlay) per modality for sample
    `index`. The overlay keeps ground-truth pixels at visible patches and
    fills masked patches with de-normalized predictions; the masked-input
    image greys out masked patches."""
    grid, p = out.grid, out.grid.patch_size
    result = {}
    for name, image, pred, stats, plan in (
            ("rgb", rgb, out.pred_rgb, out.rgb_stats, out.plans[0]),
            ("depth", depth, out.pred_depth, out.depth_stats, out.plans[1])):
        gt_patches, _ = patchify(image[index], p)
        visible = plan.visible.reshape(-1, plan.n_tokens)
        visible = (visible[index] if visible.shape[0] > 1 else visible[0]).unsqueeze(-1)
        denorm = _denormalize(pred[index], (stats[0][index], stats[1][index]), out.norm_eps)
        overlay = torch.where(visible, gt_patches, denorm.clamp(0.0, 1.0))
        masked_in = torch.where(visible, gt_patches, torch.full_like(gt_patches, 0.5))
        result[name] = (unpatchify(gt_patches, grid), unpatchify(masked_in, grid),
                        unpatchify(overlay, grid))
    return result
