"""Per-modality visibility masks at a fixed ratio, and the split/scatter
machinery around the encoder-decoder bottleneck.

Two strategies: 'independent' samples the rgb and depth masks separately;
'consistent' reuses one draw so both modalities hide the same spatial
locations. Masked count is exactly floor(ratio * N) per modality, sampled by
shuffling an index permutation and taking its prefix, so a per-sample
counter-based stream reproduces plans independently of batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .tokenizer import DEPTH, RGB, PatchGrid, TokenSequence, grid_positions, pos_table_for


@dataclass
class MaskPlan:
    """Visibility assignment for one modality: visible is (N,) or (B, N) bool;
    exactly N - floor(ratio*N) entries are True per row (uniform count across
    the batch is what keeps masked batches rectangular)."""
    visible: Tensor
    ratio: float
    strategy: str

    @property
    def n_tokens(self) -> int:
        return self.visible.shape[-1]

    @property
    def n_visible(self) -> int:
        counts = self.visible.reshape(-1, self.n_tokens).sum(dim=1)
        if not bool((counts == counts[0]).all()):
            raise ValueError("per-sample visible counts differ within one plan")
        return int(counts[0])


def _check_args(n: int, ratio: float, strategy: str):
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0,1), got {ratio}")
    if n < 1:
        raise ValueError("need at least one token")
    if strategy not in ("independent", "consistent"):
        raise ValueError(f"unknown mask strategy {strategy!r}")


def make_mask(n: int, ratio: float, strategy: str,
              rng: np.random.Generator) -> tuple[MaskPlan, MaskPlan]:
    """One (rgb, depth) plan pair; floor(ratio*n) masked per modality."""
    _check_args(n, ratio, strategy)
    n_masked = int(ratio * n)

    def draw() -> Tensor:
        visible = torch.ones(n, dtype=torch.bool)
        visible[torch.from_numpy(rng.permutation(n)[:n_masked].copy())] = False
        return visible

    vis_rgb = draw()
    vis_depth = vis_rgb.clone() if strategy == "consistent" else draw()
    return (MaskPlan(vis_rgb, ratio, strategy), MaskPlan(vis_depth, ratio, strategy))


def make_mask_batch(n: int, ratio: float, strategy: str,
                    rngs: list[np.random.Generator]) -> tuple[MaskPlan, MaskPlan]:
    """Stack per-sample plans (one rng per sample) into (B, N) plans."""
    pairs = [make_mask(n, ratio, strategy, rng) for rng in rngs]
    return (MaskPlan(torch.stack([p[0].visible for p in pairs]), ratio, strategy),
            MaskPlan(torch.stack([p[1].visible for p in pairs]), ratio, strategy))


@dataclass
class MaskSplit:
    """Bookkeeping from split_visible, consumed by scatter_full and the loss:
    vis_index / masked_index are per-sample slot indices into the canonical
    full-length order [rgb 0..N-1, depth 0..N-1], original order preserved."""
    visible: TokenSequence
    vis_index: Tensor       # (B, Lv)
    masked_index: Tensor    # (B, Lm)
    plans: tuple[MaskPlan, MaskPlan]
    grid: PatchGrid


def _ordered_index(mask: Tensor, count: int) -> Tensor:
    # stable argsort puts True slots first, original order preserved
    return torch.argsort((~mask).to(torch.int8), dim=1, stable=True)[:, :count]


def split_visible(seq: TokenSequence, plans: tuple[MaskPlan, MaskPlan],
                  grid: PatchGrid) -> MaskSplit:
    """Drop masked tokens from a full paired sequence (2N tokens, rgb block
    then depth block), keeping relative order."""
    plan_rgb, plan_depth = plans
    n = grid.n_patches
    if seq.count != 2 * n or plan_rgb.n_tokens != n or plan_depth.n_tokens != n:
        raise ValueError(
            f"plan/sequence length mismatch: seq {seq.count}, plans "
            f"{plan_rgb.n_tokens}/{plan_depth.n_tokens}, grid N={n}")
    batch = seq.tokens.shape[0]
    vis_rgb = plan_rgb.visible.reshape(-1, n).expand(batch, n)
    vis_depth = plan_depth.visible.reshape(-1, n).expand(batch, n)
    full_vis = torch.cat([vis_rgb, vis_depth], dim=1)

    n_vis = plan_rgb.n_visible + plan_depth.n_visible
    vis_index = _ordered_index(full_vis, n_vis)
    masked_index = _ordered_index(~full_vis, 2 * n - n_vis)

    dim = seq.tokens.shape[-1]
    tokens = torch.gather(seq.tokens, 1, vis_index.unsqueeze(-1).expand(-1, -1, dim))
    position = torch.gather(seq.position, 1, vis_index.unsqueeze(-1).expand(-1, -1, 2))
    # equal per-modality counts across the batch: rgb visibles precede depth
    modality = torch.cat([torch.full((plan_rgb.n_visible,), RGB, dtype=torch.int64),
                          torch.full((plan_depth.n_visible,), DEPTH, dtype=torch.int64)])
    visible = TokenSequence(tokens, modality, position, seq.pos_applied)
    return MaskSplit(visible, vis_index, masked_index, (plan_rgb, plan_depth), grid)


def scatter_full(encoded: Tensor, mask_token: Tensor, split: MaskSplit) -> TokenSequence:
    """Rebuild the full-length decoder input: encoded visible tokens return to
    their slots, every masked slot gets the one shared mask token, and the
    decoder positional embedding for the slot's grid position is added to all
    2N slots (both modalities consult the same table)."""
    batch, n_vis, dec_dim = encoded.shape
    if mask_token.shape[-1] != dec_dim:
        raise ValueError(
            f"mask token dim {mask_token.shape[-1]} != decoder dim {dec_dim}")
    n = split.grid.n_patches
    full = mask_token.reshape(1, 1, dec_dim).expand(batch, 2 * n, dec_dim)
    full = full.scatter(1, split.vis_index.unsqueeze(-1).expand(-1, -1, dec_dim), encoded)
    pos = pos_table_for(split.grid, dec_dim, encoded.dtype)
    full = full + torch.cat([pos, pos], dim=0)

    positions = grid_positions(split.grid)
    position = torch.cat([positions, positions], dim=0).unsqueeze(0).expand(batch, -1, -1)
    modality = torch.cat([torch.full((n,), RGB, dtype=torch.int64),
                          torch.full((n,), DEPTH, dtype=torch.int64)])
    return TokenSequence(full, modality, position, pos_applied=True)
