"""Patch extraction, modality-specific projections, fixed 2D sin-cos
positional table, and per-patch normalized reconstruction targets.

Token layout convention used everywhere downstream: a paired sample tokenizes
to the concatenation [rgb patches row-major, depth patches row-major], with
per-token modality tags and (row, col) grid positions carried alongside the
token matrix. The positional table is a pure function of the grid and dim; the
same table serves both modalities (see docs/format.md).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import torch
from torch import Tensor, nn

RGB = 0
DEPTH = 1
MODALITY_NAMES = {"rgb": RGB, "depth": DEPTH}


@dataclass(frozen=True)
class PatchGrid:
    grid_h: int
    grid_w: int
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise ValueError(f"image {height}x{width} not divisible by patch size {patch_size}")
        return cls(height // patch_size, width // patch_size, patch_size)


@dataclass
class TokenSequence:
    """Ordered patch tokens with per-token metadata.

    tokens:   (B, L, D)
    modality: (L,) int64, RGB=0 / DEPTH=1, shared across the batch
    position: (B, L, 2) int64 (row, col) grid indices
    pos_applied: whether positional embeddings were added (must stay False on
        the contrastive path, True on the masked-reconstruction/classify path)
    """
    tokens: Tensor
    modality: Tensor
    position: Tensor
    pos_applied: bool = False

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    def permuted(self, perm: Tensor) -> "TokenSequence":
        """Jointly permute tokens and metadata (a no-op for all losses)."""
        return TokenSequence(self.tokens[:, perm], self.modality[perm],
                             self.position[:, perm], self.pos_applied)


def patchify(image: Tensor, patch_size: int) -> tuple[Tensor, PatchGrid]:
    """(..., H, W, C) -> (..., N, P*P*C); row i is the row-major flattening of
    patch i (pixels row-major, channels innermost)."""
    *lead, H, W, C = image.shape
    grid = PatchGrid.for_image(H, W, patch_size)
    p = patch_size
    x = image.reshape(*lead, grid.grid_h, p, grid.grid_w, p, C)
    x = x.movedim(-3, -4)  # (..., gh, gw, p, p, C)
    return x.reshape(*lead, grid.n_patches, p * p * C), grid


def unpatchify(patches: Tensor, grid: PatchGrid, channels: int = 3) -> Tensor:
    """Exact inverse of patchify: (..., N, P*P*C) -> (..., H, W, C)."""
    *lead, n, d = patches.shape
    p = grid.patch_size
    if n != grid.n_patches or d != p * p * channels:
        raise ValueError(f"patch matrix {patches.shape} does not match grid {grid}")
    x = patches.reshape(*lead, grid.grid_h, grid.grid_w, p, p, channels)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, grid.grid_h * p, grid.grid_w * p, channels)


def grid_positions(grid: PatchGrid) -> Tensor:
    """(N, 2) int64 (row, col) for patches in row-major order."""
    rows = torch.arange(grid.grid_h).repeat_interleave(grid.grid_w)
    cols = torch.arange(grid.grid_w).repeat(grid.grid_h)
    return torch.stack([rows, cols], dim=1)


def _sincos_1d(positions: Tensor, dim: int) -> Tensor:
    """Interleaved sin/cos encoding of one coordinate at geometrically spaced
    frequencies (base 10000): out[:, 2j] = sin(pos * w_j), out[:, 2j+1] = cos."""
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / half))
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    out = torch.empty(positions.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


@lru_cache(maxsize=16)
def sincos_pos_table(grid_h: int, grid_w: int, dim: int) -> Tensor:
    """Fixed (N, dim) 2D sin-cos table: first half encodes the row coordinate,
    second half the column. Non-learnable; identical for both modalities."""
    if dim % 4 != 0:
        raise ValueError(f"positional dim {dim} must be divisible by 4")
    grid = PatchGrid(grid_h, grid_w, 1)
    pos = grid_positions(grid)
    table = torch.cat([_sincos_1d(pos[:, 0], dim // 2),
                       _sincos_1d(pos[:, 1], dim // 2)], dim=1)
    return table.to(torch.float32)


def pos_table_for(grid: PatchGrid, dim: int, dtype=torch.float32) -> Tensor:
    return sincos_pos_table(grid.grid_h, grid.grid_w, dim).to(dtype)


def per_patch_normalize(patches: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize each patch row: (x - mean) / sqrt(var + eps), population
    variance. eps guards flat patches (common in encoded depth)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / torch.sqrt(var + eps)


def per_patch_stats(patches: Tensor) -> tuple[Tensor, Tensor]:
    """(mean, population var) per patch row, kept for de-normalizing
    reconstructions at visualization time."""
    return (patches.mean(dim=-1, keepdim=True),
            patches.var(dim=-1, keepdim=True, unbiased=False))


class ModalityPatchProjection(nn.Module):
    """Per-modality affine maps from flattened patches to tokens.

    The rgb and depth projections never share parameters; everything after
    them in the encoder does.
    """

    def __init__(self, patch_dim: int, dim: int):
        super().__init__()
        self.rgb = nn.Linear(patch_dim, dim)
        self.depth = nn.Linear(patch_dim, dim)

    def forward(self, patches: Tensor, modality: str) -> Tensor:
        if modality not in MODALITY_NAMES:
            raise ValueError(f"unknown modality {modality!r}")
        return self.rgb(patches) if modality == "rgb" else self.depth(patches)


def tokenize_pair(proj: ModalityPatchProjection, rgb: Tensor | None,
                  depth: Tensor | None, patch_size: int,
                  add_pos: bool = False) -> TokenSequence:
    """Patchify + project the present modalities of a batch and concatenate
    into one TokenSequence ([rgb tokens, depth tokens] when both present).

    rgb/depth: (B, H, W, 3) or None for an absent modality (no padding, no
    zero tokens — the sequence simply gets shorter).
    """
    if rgb is None and depth is None:
        raise ValueError("at least one modality must be present")
    parts, tags, positions = [], [], []
    batch = (rgb if rgb is not None else depth).shape[0]
    for name, image in (("rgb", rgb), ("depth", depth)):
        if image is None:
            continue
        patches, grid = patchify(image, patch_size)
        tokens = proj(patches, name)
        pos = grid_positions(grid)
        if add_pos:
            tokens = tokens + pos_table_for(grid, tokens.shape[-1], tokens.dtype)
        parts.append(tokens)
        tags.append(torch.full((grid.n_patches,), MODALITY_NAMES[name], dtype=torch.int64))
        positions.append(pos)
    tokens = torch.cat(parts, dim=1)
    position = torch.cat(positions, dim=0).unsqueeze(0).expand(batch, -1, -1)
    return TokenSequence(tokens, torch.cat(tags), position, pos_applied=add_pos)
