"""Figure exports: reconstruction triplet grids and attention-quadrant
heatmaps, rendered to PNG files next to the JSON/JSONL outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import Config
from .encoder import CoMAEModel, cross_modal_diagonal_mass
from .masking import make_mask_batch
from .mmmae import mmmae_forward, mmmae_loss, render_reconstruction
from .seeding import stream
from .tokenizer import tokenize_pair
from .train import collate


def reconstruction_grid(model: CoMAEModel, dataset, cfg: Config,
                        out_path: str | Path, n_samples: int = 4) -> Path:
    """Rows = samples; per modality the columns show ground truth, masked
    input, and the prediction overlaid with visible patches."""
    n_samples = min(n_samples, len(dataset))
    samples = [dataset[i] for i in range(n_samples)]
    rgb, depth, _ = collate(samples)
    n = (cfg.data.resolution // cfg.model.patch_size) ** 2
    rngs = [stream(cfg.seed, "viz-mask", i) for i in range(n_samples)]
    plans = make_mask_batch(n, cfg.mask.ratio, cfg.mask.strategy, rngs)
    model.eval()
    with torch.no_grad():
        out = mmmae_forward(model, rgb, depth, plans, cfg.mmmae.norm_eps)

    titles = ["rgb truth", "rgb masked", "rgb recon",
              "depth truth", "depth masked", "depth recon"]
    fig, axes = plt.subplots(n_samples, 6, figsize=(12, 2 * n_samples), squeeze=False)
    for row in range(n_samples):
        triplets = render_reconstruction(out, rgb, depth, index=row)
        panels = list(triplets["rgb"]) + list(triplets["depth"])
        for col, panel in enumerate(panels):
            ax = axes[row][col]
            ax.imshow(np.clip(panel.numpy(), 0, 1))
            ax.set_axis_off()
            if row == 0:
                ax.set_title(titles[col], fontsize=9)
    fig.suptitle(f"masked-patch loss {mmmae_loss(out):.4f} "
                 f"(ratio {cfg.mask.ratio}, {cfg.mask.strategy})", fontsize=10)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def attention_quadrants(model: CoMAEModel, dataset, cfg: Config,
                        out_path: str | Path, add_pos: bool = True) -> Path:
    """Heatmap of the head with the strongest rgb_i -> depth_i diagonal, drawn
    over the full paired sequence; quadrant lines separate rgb->rgb,
    rgb->depth, depth->rgb, depth->depth blocks."""
    sample = dataset[0]
    rgb, depth, _ = collate([sample])
    seq = tokenize_pair(model.patch_proj, rgb, depth, model.cfg.patch_size, add_pos=add_pos)
    mass = cross_modal_diagonal_mass(model.encoder, seq)
    layer, head = np.unravel_index(int(mass.argmax()), tuple(mass.shape))

    model.eval()
    with torch.no_grad():
        _, maps = model.encoder.forward_with_attention(seq.tokens)
    attn = maps[layer][0, head].numpy()
    n = seq.count // 2

    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(attn, cmap="viridis")
    ax.axhline(n - 0.5, color="white", lw=0.8)
    ax.axvline(n - 0.5, color="white", lw=0.8)
    ax.set_title(f"layer {layer} head {head}: cross-modal diagonal "
                 f"{mass[layer, head]:.4f} (uniform {1 / (2 * n):.4f})", fontsize=9)
    ax.set_xlabel("key (rgb | depth)")
    ax.set_ylabel("query (rgb | depth)")
    fig.colorbar(im, fraction=0.046)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
