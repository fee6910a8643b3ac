"""Stage-1 objective: cross-modal patch-level contrastive alignment.

Each RGB patch is matched against the depth patch at the same grid location of
the SAME paired image; the other patches of that pair are the negatives (no
cross-batch negatives). Features come from the shared encoder with positional
embeddings removed, so location can only be inferred from content.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .encoder import CoMAEModel
from .tokenizer import DEPTH, RGB, TokenSequence, tokenize_pair


def _canonical_rows(seq: TokenSequence, tokens: Tensor, modality: int) -> Tensor:
    """Rows of one modality ordered row-major by grid position, so the loss
    depends on token metadata, never on token order."""
    member = (seq.modality == modality).nonzero(as_tuple=True)[0]
    pos = seq.position[0, member]
    order = torch.argsort(pos[:, 0] * (pos[:, 1].max() + 1) + pos[:, 1])
    return tokens[:, member[order]]


def contrastive_features_from_tokens(model: CoMAEModel, seq: TokenSequence) -> tuple[Tensor, Tensor]:
    """Encode a paired token sequence and split into unit-normalized per-patch
    features (f_rgb, f_depth), each (B, N, dim), row i = grid location i."""
    if seq.pos_applied:
        raise ValueError("positional embeddings leak location into the contrastive task")
    encoded = model.encode(seq)
    tokens = encoded.tokens
    if hasattr(model, "cpc_head"):
        tokens = model.cpc_head(tokens)
    f_rgb = _canonical_rows(seq, tokens, RGB)
    f_depth = _canonical_rows(seq, tokens, DEPTH)
    if f_rgb.shape[1] != f_depth.shape[1] or f_rgb.shape[1] == 0:
        raise ValueError("contrastive pre-training requires complete rgb/depth pairs")
    return F.normalize(f_rgb, dim=-1), F.normalize(f_depth, dim=-1)


def cpc_features(model: CoMAEModel, rgb: Tensor | None, depth: Tensor | None) -> tuple[Tensor, Tensor]:
    """(B, H, W, 3) pair -> unit-normalized patch features, positions withheld."""
    if rgb is None or depth is None:
        raise ValueError("contrastive pre-training requires both modalities")
    seq = tokenize_pair(model.patch_proj, rgb, depth, model.cfg.patch_size, add_pos=False)
    return contrastive_features_from_tokens(model, seq)


def similarity_matrix(f_rgb: Tensor, f_depth: Tensor) -> Tensor:
    """(..., N, N) cosine similarities S[i, k] = <f_rgb_i, f_depth_k>."""
    return f_rgb @ f_depth.transpose(-2, -1)


def cpc_loss(f_rgb: Tensor, f_depth: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over within-pair patches.

    Per sample: (1/2N) * sum_i [ -log softmax_k(S[i,k]/t)|_{k=i}
                                 -log softmax_k(S[k,i]/t)|_{k=i} ],
    then the mean over the batch.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits = similarity_matrix(f_rgb, f_depth) / temperature
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite similarity matrix")
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
    b, n, _ = logits.shape
    target = torch.arange(n).repeat(b)
    loss_rgb = F.cross_entropy(logits.reshape(b * n, n), target)
    loss_depth = F.cross_entropy(logits.transpose(-2, -1).reshape(b * n, n), target)
    return (loss_rgb + loss_depth) / 2


def cpc_retrieval_accuracy(f_rgb: Tensor, f_depth: Tensor) -> float:
    """Fraction of patches whose nearest cross-modal neighbour (within the
    pair) sits at the same grid location, averaged over both directions."""
    sim = similarity_matrix(f_rgb, f_depth)
    if sim.ndim == 2:
        sim = sim.unsqueeze(0)
    n = sim.shape[-1]
    idx = torch.arange(n)
    hits_rgb = (sim.argmax(dim=-1) == idx).float().mean()
    hits_depth = (sim.argmax(dim=-2) == idx).float().mean()
    return float((hits_rgb + hits_depth) / 2)
