"""The single shared transformer backbone (used by every stage), the
lightweight decoder (masked reconstruction only), and attention-map probes.

Pre-norm blocks, GELU MLP, joint self-attention over all tokens regardless of
modality. No class token anywhere: classification pools with GAP, which keeps
the visible/masked scatter bookkeeping trivial.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .errors import NumericError
from .seeding import seed_torch
from .tokenizer import DEPTH, RGB, ModalityPatchProjection, TokenSequence


def drop_path(x: Tensor, rate: float, training: bool) -> Tensor:
    """Stochastic depth: drop the residual branch per sample."""
    if rate == 0.0 or not training:
        return x
    keep = 1.0 - rate
    mask = x.new_empty(x.shape[0], *([1] * (x.ndim - 1))).bernoulli_(keep)
    return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, need_attn: bool = False):
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)  # (B, heads, L, L), rows sum to 1
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), (attn if need_attn else None)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, drop_path_rate: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path_rate = drop_path_rate

    def forward(self, x: Tensor, need_attn: bool = False):
        out, attn = self.attn(self.norm1(x), need_attn)
        x = x + drop_path(out, self.drop_path_rate, self.training)
        x = x + drop_path(self.mlp(self.norm2(x)), self.drop_path_rate, self.training)
        return x, attn


class TransformerStack(nn.Module):
    """Blocks + final layer-normalization; depth 0 degenerates to the norm."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float,
                 drop_path_rate: float = 0.0, name: str = "encoder"):
        super().__init__()
        self.stack_name = name
        self.blocks = nn.ModuleList(
            Block(dim, heads, mlp_ratio, drop_path_rate) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        for i, block in enumerate(self.blocks):
            x, _ = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after {self.stack_name} block {i}")
        return self.norm(x)

    def forward_with_attention(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        maps = []
        for block in self.blocks:
            x, attn = block(x, need_attn=True)
            maps.append(attn)
        return self.norm(x), maps


class DecoderStack(TransformerStack):
    """Decoder blocks plus the affine encoder-dim -> decoder-dim adapter,
    applied to encoded visible tokens before mask tokens are scattered in."""

    def __init__(self, enc_dim: int, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__(dim, depth, heads, mlp_ratio, name="decoder")
        self.embed = nn.Linear(enc_dim, dim)


class CoMAEModel(nn.Module):
    """Parameter container for all stages.

    Stable parameter-name families (the unit of stage-to-stage transfer):
      patch_proj.{rgb,depth}.*   modality-specific patch projections
      encoder.blocks.{k}.*, encoder.norm.*
      decoder.embed.*, decoder.blocks.{k}.*, decoder.norm.*   (mmmae/joint)
      mask_token                                              (mmmae/joint)
      head.{rgb,depth}.*         reconstruction heads         (mmmae/joint)
      classifier.*                                            (finetune)
    Positional tables are rebuilt from shapes, never stored.
    """

    def __init__(self, cfg: ModelConfig, num_classes: int | None = None,
                 with_decoder: bool = False, with_classifier: bool = False,
                 drop_path_rate: float = 0.0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_proj = ModalityPatchProjection(patch_dim, cfg.dim)
        self.encoder = TransformerStack(cfg.dim, cfg.depth, cfg.heads,
                                        cfg.mlp_ratio, drop_path_rate)
        if with_decoder:
            self.decoder = DecoderStack(cfg.dim, cfg.decoder_dim, cfg.decoder_depth,
                                        cfg.decoder_heads, cfg.mlp_ratio)
            self.mask_token = nn.Parameter(torch.zeros(cfg.decoder_dim))
            self.head = nn.ModuleDict({"rgb": nn.Linear(cfg.decoder_dim, patch_dim),
                                       "depth": nn.Linear(cfg.decoder_dim, patch_dim)})
        if with_classifier:
            if num_classes is None:
                raise ValueError("classifier requires num_classes")
            self.classifier = nn.Linear(cfg.dim, num_classes)
        if cfg.cpc_head:
            self.cpc_head = Mlp(cfg.dim, cfg.dim * 2)
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        # zero-init each block's final projections: blocks start as identity
        for stack in self.stacks():
            for block in stack.blocks:
                nn.init.zeros_(block.attn.proj.weight)
                nn.init.zeros_(block.mlp.fc2.weight)
        if hasattr(self, "mask_token"):
            nn.init.trunc_normal_(self.mask_token, std=0.02)
        if hasattr(self, "classifier"):
            nn.init.trunc_normal_(self.classifier.weight, std=0.01)
            nn.init.zeros_(self.classifier.bias)

    def stacks(self) -> list[TransformerStack]:
        out = [self.encoder]
        if hasattr(self, "decoder"):
            out.append(self.decoder)
        return out

    def encode(self, seq: TokenSequence) -> TokenSequence:
        """Joint self-attention over all tokens; metadata passes through."""
        return TokenSequence(self.encoder(seq.tokens), seq.modality,
                             seq.position, seq.pos_applied)

    def decode(self, seq: TokenSequence) -> TokenSequence:
        return TokenSequence(self.decoder(seq.tokens), seq.modality,
                             seq.position, seq.pos_applied)


def build_model(cfg: ModelConfig, stage: str, num_classes: int | None = None,
                seed: int | None = None, drop_path_rate: float = 0.0) -> CoMAEModel:
    """Construct the parameter set a stage trains; init is seeded so that a
    stage's fresh weights depend only on (seed, stage kind, config)."""
    if stage not in ("cpc", "mmmae", "finetune", "joint"):
        raise ValueError(f"unknown stage {stage!r}")
    if seed is not None:
        seed_torch(seed, "init", stage)
    return CoMAEModel(cfg,
                      num_classes=num_classes,
                      with_decoder=stage in ("mmmae", "joint"),
                      with_classifier=stage == "finetune",
                      drop_path_rate=drop_path_rate)


def attention_maps(stack: TransformerStack, tokens: Tensor, layer: int, head: int) -> Tensor:
    """(B, L, L) row-stochastic attention for one layer/head. With a paired
    sequence [rgb, depth] the four L/2-sized quadrants are rgb->rgb,
    rgb->depth, depth->rgb, depth->depth."""
    if not 0 <= layer < len(stack.blocks):
        raise IndexError(f"layer {layer} out of range for depth {len(stack.blocks)}")
    n_heads = stack.blocks[layer].attn.heads
    if not 0 <= head < n_heads:
        raise IndexError(f"head {head} out of range for {n_heads} heads")
    was_training = stack.training
    stack.eval()
    with torch.no_grad():
        _, maps = stack.forward_with_attention(tokens)
    stack.train(was_training)
    return maps[layer][:, head]


def cross_modal_diagonal_mass(stack: TransformerStack, seq: TokenSequence) -> Tensor:
    """(layers, heads) mean attention mass on the rgb_i -> depth_i diagonal,
    averaged over batch and patch index. Uniform attention scores 1/(2N)."""
    n = seq.count // 2
    if not torch.equal(seq.modality[:n], torch.full((n,), RGB, dtype=torch.int64)) or \
       not torch.equal(seq.modality[n:], torch.full((n,), DEPTH, dtype=torch.int64)):
        raise ValueError("expected canonical [rgb, depth] token order")
    was_training = stack.training
    stack.eval()
    with torch.no_grad():
        _, maps = stack.forward_with_attention(seq.tokens)
    stack.train(was_training)
    rows = torch.arange(n)
    per_layer = [attn[:, :, rows, n + rows].mean(dim=(0, 2)) for attn in maps]
    return torch.stack(per_layer)
