"""Finite-difference verification of every loss path.

Builds a tiny double-precision model (4 patches, dim 8, depth 1), computes
analytic parameter gradients by backprop, and compares them element by
element against central differences at h=1e-5. The reported number is the
worst scale-guarded relative error |a - n| / max(1, |a|, |n|) over all
parameter elements.
"""

from __future__ import annotations

import torch

from .config import ModelConfig
from .cpc import cpc_features, cpc_loss
from .data import one_hot
from .encoder import build_model
from .finetune import classify, soft_cross_entropy
from .masking import make_mask
from .mmmae import mmmae_forward, mmmae_loss
from .seeding import stream

LOSS_NAMES = ("cpc", "mmmae", "classify")

TINY_MODEL = ModelConfig(preset="vit-tiny-desk", dim=8, depth=1, heads=2,
                         mlp_ratio=2.0, patch_size=4, decoder_dim=8,
                         decoder_depth=1, decoder_heads=2)
TINY_CANVAS = 8     # 2x2 grid -> N=4
TINY_CLASSES = 3


def _tiny_loss_fn(loss_name: str, seed: int):
    rng = stream(seed, "gradcheck", loss_name)
    rgb = torch.from_numpy(rng.uniform(0.0, 1.0, (1, TINY_CANVAS, TINY_CANVAS, 3)))
    depth = torch.from_numpy(rng.uniform(0.0, 1.0, (1, TINY_CANVAS, TINY_CANVAS, 3)))

    if loss_name == "cpc":
        model = build_model(TINY_MODEL, "cpc", seed=seed).double()

        def fn():
            return cpc_loss(*cpc_features(model, rgb, depth), temperature=0.07)
    elif loss_name == "mmmae":
        model = build_model(TINY_MODEL, "mmmae", seed=seed).double()
        plans = make_mask(4, 0.5, "independent", stream(seed, "gradcheck-mask"))

        def fn():
            return mmmae_loss(mmmae_forward(model, rgb, depth, plans))
    elif loss_name == "classify":
        model = build_model(TINY_MODEL, "finetune", num_classes=TINY_CLASSES, seed=seed).double()
        target = one_hot(torch.tensor([int(rng.integers(TINY_CLASSES))]), TINY_CLASSES)

        def fn():
            return soft_cross_entropy(classify(model, rgb, depth), target.double())
    else:
        raise ValueError(f"unknown loss {loss_name!r}; choose from {LOSS_NAMES}")
    model.eval()
    return model, fn


def grad_check(loss_name: str, seed: int = 0, h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Worst relative error over all parameters, plus the per-parameter map."""
    model, loss_fn = _tiny_loss_fn(loss_name, seed)
    params = dict(model.named_parameters())
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=False)

    per_param: dict[str, float] = {}
    with torch.no_grad():
        for (name, param), grad in zip(params.items(), analytic):
            flat = param.reshape(-1)
            worst = 0.0
            for j in range(flat.numel()):
                original = flat[j].item()
                flat[j] = original + h
                up = loss_fn().item()
                flat[j] = original - h
                down = loss_fn().item()
                flat[j] = original
                numeric = (up - down) / (2 * h)
                a = grad.reshape(-1)[j].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
            per_param[name] = worst
    return max(per_param.values()), per_param
