"""Deterministic RNG derivation shared by every pipeline stage.

One root seed drives the whole pipeline. Stage seeds are derived by hashing
(root_seed, stage_name), so a stage's random stream never depends on which
stages ran before it. Per-sample randomness (augmentation, mask plans) comes
from counter-based Philox generators keyed by (seed, epoch, sample index),
so the delivered data stream is independent of batch composition and of the
number of prefetch workers.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mix of ints/strings.

    Python's builtin hash() is salted per process, so we hash the repr of the
    parts with SHA-256 instead.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(*parts) -> np.random.Generator:
    """Counter-based generator keyed by the given parts.

    Two calls with equal parts yield identical streams; distinct parts yield
    independent streams. Safe to create from any worker.
    """
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


def seed_torch(*parts) -> torch.Generator:
    """Seed torch's global CPU RNG from the given parts and return a
    same-seeded standalone generator for callers that want an explicit one."""
    seed = derive_seed(*parts)
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
