"""Checkpoint container and stage-to-stage weight transfer.

One file holds every named parameter as a shape-tagged little-endian float32
array plus a JSON metadata block {stage, epoch, config_hash, rng_state}.
Serialization is canonical (tensors sorted by name, compact sorted-key JSON),
so save -> load -> save is byte-identical. Format details: docs/checkpoint.md.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .encoder import CoMAEModel

MAGIC = b"COMAECKP"
VERSION = 1

# parameter-name families that survive a stage transition; everything else
# (decoder.*, mask_token, head.*, classifier.*, cpc_head.*) starts fresh
TRANSFER_PREFIXES = ("patch_proj.", "encoder.")


def save_checkpoint(path: str | Path, state: dict[str, Tensor], meta: dict) -> None:
    names = sorted(state)
    buffers = []
    entries = []
    offset = 0
    for name in names:
        tensor = state[name].detach().to(torch.float32)
        if not torch.isfinite(tensor).all():
            raise ValueError(f"parameter {name!r} contains non-finite values")
        raw = tensor.numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape),
                        "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version = int.from_bytes(blob[8:12], "little")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header_len = int.from_bytes(blob[12:20], "little")
    header = json.loads(blob[20:20 + header_len].decode("utf-8"))
    data = blob[20 + header_len:]
    state = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(array)
    return state, header["meta"]


def rng_state_hex() -> str:
    return torch.get_rng_state().numpy().tobytes().hex()


def transfer_weights(src_state: dict[str, Tensor], dst_model: CoMAEModel) -> list[str]:
    """Copy the transferable parameter families from a source checkpoint into
    a freshly initialized destination model. Validates every carried shape
    before touching the model (no partial loads); returns the carried names.
    """
    carried = {name: tensor for name, tensor in src_state.items()
               if name.startswith(TRANSFER_PREFIXES)}
    dst_state = dst_model.state_dict()
    problems = [name for name in carried
                if name not in dst_state or tuple(dst_state[name].shape) != tuple(carried[name].shape)]
    if problems:
        raise ValueError("transfer mismatch for parameters: " + ", ".join(sorted(problems)))
    missing = [name for name in dst_state
               if name.startswith(TRANSFER_PREFIXES) and name not in carried]
    if missing:
        raise ValueError("source checkpoint lacks parameters: " + ", ".join(sorted(missing)))
    with torch.no_grad():
        for name, tensor in carried.items():
            dst_state[name].copy_(tensor)
    return sorted(carried)
