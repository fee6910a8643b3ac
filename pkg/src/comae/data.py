"""Dataset ingestion, simplified depth encoding, deterministic synthetic
paired-RGB-D generation, and the augmentations of both training phases.

Synthetic scenes: each class is a fixed layout of 2-5 colored rectangles and
ellipses (which cells they occupy, their sizes, colors, and front-to-back
order), sampled once per class from a class-keyed stream. Per-sample jitter
perturbs positions/sizes/brightness so the class signature is a layout, not a
pixel template — scene-level labels, as in scene recognition. Every shape gets
a constant disparity by its layer index and the background carries a gentle
shared ramp in both modalities, so RGB structure and depth structure are
mutually predictive patch-by-patch.

All generation and augmentation is a pure function of (config, split, index)
through counter-based streams: the delivered batches cannot depend on worker
count, and repeated calls are bitwise equal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .config import AugmentConfig, SyntheticConfig
from .seeding import stream


@dataclass
class PairedSample:
    """One registered RGB + encoded-depth pair; either modality may be absent
    (never both) after modality dropout."""
    rgb: np.ndarray | None          # (H, W, 3) float32 in [0,1]
    depth: np.ndarray | None        # (H, W, 3) float32 in [0,1]
    label: int | None
    sample_id: str

    def __post_init__(self):
        if self.rgb is None and self.depth is None:
            raise ValueError("a sample must keep at least one modality")


# ---------------------------------------------------------------------------
# depth encoding
# ---------------------------------------------------------------------------

def encode_depth(raw: np.ndarray, mode: str = "disparity-replicate") -> np.ndarray:
    """Map raw depth to a 3-channel encoding in [0,1].

    disparity-replicate: disparity 1/raw scaled so the nearest valid pixel is
    1.0, replicated to 3 identical channels; invalid pixels (raw == 0) map to
    0. A stand-in for geometric encodings computed offline — those enter via
    mode='precomputed', which range-checks an existing 3-channel image.
    """
    raw = np.asarray(raw)
    if not np.isfinite(raw).all():
        raise ValueError("depth map contains non-finite values")
    if mode == "precomputed":
        if raw.ndim != 3 or raw.shape[-1] != 3:
            raise ValueError("precomputed depth encoding must be HxWx3")
        if raw.min() < 0.0 or raw.max() > 1.0:
            raise ValueError("precomputed depth encoding must lie in [0,1]")
        return raw.astype(np.float32)
    if mode != "disparity-replicate":
        raise ValueError(f"unknown depth encoding mode {mode!r}")
    if raw.ndim != 2:
        raise ValueError("raw depth must be HxW")
    valid = raw > 0
    if not valid.any():
        raise ValueError("empty depth: no valid pixels")
    if raw[valid].min() <= 0:
        raise ValueError("valid depth values must be positive")
    disparity = np.zeros_like(raw, dtype=np.float64)
    disparity[valid] = 1.0 / raw[valid]
    disparity /= disparity.max()
    encoded = np.clip(disparity, 0.0, 1.0).astype(np.float32)
    return np.repeat(encoded[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

# anchor landmarks for shape placement (fractions of the canvas side)
_ANCHORS = (0.22, 0.5, 0.78)


def _class_layout(cfg: SyntheticConfig, class_id: int) -> list[dict]:
    """The fixed scene layout of one class, back-to-front."""
    rng = stream(cfg.seed, "class-layout", class_id)
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    cells = [(r, c) for r in range(3) for c in range(3)]
    chosen = rng.choice(len(cells), size=n_shapes, replace=False)
    shapes = []
    for layer, cell in enumerate(chosen):
        r, c = cells[int(cell)]
        shapes.append({
            "kind": "rect" if rng.random() < 0.5 else "ellipse",
            "cy": _ANCHORS[r],
            "cx": _ANCHORS[c],
            "half": float(rng.uniform(0.10, 0.18)),   # half-extent, canvas fraction
            "aspect": float(rng.uniform(0.7, 1.4)),
            "color": rng.uniform(0.15, 0.95, size=3),
            "layer": layer,
        })
    return shapes


def generate_synthetic_pair(cfg: SyntheticConfig, class_id: int,
                            rng: np.random.Generator,
                            sample_id: str = "") -> PairedSample:
    """Render one paired sample of a class with rng-driven jitter and noise."""
    if not 0 <= class_id < cfg.num_classes:
        raise ValueError(f"class_id {class_id} out of range")
    side = cfg.canvas
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, side), np.linspace(0.0, 1.0, side),
                         indexing="ij")

    # background: gentle shared ramps keep every patch location identifiable
    # in both modalities (important once positions are withheld)
    offset = rng.uniform(-0.03, 0.03)
    rgb = np.empty((side, side, 3), dtype=np.float64)
    rgb[:, :, 0] = 0.25 + 0.20 * xx + offset
    rgb[:, :, 1] = 0.25 + 0.20 * yy + offset
    rgb[:, :, 2] = 0.35 - 0.10 * (xx + yy) / 2 + offset
    disparity = 0.10 + 0.08 * xx + 0.08 * yy + offset

    shapes = _class_layout(cfg, class_id)
    for shape in shapes:
        cy = shape["cy"] + rng.uniform(-0.04, 0.04)
        cx = shape["cx"] + rng.uniform(-0.04, 0.04)
        half = shape["half"] * rng.uniform(0.9, 1.1)
        hy, hx = half, half * shape["aspect"]
        if shape["kind"] == "rect":
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            mask = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0
        color = np.clip(shape["color"] * rng.uniform(0.9, 1.1), 0.0, 1.0)
        rgb[mask] = color
        # constant disparity per shape, nearer for later (front) layers; the
        # front layer sits at exactly 1.0 so the encoding scale is anchored
        disparity[mask] = 0.40 + 0.60 * (shape["layer"] + 1) / len(shapes)

    depth = np.repeat(disparity[:, :, None], 3, axis=2)
    if cfg.noise_std > 0:
        rgb = rgb + rng.normal(0.0, cfg.noise_std, rgb.shape)
        depth = depth + rng.normal(0.0, cfg.noise_std, depth.shape)
    return PairedSample(rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
                        depth=np.clip(depth, 0.0, 1.0).astype(np.float32),
                        label=class_id, sample_id=sample_id)


class SyntheticPairs:
    """Lazy, cached list of synthetic samples; index i has class i % C.

    Distinct splits draw from disjoint keyed streams, so train/test never
    overlap regardless of counts.
    """

    def __init__(self, cfg: SyntheticConfig, count: int, split: str = "train"):
        self.cfg = cfg
        self.count = count
        self.split = split
        self._cache: dict[int, PairedSample] = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> PairedSample:
        if index not in self._cache:
            class_id = index % self.cfg.num_classes
            rng = stream(self.cfg.seed, "sample", self.split, index)
            self._cache[index] = generate_synthetic_pair(
                self.cfg, class_id, rng,
                sample_id=f"synthetic-{self.split}-{index:05d}")
        return self._cache[index]

    @property
    def class_names(self) -> list[str]:
        return [f"layout-{i}" for i in range(self.cfg.num_classes)]

    def labels(self) -> np.ndarray:
        return np.array([i % self.cfg.num_classes for i in range(self.count)])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    t = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def augment_pretrain(sample: PairedSample, rng: np.random.Generator,
                     out_size: int, aug: AugmentConfig) -> PairedSample:
    """One random resized crop + one horizontal-flip decision, the same
    geometric transform applied to both modalities."""
    height, width = sample.rgb.shape[:2]
    if out_size > min(height, width):
        raise ValueError(f"crop size {out_size} exceeds input {height}x{width}")
    scale = rng.uniform(aug.crop_scale_min, aug.crop_scale_max)
    side = max(1, round(np.sqrt(scale) * min(height, width)))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    flip = bool(rng.random() < aug.flip_p)

    def transform(image: np.ndarray) -> np.ndarray:
        out = _resize(image[top:top + side, left:left + side], out_size)
        return out[:, ::-1].copy() if flip else out

    return PairedSample(rgb=transform(sample.rgb), depth=transform(sample.depth),
                        label=sample.label, sample_id=sample.sample_id)


def drop_modality(sample: PairedSample, p: float, rng: np.random.Generator) -> PairedSample:
    """With probability p remove exactly one modality, chosen uniformly;
    never removes both."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop probability must be in [0,1]")
    if rng.random() >= p:
        return sample
    if rng.random() < 0.5:
        return PairedSample(rgb=None, depth=sample.depth,
                            label=sample.label, sample_id=sample.sample_id)
    return PairedSample(rgb=sample.rgb, depth=None,
                        label=sample.label, sample_id=sample.sample_id)


def one_hot(labels: Tensor, num_classes: int, smoothing: float = 0.0) -> Tensor:
    target = torch.full((labels.shape[0], num_classes), smoothing / num_classes)
    target[torch.arange(labels.shape[0]), labels] += 1.0 - smoothing
    return target


def _rand_box(height: int, width: int, area_fraction: float,
              rng: np.random.Generator, aspect: tuple[float, float] = (1.0, 1.0)):
    """Rectangle of ~area_fraction of the image, clipped to bounds."""
    ar = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
    bh = round(height * np.sqrt(area_fraction * ar))
    bw = round(width * np.sqrt(area_fraction / ar))
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    y1, y2 = max(0, cy - bh // 2), min(height, cy + (bh + 1) // 2)
    x1, x2 = max(0, cx - bw // 2), min(width, cx + (bw + 1) // 2)
    return y1, y2, x1, x2


def apply_mixup(images: list[Tensor], targets: Tensor, lam: float,
                perm: Tensor) -> tuple[list[Tensor], Tensor]:
    """Convex blend of each sample with its permuted partner; every modality
    gets the same lambda and pairing."""
    return ([lam * m + (1.0 - lam) * m[perm] for m in images],
            lam * targets + (1.0 - lam) * targets[perm])


def apply_cutmix(images: list[Tensor], targets: Tensor, box: tuple[int, int, int, int],
                 perm: Tensor) -> tuple[list[Tensor], Tensor]:
    """Swap one rectangle from the permuted partner into each sample; the
    label weight of the partner is the swapped area fraction."""
    y1, y2, x1, x2 = box
    height, width = images[0].shape[1:3]
    out = []
    for m in images:
        m = m.clone()
        m[:, y1:y2, x1:x2] = m[perm][:, y1:y2, x1:x2]
        out.append(m)
    lam = 1.0 - (y2 - y1) * (x2 - x1) / (height * width)
    return out, lam * targets + (1.0 - lam) * targets[perm]


def augment_finetune(rgb: Tensor | None, depth: Tensor | None, labels: Tensor,
                     num_classes: int, rng: np.random.Generator,
                     mixup_alpha: float = 0.8, cutmix_alpha: float = 1.0,
                     erase_prob: float = 0.25, label_smoothing: float = 0.1,
                     ) -> tuple[Tensor | None, Tensor | None, Tensor]:
    """Batch-level mixup OR cutmix (identical lambda/box on both modalities)
    plus per-sample random erasing; returns soft targets.

    When both mixing alphas are 0 the targets are label-smoothed one-hots.
    Mixing needs a batch of >= 2; smaller batches pass through unmixed.
    """
    if labels is None:
        raise ValueError("fine-tuning augmentation requires labels")
    images = [m for m in (rgb, depth) if m is not None]
    if not images:
        raise ValueError("at least one modality required")
    batch, height, width = images[0].shape[:3]

    mixing = (mixup_alpha > 0 or cutmix_alpha > 0) and batch >= 2
    if mixing:
        targets = one_hot(labels, num_classes)
        use_mixup = cutmix_alpha <= 0 or (mixup_alpha > 0 and rng.random() < 0.5)
        perm = torch.from_numpy(rng.permutation(batch))
        if use_mixup:
            lam = float(rng.beta(mixup_alpha, mixup_alpha))
            images, targets = apply_mixup(images, targets, lam, perm)
        else:
            lam = float(rng.beta(cutmix_alpha, cutmix_alpha))
            box = _rand_box(height, width, 1.0 - lam, rng)
            images, targets = apply_cutmix(images, targets, box, perm)
    else:
        targets = one_hot(labels, num_classes, smoothing=label_smoothing)
        images = [m.clone() for m in images]

    if erase_prob > 0:
        for i in range(batch):
            if rng.random() < erase_prob:
                frac = rng.uniform(0.02, 0.2)
                y1, y2, x1, x2 = _rand_box(height, width, frac, rng, aspect=(0.5, 2.0))
                for m in images:   # same box in both modalities (registered pair)
                    m[i, y1:y2, x1:x2] = 0.0

    it = iter(images)
    return (next(it) if rgb is not None else None,
            next(it) if depth is not None else None, targets)


# ---------------------------------------------------------------------------
# manifests and image files
# ---------------------------------------------------------------------------

def save_png8(path: Path, image: np.ndarray):
    """(H, W, 3) float [0,1] -> 8-bit RGB PNG."""
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path)


def load_png8(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_png16(path: Path, depth_mm: np.ndarray):
    """(H, W) uint16 raw depth in millimeters -> 16-bit grayscale PNG."""
    Image.fromarray(depth_mm.astype(np.uint16)).save(path)


def load_png16(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


class ManifestDataset:
    """Samples resolved from a manifest.json directory.

    Depth files may be 3-channel 8-bit encodings (passed through) or 16-bit
    raw millimeters (encoded via normalized disparity on load).
    """

    def __init__(self, root: Path, class_names: list[str], entries: list[dict]):
        self.root = root
        self.class_names = class_names
        self.entries = entries
        self._cache: dict[int, PairedSample] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> PairedSample:
        if index not in self._cache:
            entry = self.entries[index]
            rgb = load_png8(self.root / entry["rgb"])
            depth_path = self.root / entry["depth"]
            with Image.open(depth_path) as probe:
                raw16 = probe.mode in ("I;16", "I", "I;16B")
            if raw16:
                raw_m = load_png16(depth_path).astype(np.float64) / 1000.0
                depth = encode_depth(raw_m, "disparity-replicate")
            else:
                depth = encode_depth(load_png8(depth_path), "precomputed")
            self._cache[index] = PairedSample(rgb=rgb, depth=depth,
                                              label=int(entry["label"]),
                                              sample_id=str(entry["rgb"]))
        return self._cache[index]

    def labels(self) -> np.ndarray:
        return np.array([int(e["label"]) for e in self.entries])


def load_manifest(root: str | Path) -> ManifestDataset:
    root = Path(root)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    raw = json.loads(manifest_path.read_text())
    classes = list(raw["classes"])
    entries = list(raw["entries"])
    for entry in entries:
        if not 0 <= int(entry["label"]) < len(classes):
            raise ValueError(f"label {entry['label']} out of range for {len(classes)} classes")
    return ManifestDataset(manifest_path.parent, classes, entries)


def materialize_synthetic(cfg: SyntheticConfig, out_dir: str | Path, count: int,
                          split: str = "train", raw_depth: bool = False) -> Path:
    """Write a synthetic manifest + PNGs; returns the manifest path.

    raw_depth stores 16-bit millimeter depth derived from disparity (1m at
    disparity 1) instead of the 8-bit encoded image, exercising the
    disparity-replicate load path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = SyntheticPairs(cfg, count, split)
    entries = []
    for i in range(count):
        sample = dataset[i]
        rgb_name = f"{sample.sample_id}_rgb.png"
        depth_name = f"{sample.sample_id}_depth.png"
        save_png8(out_dir / rgb_name, sample.rgb)
        if raw_depth:
            # disparity d -> depth 1/d meters; floor keeps depth under 50m
            disparity = np.clip(sample.depth[:, :, 0].astype(np.float64), 0.02, 1.0)
            save_png16(out_dir / depth_name, np.round(1000.0 / disparity))
        else:
            save_png8(out_dir / depth_name, sample.depth)
        entries.append({"rgb": rgb_name, "depth": depth_name, "label": int(sample.label)})
    manifest = {"classes": dataset.class_names, "entries": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
