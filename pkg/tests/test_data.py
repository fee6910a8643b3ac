import numpy as np
import pytest
import torch

from comae.config import AugmentConfig, SyntheticConfig
from comae.data import (PairedSample, SyntheticPairs, apply_cutmix, apply_mixup,
                        augment_finetune, augment_pretrain, drop_modality,
                        encode_depth, generate_synthetic_pair, load_manifest,
                        materialize_synthetic, one_hot)
from comae.seeding import stream

CFG = SyntheticConfig(num_classes=10, canvas=64, seed=0, noise_std=0.02)


# ---------------------------------------------------------------- depth


def test_encode_depth_constant_input():
    out = encode_depth(np.full((8, 8), 2.0))
    assert out.shape == (8, 8, 3)
    assert len(np.unique(out)) == 1
    assert out.max() == 1.0


def test_encode_depth_disparity_inverts_depth():
    raw = np.full((8, 8), 4.0)
    raw[:4] = 1.0
    out = encode_depth(raw)
    assert out[0, 0, 0] > out[7, 0, 0]           # nearer plane -> larger value
    assert np.allclose(out[:4], 1.0)
    assert np.allclose(out[4:], 0.25)
    assert np.array_equal(out[..., 0], out[..., 1])
    assert np.array_equal(out[..., 0], out[..., 2])


def test_encode_depth_invalid_pixels_zero():
    raw = np.full((4, 4), 2.0)
    raw[0, 0] = 0.0
    out = encode_depth(raw)
    assert out[0, 0, 0] == 0.0
    assert out[1, 1, 0] == 1.0


def test_encode_depth_precomputed_passthrough():
    rng = stream("pre")
    img = rng.uniform(0, 1, (4, 4, 3))
    out = encode_depth(img, "precomputed")
    assert np.allclose(out, img.astype(np.float32))
    with pytest.raises(ValueError):
        encode_depth(img + 2.0, "precomputed")


def test_encode_depth_errors():
    with pytest.raises(ValueError, match="empty depth"):
        encode_depth(np.zeros((4, 4)))
    bad = np.full((4, 4), 1.0)
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        encode_depth(bad)
    with pytest.raises(ValueError):
        encode_depth(np.ones((4, 4)), "voxel")


def test_encode_depth_range_invariant():
    rng = stream("range")
    raw = rng.uniform(0.5, 10.0, (16, 16))
    raw[rng.random((16, 16)) < 0.2] = 0.0
    out = encode_depth(raw)
    assert out.min() >= 0.0 and out.max() <= 1.0 and out.shape[-1] == 3


# ---------------------------------------------------------------- synthesis


def test_generation_deterministic_bitwise():
    a = generate_synthetic_pair(CFG, 3, stream(CFG.seed, "s", 7))
    b = generate_synthetic_pair(CFG, 3, stream(CFG.seed, "s", 7))
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert a.label == 3


def test_generation_class_separability():
    a = generate_synthetic_pair(CFG, 0, stream(CFG.seed, "s", 0))
    b = generate_synthetic_pair(CFG, 1, stream(CFG.seed, "s", 0))
    assert np.abs(a.rgb - b.rgb).max() > 0.0


def test_generation_ranges_and_registration():
    sample = generate_synthetic_pair(CFG, 5, stream("g", 1))
    for arr in (sample.rgb, sample.depth):
        assert arr.shape == (64, 64, 3)
        assert arr.dtype == np.float32
        assert arr.min() >= 0.0 and arr.max() <= 1.0
    # depth channels identical up to the independent pixel noise
    assert np.abs(sample.depth[..., 0] - sample.depth[..., 1]).max() < 6 * CFG.noise_std


def test_generation_rejects_bad_class():
    with pytest.raises(ValueError):
        generate_synthetic_pair(CFG, 10, stream("g", 2))


def test_dataset_splits_disjoint_and_balanced():
    train = SyntheticPairs(CFG, 20, "train")
    test = SyntheticPairs(CFG, 20, "test")
    assert not np.array_equal(train[0].rgb, test[0].rgb)
    assert list(train.labels()[:10]) == list(range(10))
    assert train[7].label == 7
    assert len(train) == 20


def test_linear_pixel_probe_beats_chance():
    # least-squares probe on raw rgb pixels: the labels must be learnable
    dataset = SyntheticPairs(CFG, 512, "train")
    x = np.stack([dataset[i].rgb.reshape(-1) for i in range(512)])
    y = one_hot(torch.from_numpy(dataset.labels()), 10).numpy()
    x = np.concatenate([x, np.ones((512, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    acc = float((np.argmax(x @ coef, axis=1) == dataset.labels()).mean())
    assert acc > 0.5            # chance is 0.1


# ---------------------------------------------------------------- augment


def make_sample(rng, side=64):
    return PairedSample(rgb=rng.uniform(0, 1, (side, side, 3)).astype(np.float32),
                        depth=rng.uniform(0, 1, (side, side, 3)).astype(np.float32),
                        label=0, sample_id="t")


def test_augment_flip_column_mapping():
    sample = make_sample(stream("a0"))
    aug = AugmentConfig(crop_scale_min=1.0, crop_scale_max=1.0, flip_p=1.0)
    out = augment_pretrain(sample, stream("a0r"), 64, aug)
    assert np.array_equal(out.rgb, sample.rgb[:, ::-1])
    assert np.array_equal(out.depth, sample.depth[:, ::-1])


def test_augment_zero_jitter_is_identity():
    sample = make_sample(stream("a1"))
    aug = AugmentConfig(crop_scale_min=1.0, crop_scale_max=1.0, flip_p=0.0)
    out = augment_pretrain(sample, stream("a1r"), 64, aug)
    assert np.array_equal(out.rgb, sample.rgb)
    assert np.array_equal(out.depth, sample.depth)


def test_augment_deterministic():
    sample = make_sample(stream("a2"))
    aug = AugmentConfig()
    out1 = augment_pretrain(sample, stream("a2r"), 64, aug)
    out2 = augment_pretrain(sample, stream("a2r"), 64, aug)
    assert np.array_equal(out1.rgb, out2.rgb)


def test_augment_shared_geometry_via_coordinate_grid():
    # push an identical coordinate image through the rgb and depth paths:
    # the geometric transform must be pixel-identical
    side = 64
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack([yy, xx, np.zeros_like(yy)], axis=-1).astype(np.float32) / side
    sample = PairedSample(rgb=coords.copy(), depth=coords.copy(), label=0, sample_id="c")
    out = augment_pretrain(sample, stream("a3"), 32, AugmentConfig())
    assert np.array_equal(out.rgb, out.depth)
    assert out.rgb.shape == (32, 32, 3)


def test_augment_crop_larger_than_canvas():
    sample = make_sample(stream("a4"), side=32)
    with pytest.raises(ValueError):
        augment_pretrain(sample, stream("a4r"), 64, AugmentConfig())


def test_drop_modality_boundaries():
    sample = make_sample(stream("d0"))
    rng = stream("d0r")
    for _ in range(50):
        out = drop_modality(sample, 0.0, rng)
        assert out.rgb is not None and out.depth is not None


def test_drop_modality_frequencies():
    sample = make_sample(stream("d1"))
    rng = stream("d1r")
    draws = 10_000
    rgb_only = depth_only = both = 0
    for _ in range(draws):
        out = drop_modality(sample, 1.0, rng)
        assert out.rgb is not None or out.depth is not None
        if out.rgb is None:
            depth_only += 1
        elif out.depth is None:
            rgb_only += 1
        else:
            both += 1
    assert both == 0
    assert abs(rgb_only / draws - 0.5) < 0.02
    assert abs(depth_only / draws - 0.5) < 0.02


def test_drop_modality_half_probability():
    sample = make_sample(stream("d2"))
    rng = stream("d2r")
    draws = 10_000
    both = sum(1 for _ in range(draws)
               if (lambda s: s.rgb is not None and s.depth is not None)(
                   drop_modality(sample, 0.5, rng)))
    assert abs(both / draws - 0.5) < 0.02


def test_drop_modality_invalid_p():
    with pytest.raises(ValueError):
        drop_modality(make_sample(stream("d3")), 1.5, stream("d3r"))


def test_paired_sample_never_empty():
    with pytest.raises(ValueError):
        PairedSample(rgb=None, depth=None, label=0, sample_id="x")


def test_mixup_lambda_boundary():
    rng = stream("mx0")
    imgs = [torch.from_numpy(rng.uniform(0, 1, (2, 8, 8, 3))).float()]
    targets = one_hot(torch.tensor([0, 1]), 3)
    mixed, soft = apply_mixup(imgs, targets, lam=1.0, perm=torch.tensor([1, 0]))
    assert torch.equal(mixed[0], imgs[0])
    assert torch.equal(soft, targets)


def test_mixup_half_blend_of_constants():
    zeros = torch.zeros(1, 4, 4, 3)
    ones = torch.ones(1, 4, 4, 3)
    imgs = [torch.cat([zeros, ones])]
    targets = one_hot(torch.tensor([0, 1]), 2)
    mixed, soft = apply_mixup(imgs, targets, lam=0.5, perm=torch.tensor([1, 0]))
    assert torch.all(mixed[0] == 0.5)
    assert torch.allclose(soft, torch.full((2, 2), 0.5))


def test_cutmix_quarter_area_weights():
    rng = stream("cm0")
    imgs = [torch.from_numpy(rng.uniform(0, 1, (2, 8, 8, 3))).float()]
    targets = one_hot(torch.tensor([0, 1]), 2)
    box = (0, 4, 0, 4)                             # 16 of 64 pixels = 25%
    mixed, soft = apply_cutmix(imgs, targets, box, torch.tensor([1, 0]))
    assert torch.allclose(soft[0], torch.tensor([0.75, 0.25]))
    assert torch.equal(mixed[0][0, :4, :4], imgs[0][1, :4, :4])
    assert torch.equal(mixed[0][0, 4:], imgs[0][0, 4:])


def test_augment_finetune_contract():
    rng = stream("ft0")
    rgb = torch.from_numpy(rng.uniform(0, 1, (6, 16, 16, 3))).float()
    depth = torch.from_numpy(rng.uniform(0, 1, (6, 16, 16, 3))).float()
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    out_rgb, out_depth, soft = augment_finetune(rgb, depth, labels, 3, stream("ft0r"))
    assert out_rgb.shape == rgb.shape
    assert soft.shape == (6, 3)
    assert torch.allclose(soft.sum(dim=1), torch.ones(6), atol=1e-6)
    with pytest.raises(ValueError):
        augment_finetune(rgb, depth, None, 3, stream("ft0e"))


def test_augment_finetune_smoothing_when_mixing_disabled():
    rng = stream("ft1")
    rgb = torch.from_numpy(rng.uniform(0, 1, (4, 8, 8, 3))).float()
    labels = torch.tensor([0, 1, 2, 3])
    _, _, soft = augment_finetune(rgb, None, labels, 4, stream("ft1r"),
                                  mixup_alpha=0.0, cutmix_alpha=0.0,
                                  erase_prob=0.0, label_smoothing=0.1)
    expected = one_hot(labels, 4, smoothing=0.1)
    assert torch.allclose(soft, expected)


def test_augment_finetune_erasing_shares_box():
    rng = stream("ft2")
    rgb = torch.ones(2, 16, 16, 3)
    depth = torch.ones(2, 16, 16, 3)
    labels = torch.tensor([0, 1])
    out_rgb, out_depth, _ = augment_finetune(rgb, depth, labels, 2, stream("ft2r"),
                                             mixup_alpha=0.0, cutmix_alpha=0.0,
                                             erase_prob=1.0, label_smoothing=0.0)
    assert torch.equal(out_rgb == 0.0, out_depth == 0.0)
    assert bool((out_rgb == 0).any())


# ---------------------------------------------------------------- manifests


def test_manifest_roundtrip(tmp_path):
    cfg = SyntheticConfig(num_classes=4, canvas=32, seed=1)
    path = materialize_synthetic(cfg, tmp_path, 8, split="train")
    assert path.name == "manifest.json"
    ds = load_manifest(tmp_path)
    assert len(ds) == 8
    assert len(ds.class_names) == 4
    ref = SyntheticPairs(cfg, 8, "train")
    sample = ds[0]
    # PNG quantization is the only loss
    assert np.abs(sample.rgb - ref[0].rgb).max() <= 1 / 255 + 1e-6
    assert sample.label == ref[0].label
    assert sample.depth.shape == (32, 32, 3)


def test_manifest_raw_depth_roundtrip(tmp_path):
    cfg = SyntheticConfig(num_classes=2, canvas=32, seed=2, noise_std=0.0)
    materialize_synthetic(cfg, tmp_path, 2, split="train", raw_depth=True)
    ds = load_manifest(tmp_path)
    sample = ds[0]
    ref = SyntheticPairs(cfg, 2, "train")[0]
    # disparity-normalized reload matches the generated encoding to ~1%
    assert np.abs(sample.depth - ref.depth).max() < 0.02


def test_manifest_label_validation(tmp_path):
    (tmp_path / "manifest.json").write_text(
        '{"classes": ["a"], "entries": [{"rgb": "x.png", "depth": "y.png", "label": 3}]}')
    with pytest.raises(ValueError):
        load_manifest(tmp_path)
