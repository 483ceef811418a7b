import hypothesis.strategies as st
import numpy as np
import pytest
import torch
import torchvision.transforms.functional as TF
from hypothesis import given

from imbssl.augment import (
    AugmentationPolicy,
    adjust_brightness,
    adjust_contrast,
    adjust_hue,
    adjust_saturation,
    batch_views,
    eval_view,
    grayscale,
    resized_crop,
    single_view,
    to_tensor,
    two_view,
)
from imbssl.dataset import synthetic_split

from .helpers import make_dataset
from .tolerances import TOLERANCES

IDENTITY = AugmentationPolicy.identity()


@pytest.fixture(scope="module")
def images():
    return synthetic_split(4, 4, seed=0).images


def test_identity_policy_returns_raw_pixels(images):
    v, v2 = two_view(images[0], IDENTITY, 0)
    expected = torch.from_numpy(images[0]).permute(2, 0, 1).float() / 255
    torch.testing.assert_close(v, expected, rtol=0, atol=0)
    torch.testing.assert_close(v2, expected, rtol=0, atol=0)


def test_identity_single_view_is_normalized_raw(images):
    policy = AugmentationPolicy.identity(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    v = single_view(images[1], policy, 3)
    torch.testing.assert_close(v, (to_tensor(images[1]) - 0.5) / 0.25)


def test_fixed_seed_is_bit_identical(images):
    policy = AugmentationPolicy()
    a = two_view(images[2], policy, np.random.default_rng(11))
    b = two_view(images[2], policy, np.random.default_rng(11))
    assert torch.equal(a.v, b.v) and torch.equal(a.v_prime, b.v_prime)


def test_views_differ_almost_always(images):
    policy = AugmentationPolicy()
    same = sum(torch.equal(*two_view(images[t % len(images)], policy, t)) for t in range(100))
    assert same <= 2


def test_batch_matches_per_record_calls(images):
    policy = AugmentationPolicy()
    v, v2 = batch_views(images[:3], policy, np.random.default_rng(5), 2)
    rng = np.random.default_rng(5)
    for i in range(3):
        a, b = two_view(images[i], policy, rng)
        torch.testing.assert_close(v[i], a)
        torch.testing.assert_close(v2[i], b)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1),
       st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_shape_and_finiteness(h, w, seed, scale_lo, flip_p, gray_p):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    policy = AugmentationPolicy(crop_scale_range=(scale_lo, 1.0), flip_probability=flip_p,
                                grayscale_probability=gray_p)
    v = single_view(img, policy, seed)
    assert v.shape == (3, h, w)
    assert torch.isfinite(v).all()


def test_eval_view_examples():
    zero = np.zeros((4, 4, 3), np.uint8)
    assert torch.equal(eval_view(zero, (0, 0, 0), (1, 1, 1)), torch.zeros(3, 4, 4))
    full = np.full((4, 4, 3), 255, np.uint8)
    assert torch.equal(eval_view(full, (0.5,) * 3, (0.5,) * 3), torch.ones(3, 4, 4))
    x = make_dataset(1).images[0]
    assert torch.equal(eval_view(x), eval_view(x))


@pytest.mark.parametrize("kwargs", [
    {"crop_scale_range": (0.5, 0.2)},
    {"crop_scale_range": (0.0, 1.0)},
    {"flip_probability": 1.5},
    {"grayscale_probability": -0.1},
    {"std": (1.0, 0.0, 1.0)},
    {"color_jitter": (0.4, 0.4, 0.4, 0.7)},
])
def test_invalid_policy(kwargs):
    with pytest.raises(ValueError):
        AugmentationPolicy(**kwargs)


def test_crop_flip_only_disables_color():
    p = AugmentationPolicy().crop_flip_only()
    assert p.color_jitter_probability == 0 and p.grayscale_probability == 0
    assert p.flip_probability == 0.5


# --- pixel ops vs torchvision ----------------------------------------------


@pytest.fixture(scope="module")
def batch():
    return to_tensor(make_dataset(6, seed=4, size=12).images)


@pytest.mark.parametrize("ours,theirs,lo,hi", [
    (adjust_brightness, TF.adjust_brightness, 0.6, 1.4),
    (adjust_contrast, TF.adjust_contrast, 0.6, 1.4),
    (adjust_saturation, TF.adjust_saturation, 0.6, 1.4),
    (adjust_hue, TF.adjust_hue, -0.1, 0.1),
])
def test_jitter_ops_match_torchvision(batch, ours, theirs, lo, hi):
    factors = torch.linspace(lo, hi, len(batch))
    got = ours(batch, factors).clamp(0, 1)
    ref = torch.stack([theirs(x, float(f)) for x, f in zip(batch, factors)])
    assert (got - ref).abs().max() < TOLERANCES["jitter_vs_torchvision"]


def test_grayscale_matches_torchvision(batch):
    ref = TF.rgb_to_grayscale(batch)
    assert (grayscale(batch) - ref).abs().max() < TOLERANCES["jitter_vs_torchvision"]


def test_resized_crop_matches_torchvision_in_interior(batch):
    boxes = np.array([[2, 3, 6, 8], [0, 0, 12, 6], [4, 1, 7, 7]])
    got = resized_crop(batch[:3], boxes)
    for i, (t, l, h, w) in enumerate(boxes):
        ref = TF.resized_crop(batch[i], t, l, h, w, [12, 12], antialias=False)
        # border pixels differ in edge handling; the interior must agree
        assert (got[i, :, 1:-1, 1:-1] - ref[:, 1:-1, 1:-1]).abs().max() < TOLERANCES["crop_interior_vs_torchvision"]


def test_full_box_crop_is_identity(batch):
    out = resized_crop(batch[:2], np.array([[0, 0, 12, 12]] * 2))
    torch.testing.assert_close(out, batch[:2], rtol=0, atol=1e-6)
