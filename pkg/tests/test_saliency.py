import numpy as np
import pytest
import torch

from cxr_triage.model import ClassifierSpec, build_model
from cxr_triage.saliency import MaskSpec, generate_masks, rise_saliency

REGION = (20, 30, 20)  # top, left, side


def region_scorer(batch):
    r, c, k = REGION
    return batch[:, 0, r:r + k, c:c + k].mean(dim=(1, 2)).unsqueeze(1)


def test_mask_range_and_determinism():
    spec = MaskSpec(num_masks=50, seed=3)
    a, b = generate_masks(spec, 40), generate_masks(spec, 40)
    assert a.shape == (50, 40, 40) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_masks(MaskSpec(num_masks=50, seed=4), 40))


def test_mask_mean_close_to_keep_probability():
    for p in (0.3, 0.5):
        masks = generate_masks(MaskSpec(num_masks=1000, keep_probability=p, seed=1), 48)
        mean = masks.mean(axis=0)
        assert np.all(np.abs(mean - p) < 0.05)


def test_p_one_is_identity():
    masks = generate_masks(MaskSpec(num_masks=20, keep_probability=1.0), 32)
    assert np.all(masks == 1.0)
    model = build_model(ClassifierSpec(num_classes=3, backbone="tiny")).eval()
    img = torch.randn(3, 32, 32)
    sal = rise_saliency(model, img, MaskSpec(num_masks=20, keep_probability=1.0))
    with torch.no_grad():
        base = model(img.unsqueeze(0))[0].numpy()
        masked = model(img.unsqueeze(0) * torch.from_numpy(masks[:4]).unsqueeze(1)).numpy()
    assert np.allclose(masked, base, atol=0)
    # every map equals the unmasked score times mean(mask) / p = score
    assert np.allclose(sal.maps, base[:, None, None], atol=1e-6)


def test_constant_scorer_gives_flat_map():
    s = 0.7
    sal = rise_saliency(lambda b: torch.full((len(b), 2), s), torch.ones(3, 40, 40), MaskSpec(num_masks=1000, seed=0))
    assert np.all(np.abs(sal.maps - s) < 0.05)


def test_nonnegative_and_linear():
    img = torch.rand(3, 32, 32)
    spec = MaskSpec(num_masks=64, seed=2, batch_size=16)
    model = build_model(ClassifierSpec(num_classes=4, backbone="tiny")).eval()
    base = rise_saliency(lambda b: model(b).double(), img, spec)
    assert base.maps.shape == (4, 32, 32) and np.all(base.maps >= 0)
    for alpha in (2.0, 0.25):
        scaled = rise_saliency(lambda b, a=alpha: a * model(b).double(), img, spec)
        assert np.array_equal(scaled.maps, alpha * base.maps)
    scaled = rise_saliency(lambda b: 0.37 * model(b).double(), img, spec)
    np.testing.assert_allclose(scaled.maps, 0.37 * base.maps, rtol=1e-12)


def test_masking_happens_in_raw_intensity_space():
    mean, std = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
    seen = []

    def scorer(b):
        seen.append(b.clone())
        return torch.full((len(b), 1), 0.5)

    raw = torch.full((3, 8, 8), 0.8)
    spec = MaskSpec(num_masks=4, grid_size=2, seed=0)
    rise_saliency(scorer, (raw - 0.5) / 0.25, spec, mean=mean, std=std)
    masks = torch.from_numpy(generate_masks(spec, 8))
    expected = ((raw.unsqueeze(0) * masks.unsqueeze(1)) - 0.5) / 0.25
    assert torch.allclose(seen[1], expected, atol=1e-6)


def test_planted_region_localization():
    r, c, k = REGION
    hits = 0
    for seed in range(20):
        sal = rise_saliency(region_scorer, torch.ones(3, 64, 64), MaskSpec(num_masks=1000, seed=seed, batch_size=250))
        i, j = np.unravel_index(np.argmax(sal.maps[0]), sal.maps[0].shape)
        hits += r <= i < r + k and c <= j < c + k
    assert hits >= 19


def test_scoring_failure_reports_index():
    calls = {"n": 0}

    def flaky(b):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return torch.zeros(len(b), 1)

    with pytest.raises(RuntimeError, match="index 10"):
        rise_saliency(flaky, torch.ones(3, 8, 8), MaskSpec(num_masks=30, batch_size=10))


def test_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(keep_probability=0)
    with pytest.raises(ValueError):
        MaskSpec(num_masks=0)
