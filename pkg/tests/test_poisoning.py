"""Trigger algebra and dataset poisoning contracts."""

import math

import pytest
import torch

from backlab import (
    BadNetsPoisoner,
    BlendedPoisoner,
    LabelConsistentPoisoner,
    WaNetPoisoner,
    apply_blend,
    apply_patch,
    apply_warp,
    build_warp_field,
    checkerboard,
    make_synthetic,
    place_patch,
    poisoner_config,
)
from backlab.poisoning import smooth_blend_image


def reference_patch(x, pattern, mask):
    """Per-pixel loop oracle for the masked-replacement rule."""
    out = x.clone()
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    if mask[ch, i, j] == 1:
                        out[b, ch, i, j] = pattern[ch, i, j]
    return out


class TestApplyPatch:
    def test_empty_mask(self):
        x = torch.rand(2, 3, 8, 8)
        out = apply_patch(x, torch.rand(3, 8, 8), torch.zeros(3, 8, 8))
        assert torch.equal(out, x)

    def test_full_mask(self):
        x = torch.rand(2, 3, 8, 8)
        t = torch.rand(3, 8, 8)
        out = apply_patch(x, t, torch.ones(3, 8, 8))
        assert torch.allclose(out, t.expand_as(x))

    def test_corner_checkerboard_oracle(self):
        x = torch.full((1, 1, 4, 4), 0.5)
        patch = checkerboard(2, channels=1)
        pattern, mask = place_patch(patch, (4, 4), corner="bottom-right")
        out = apply_patch(x, pattern, mask)
        assert torch.equal(out, reference_patch(x, pattern, mask))
        # corner pixels carry the 0/1 pattern, everything else is 0.5
        assert out[0, 0, 2, 2] == 1.0 and out[0, 0, 2, 3] == 0.0
        assert out[0, 0, 3, 2] == 0.0 and out[0, 0, 3, 3] == 1.0
        assert torch.all(out[0, 0, :2, :] == 0.5)

    def test_random_tensors_match_reference(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            x = torch.rand((2, 2, 5, 5), generator=g)
            pattern = torch.rand((2, 5, 5), generator=g)
            mask = (torch.rand((2, 5, 5), generator=g) < 0.3).float()
            assert torch.equal(apply_patch(x, pattern, mask),
                               reference_patch(x, pattern, mask))

    def test_idempotent(self):
        x = torch.rand(3, 3, 8, 8)
        pattern, mask = place_patch(checkerboard(3), (8, 8))
        once = apply_patch(x, pattern, mask)
        assert torch.equal(apply_patch(once, pattern, mask), once)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_patch(torch.rand(1, 3, 8, 8), torch.rand(3, 4, 4), torch.rand(3, 4, 4))

    def test_mask_counts(self):
        pattern, mask = place_patch(checkerboard(3, channels=3), (32, 32))
        assert mask.sum() == 3 * 3 * 3
        assert set(mask.unique().tolist()) <= {0.0, 1.0}


class TestApplyBlend:
    def test_near_identity(self):
        x = torch.rand(2, 3, 6, 6)
        out = apply_blend(x, torch.rand(3, 6, 6), alpha=1e-9)
        assert (out - x).abs().max() < 1e-8

    def test_fixed_point(self):
        x = torch.rand(1, 3, 6, 6)
        out = apply_blend(x, x[0], alpha=0.7)
        assert torch.allclose(out, x, atol=1e-7)

    def test_direct_arithmetic(self):
        x = torch.full((1, 1, 3, 3), 0.4)
        t = torch.full((1, 3, 3), 0.9)
        out = apply_blend(x, t, alpha=0.2)
        assert torch.allclose(out, torch.full_like(x, 0.5), atol=1e-7)

    def test_twice_composes(self):
        x = torch.rand(2, 3, 5, 5)
        t = torch.rand(3, 5, 5)
        alpha = 0.3
        twice = apply_blend(apply_blend(x, t, alpha), t, alpha)
        once = apply_blend(x, t, 1 - (1 - alpha) ** 2)
        assert torch.allclose(twice, once, atol=1e-6)

    def test_alpha_guard(self):
        x = torch.rand(1, 1, 2, 2)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                apply_blend(x, x[0], alpha=bad)


class TestApplyWarp:
    def test_zero_field_identity(self):
        x = torch.rand(2, 3, 9, 9)
        assert torch.equal(apply_warp(x, torch.zeros(2, 9, 9)), x)

    def test_integer_shift_oracle(self):
        # +1 x-displacement samples one column to the right
        x = torch.zeros(1, 1, 6, 6)
        x[..., 3] = 1.0
        flow = torch.zeros(2, 6, 6)
        flow[0] = 1.0
        out = apply_warp(x, flow)
        expected = torch.zeros_like(x)
        expected[..., 2] = 1.0
        expected[..., 5] = x[..., 5]  # border clamp keeps the last column
        assert torch.allclose(out, expected, atol=1e-5)

    def test_lipschitz_bound(self):
        # finite-difference oracle: the warped change is bounded by the
        # displacement (in whole pixels) times the max local gradient
        g = torch.Generator().manual_seed(4)
        x = torch.rand((1, 1, 16, 16), generator=g)
        field = build_warp_field(4, 0.9, (16, 16), seed=2)
        out = apply_warp(x, field)
        grad_h = (x[..., 1:, :] - x[..., :-1, :]).abs().max()
        grad_w = (x[..., :, 1:] - x[..., :, :-1]).abs().max()
        local_grad = torch.maximum(grad_h, grad_w)
        steps = math.ceil(field[0].abs().max()) + math.ceil(field[1].abs().max())
        assert (out - x).abs().max() <= steps * local_grad + 1e-5


class TestWarpField:
    def test_zero_strength(self):
        field = build_warp_field(4, 0.0, (16, 16), seed=0)
        assert torch.all(field == 0)

    def test_linear_in_strength(self):
        a = build_warp_field(4, 0.5, (32, 32), seed=9)
        b = build_warp_field(4, 1.0, (32, 32), seed=9)
        assert torch.allclose(b, 2 * a, atol=1e-6)

    def test_deterministic(self):
        a = build_warp_field(5, 0.3, (16, 16), seed=1)
        b = build_warp_field(5, 0.3, (16, 16), seed=1)
        assert torch.equal(a, b)

    def test_smoothness(self):
        # upsampler oracle: the discrete Laplacian of a bicubic upsample is
        # tiny relative to the field amplitude, unlike per-pixel noise
        field = build_warp_field(4, 0.5, (32, 32), seed=3)
        lap = (field[:, 2:, 1:-1] + field[:, :-2, 1:-1] + field[:, 1:-1, 2:]
               + field[:, 1:-1, :-2] - 4 * field[:, 1:-1, 1:-1])
        ratio = lap.abs().max() / field.abs().max()
        assert ratio < 0.15

        noise = torch.rand(2, 32, 32) * field.abs().max()
        nlap = (noise[:, 2:, 1:-1] + noise[:, :-2, 1:-1] + noise[:, 1:-1, 2:]
                + noise[:, 1:-1, :-2] - 4 * noise[:, 1:-1, 1:-1])
        assert nlap.abs().max() / noise.abs().max() > 1.0

    def test_grid_guard(self):
        with pytest.raises(ValueError):
            build_warp_field(1, 0.5, (8, 8), seed=0)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic(5, 40, (16, 16), seed=0)


class TestPoisonDataset:
    def test_rate_zero_unchanged(self, blobs):
        p = BadNetsPoisoner(rate=0.0, target_class=2, label_mode="clean")
        out = p.fit(blobs).transform(blobs)
        assert torch.equal(out.images, blobs.images)
        assert out.poisoned.sum() == 0

    def test_paper_scale_accounting(self):
        # 50000 samples, 0.5% clean-label rate, balanced 10 classes, target 2
        data = make_synthetic(10, 5000, (2, 2), seed=1, channels=1)
        p = BadNetsPoisoner(rate=0.005, target_class=2, label_mode="clean",
                            patch_size=1, seed=0)
        out = p.fit(data).transform(data)
        assert int(out.poisoned.sum()) == 250
        flagged = out.poisoned.nonzero().flatten()
        assert torch.all(out.labels[flagged] == 2)
        assert torch.all(data.labels[flagged] == 2)

    def test_dirty_accounting_and_provenance(self):
        data = make_synthetic(10, 100, (4, 4), seed=2, channels=1)
        p = BlendedPoisoner(rate=0.01, target_class=3, label_mode="dirty", seed=5)
        out = p.fit(data).transform(data)
        flagged = out.poisoned.nonzero().flatten()
        assert len(flagged) == 10
        assert torch.all(out.labels[flagged] == 3)
        assert torch.equal(out.original_labels, data.labels)

    def test_clean_mode_population_guard(self, blobs):
        p = BadNetsPoisoner(rate=0.9, target_class=2, label_mode="clean")
        with pytest.raises(ValueError):
            p.fit(blobs).transform(blobs)

    def test_unflagged_bitwise_unchanged(self, blobs):
        p = WaNetPoisoner(rate=0.1, target_class=1, label_mode="dirty", seed=3)
        out = p.fit(blobs).transform(blobs)
        clean = ~out.poisoned
        assert torch.equal(out.images[clean], blobs.images[clean])
        assert torch.equal(out.labels[clean], blobs.labels[clean])

    def test_deterministic(self, blobs):
        a = BadNetsPoisoner(rate=0.05, label_mode="dirty", seed=11).fit(blobs).transform(blobs)
        b = BadNetsPoisoner(rate=0.05, label_mode="dirty", seed=11).fit(blobs).transform(blobs)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)
        assert torch.equal(a.poisoned, b.poisoned)

    def test_randomized_accounting(self):
        # exact floor counts and label rules across random specs
        g = torch.Generator().manual_seed(0)
        for trial in range(15):
            n_per = int(torch.randint(20, 60, (1,), generator=g))
            classes = int(torch.randint(2, 6, (1,), generator=g))
            rate = float(torch.rand(1, generator=g)) * 0.08
            mode = "clean" if trial % 2 == 0 else "dirty"
            target = int(torch.randint(0, classes, (1,), generator=g))
            data = make_synthetic(classes, n_per, (4, 4), seed=trial, channels=1)
            p = BadNetsPoisoner(rate=rate, target_class=target, label_mode=mode,
                                patch_size=2, seed=trial)
            out = p.fit(data).transform(data)
            expected = math.floor(rate * len(data))
            assert int(out.poisoned.sum()) == expected
            flagged = out.poisoned.nonzero().flatten()
            assert torch.all(out.labels[flagged] == target) or expected == 0
            if mode == "clean":
                assert torch.all(data.labels[flagged] == target)
                assert torch.equal(out.labels, data.labels)


class TestTriggerTestset:
    def test_all_target_class_empty(self):
        data = make_synthetic(1, 10, (4, 4), seed=0, channels=1)
        data.labels[:] = 2
        data.original_labels[:] = 2
        data.num_classes = 3
        p = BadNetsPoisoner(target_class=2, patch_size=2)
        assert len(p.transform_test(data)) == 0

    def test_count_oracle(self):
        data = make_synthetic(10, 10, (4, 4), seed=1, channels=1)
        p = BadNetsPoisoner(target_class=4, patch_size=2)
        triggered = p.transform_test(data)
        assert len(triggered) == 90
        assert torch.all(triggered.original_labels != 4)

    def test_labels_untouched(self):
        data = make_synthetic(4, 10, (4, 4), seed=2, channels=1)
        p = BlendedPoisoner(target_class=0, alpha=0.2)
        triggered = p.transform_test(data)
        keep = data.labels != 0
        assert torch.equal(triggered.labels, data.labels[keep])

    def test_blend_linf_bound(self):
        data = make_synthetic(4, 10, (8, 8), seed=3)
        alpha = 0.25
        p = BlendedPoisoner(target_class=1, alpha=alpha)
        triggered = p.transform_test(data)
        keep = data.labels != 1
        assert (triggered.images - data.images[keep]).abs().max() <= alpha + 1e-6


@pytest.fixture(scope="module")
def fitted():
    data = make_synthetic(3, 60, (16, 16), seed=7, noise=0.25)
    p = LabelConsistentPoisoner(rate=0.1, target_class=1, surrogate_epochs=10, seed=0)
    return p.fit(data), data


class TestLabelConsistent:
    def test_unfitted_state_error(self):
        from sklearn.exceptions import NotFittedError

        p = LabelConsistentPoisoner()
        with pytest.raises(NotFittedError):
            p.perturb_victims(torch.rand(2, 3, 8, 8), torch.tensor([0, 1]))

    def test_eps_zero_is_patch_only(self, fitted):
        p, data = fitted
        zero = LabelConsistentPoisoner(**{**p.get_params(), "eps": 0.0,
                                          "surrogate": p.surrogate_})
        zero.fit(data)
        out = zero.transform(data)
        flagged = out.poisoned.nonzero().flatten()
        assert torch.equal(out.images[flagged], p.apply_trigger(data.images[flagged]))

    def test_budget_bound_off_patch(self, fitted):
        p, data = fitted
        out = p.transform(data)
        flagged = out.poisoned.nonzero().flatten()
        patched_clean = p.apply_trigger(data.images[flagged])
        _, mask = p.corner_tensors(data.image_size, data.channels)
        off_patch = mask == 0
        delta = (out.images[flagged] - patched_clean).abs()
        assert delta[:, off_patch].max() <= p.eps + 1e-6

    def test_surrogate_accuracy_drops(self, fitted):
        p, data = fitted
        victims = (data.labels == 1).nonzero().flatten()
        x, y = data.images[victims], data.labels[victims]
        adv = p.perturb_victims(x, y)
        model = p.surrogate_
        model.eval()
        with torch.no_grad():
            acc_clean = (model(x).argmax(1) == y).float().mean()
            acc_adv = (model(adv).argmax(1) == y).float().mean()
        assert acc_adv < acc_clean

    def test_labels_never_change(self, fitted):
        p, data = fitted
        out = p.transform(data)
        assert torch.equal(out.labels, data.labels)

    def test_dirty_mode_rejected(self):
        with pytest.raises(ValueError):
            LabelConsistentPoisoner(label_mode="dirty").fit(
                make_synthetic(2, 10, (8, 8), seed=0))


class TestSerialization:
    def test_poisoner_config_primitives(self):
        cfg = poisoner_config(BadNetsPoisoner(rate=0.01, patch_size=2, offset=(1, 1)))
        assert cfg["kind"] == "badnets"
        assert cfg["rate"] == 0.01
        assert cfg["offset"] == [1, 1]
        import json
        json.dumps(cfg)

    def test_lc_config_drops_model(self):
        import json
        p = LabelConsistentPoisoner(surrogate=torch.nn.Linear(2, 2))
        cfg = poisoner_config(p)
        json.dumps(cfg)
        assert "surrogate" not in cfg

    def test_smooth_blend_image_range(self):
        img = smooth_blend_image((16, 16), 3, seed=1)
        assert img.min() >= 0 and img.max() <= 1
        assert img.shape == (3, 16, 16)
