"""Inner-maximization solver contracts: identities, projections, oracles."""

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from backlab import (
    GaussianNoise,
    L2PGD,
    LinfPGD,
    PerceptualAttack,
    RandomWarp,
    SolverError,
    SpatialAttack,
    build_model,
    make_synthetic,
    make_threat,
    threat_config,
)
from backlab.errors import CapabilityError
from backlab.threats import input_gradient, perceptual_distance
from backlab.warp import random_bounded_field


class LinearModel(nn.Module):
    """f(x) = W flatten(x); closed-form gradients for solver oracles."""

    def __init__(self, weight):
        super().__init__()
        self.weight = nn.Parameter(weight)

    def forward(self, x):
        return x.flatten(1) @ self.weight.T


def analytic_ce_grad(weight, x, y):
    logits = x.flatten(1) @ weight.T
    p = torch.softmax(logits, dim=1)
    p[torch.arange(len(y)), y] -= 1.0
    return (p @ weight).view_as(x) / len(y)


@pytest.fixture(scope="module")
def small_setup():
    data = make_synthetic(3, 20, (8, 8), seed=0)
    model = build_model("small-cnn", 3, 3, seed=0)
    model.eval()
    return model, data.images[:8], data.labels[:8]


class TestIdentities:
    @pytest.mark.parametrize("attack", [
        LinfPGD(eps=0.0), L2PGD(eps=0.0), SpatialAttack(eps=0.0),
        PerceptualAttack(eps=0.0), GaussianNoise(sigma=0.0), RandomWarp(sigma=0.0),
        LinfPGD(eps=0.1, steps=0), L2PGD(eps=0.5, steps=0),
        SpatialAttack(eps=0.05, steps=0), PerceptualAttack(eps=0.3, steps=0),
    ])
    def test_zero_budget_or_steps(self, small_setup, attack):
        model, x, y = small_setup
        out = attack.perturb(model, x, y)
        assert torch.equal(out, x)

    def test_spatial_zero_budget_flow(self, small_setup):
        model, x, y = small_setup
        out, flow = SpatialAttack(eps=0.0).perturb_with_flow(model, x, y)
        assert torch.equal(out, x)
        assert torch.all(flow == 0)


class TestProjectionBounds:
    def test_linf_bound(self, small_setup):
        model, x, y = small_setup
        g = torch.Generator().manual_seed(0)
        for trial in range(25):
            eps = float(torch.rand(1, generator=g)) * 0.2 + 1e-3
            atk = LinfPGD(eps=eps, steps=3, seed=trial)
            adv = atk.perturb(model, x, y)
            assert (adv - x).abs().max() <= eps + 1e-5
            assert adv.min() >= 0 and adv.max() <= 1

    def test_l2_bound(self, small_setup):
        model, x, y = small_setup
        g = torch.Generator().manual_seed(1)
        for trial in range(25):
            eps = float(torch.rand(1, generator=g)) * 2.0 + 1e-3
            atk = L2PGD(eps=eps, steps=3, seed=trial)
            adv = atk.perturb(model, x, y)
            norms = (adv - x).reshape(len(x), -1).norm(dim=1)
            assert norms.max() <= eps + 1e-5

    def test_spatial_bound(self, small_setup):
        model, x, y = small_setup
        for trial in range(5):
            eps = 0.01 * (trial + 1)
            atk = SpatialAttack(eps=eps, steps=3)
            _, flow = atk.perturb_with_flow(model, x, y)
            assert flow.abs().max() <= eps * 8 + 1e-6  # image side is 8


class TestClosedFormOracles:
    def test_linf_one_step(self):
        g = torch.Generator().manual_seed(2)
        w = torch.randn((3, 16), generator=g)
        x = torch.rand((4, 1, 4, 4), generator=g) * 0.5 + 0.25  # interior
        y = torch.tensor([0, 1, 2, 0])
        model = LinearModel(w)
        eps = 0.05
        atk = LinfPGD(eps=eps, steps=1, step_size=eps, random_start=False)
        adv = atk.perturb(model, x, y)
        expected = x + eps * analytic_ce_grad(w, x, y).sign()
        assert torch.allclose(adv, expected, atol=1e-6)

    def test_l2_one_step(self):
        g = torch.Generator().manual_seed(3)
        w = torch.randn((3, 16), generator=g)
        x = torch.rand((4, 1, 4, 4), generator=g) * 0.5 + 0.25
        y = torch.tensor([1, 2, 0, 1])
        model = LinearModel(w)
        eps, step = 0.3, 0.1
        atk = L2PGD(eps=eps, steps=1, step_size=step, random_start=False)
        adv = atk.perturb(model, x, y)
        grad = analytic_ce_grad(w, x, y)
        direction = grad / grad.reshape(4, -1).norm(dim=1).view(-1, 1, 1, 1)
        assert torch.allclose(adv, x + step * direction, atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        # two-layer toy model in double precision vs central differences
        torch.manual_seed(0)
        model = nn.Sequential(nn.Flatten(), nn.Linear(12, 8), nn.Tanh(),
                              nn.Linear(8, 3)).double()
        x = torch.rand(2, 1, 3, 4, dtype=torch.float64)
        y = torch.tensor([0, 2])
        grad = input_gradient(model, x, y)
        h = 1e-6
        fd = torch.zeros_like(x)
        for i in range(x.numel()):
            xp = x.clone().reshape(-1)
            xm = x.clone().reshape(-1)
            xp[i] += h
            xm[i] -= h
            lp = F.cross_entropy(model(xp.view_as(x)), y)
            lm = F.cross_entropy(model(xm.view_as(x)), y)
            fd.reshape(-1)[i] = (lp - lm) / (2 * h)
        rel = (grad - fd).norm() / fd.norm()
        assert rel < 1e-3

    def test_non_finite_gradient_raises(self):
        model = LinearModel(torch.full((2, 4), float("nan")))
        with pytest.raises(SolverError):
            LinfPGD(eps=0.1, steps=1, random_start=False).perturb(
                model, torch.rand(1, 1, 2, 2), torch.tensor([0]))


class TestMonotonicity:
    def test_pgd_loss_grows_with_steps(self, small_setup):
        model, x, y = small_setup
        losses = []
        for k in range(1, 6):
            atk = LinfPGD(eps=8 / 255, steps=k, step_size=2 / 255, seed=0)
            adv = atk.perturb(model, x, y, generator=torch.Generator().manual_seed(7))
            with torch.no_grad():
                losses.append(F.cross_entropy(model(adv), y).item())
        for a, b in zip(losses, losses[1:]):
            assert b >= a - 1e-3


class TestSpatial:
    def test_corner_sensitive_model_loss_increase(self):
        class CornerReader(nn.Module):
            def forward(self, x):
                corner = x[:, :, :3, :3].mean(dim=(1, 2, 3), keepdim=False)
                center = x[:, :, 5:8, 5:8].mean(dim=(1, 2, 3), keepdim=False)
                return torch.stack([corner, center], dim=1) * 10

        x = torch.zeros(4, 1, 12, 12)
        x[:, :, :3, :3] = 1.0
        y = torch.zeros(4, dtype=torch.long)
        model = CornerReader()
        before = F.cross_entropy(model(x), y).item()
        atk = SpatialAttack(eps=0.25, steps=10, budget_in_pixels=False)
        adv = atk.perturb(model, x, y)
        after = F.cross_entropy(model(adv), y).item()
        assert after > before


class TestPerceptual:
    def test_zero_steps_distance_zero(self, small_setup):
        model, x, y = small_setup
        out = PerceptualAttack(eps=0.3, steps=0).perturb(model, x, y)
        assert perceptual_distance(model, out, x).max() == 0

    def test_inactive_constraint_raises_loss(self, small_setup):
        model, x, y = small_setup
        atk = PerceptualAttack(eps=1e6, steps=5, step_size=0.05)
        adv = atk.perturb(model, x, y)
        with torch.no_grad():
            before = F.cross_entropy(model(x), y)
            after = F.cross_entropy(model(adv), y)
        assert after >= before

    def test_slack_shrinks_with_lambda(self, small_setup):
        model, x, y = small_setup
        eps = 0.05
        slacks = []
        for lam in (1.0, 10.0, 100.0):
            atk = PerceptualAttack(eps=eps, steps=8, step_size=0.05, lam=lam)
            adv = atk.perturb(model, x, y)
            with torch.no_grad():
                d = perceptual_distance(model, adv, x)
            slacks.append(float((d - eps).clamp_min(0).max()))
        assert slacks[0] >= slacks[1] - 1e-4
        assert slacks[1] >= slacks[2] - 1e-4

    def test_capability_error_without_taps(self):
        model = LinearModel(torch.randn(2, 4))
        with pytest.raises(CapabilityError):
            PerceptualAttack(eps=0.1, steps=1).perturb(
                model, torch.rand(1, 1, 2, 2), torch.tensor([0]))


class TestRandomBaselines:
    def test_gauss_moment_oracle(self):
        # empirical std of the pre-clip noise within 5% of sigma
        sigma = 0.05
        x = torch.full((1, 1, 1000, 1000), 0.5)  # interior: clipping impossible
        out = GaussianNoise(sigma=sigma, seed=0).perturb(None, x)
        emp = (out - x).std().item()
        assert abs(emp - sigma) / sigma < 0.05

    def test_gauss_clips(self):
        x = torch.zeros(1, 1, 100, 100)
        out = GaussianNoise(sigma=0.5, seed=1).perturb(None, x)
        assert out.min() >= 0 and out.max() <= 1

    def test_random_warp_bound(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(5):
            field = random_bounded_field(2.5, (16, 16), generator=g)
            assert torch.isclose(field.abs().max(), torch.tensor(2.5))

    def test_random_warp_runs(self):
        x = torch.rand(3, 3, 16, 16)
        out = RandomWarp(sigma=0.1, seed=0).perturb(None, x)
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1

    def test_random_warp_differs_per_sample(self):
        x = torch.rand(1, 1, 16, 16).repeat(2, 1, 1, 1)
        out = RandomWarp(sigma=0.1, seed=0).perturb(None, x)
        assert not torch.equal(out[0], out[1])


class TestFactoryAndSerialization:
    def test_round_trip(self):
        atk = make_threat("linf", eps=4 / 255, steps=7)
        cfg = threat_config(atk)
        rebuilt = make_threat(cfg.pop("kind"), **cfg)
        assert isinstance(rebuilt, LinfPGD)
        assert rebuilt.eps == atk.eps and rebuilt.steps == 7

    def test_all_kinds(self):
        for kind in ("linf", "l2", "spatial", "perceptual"):
            assert make_threat(kind, eps=0.1).kind == kind
        for kind in ("rand_gauss", "rand_spatial"):
            assert make_threat(kind, sigma=0.1).kind == kind

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_threat("l7", eps=0.1)
