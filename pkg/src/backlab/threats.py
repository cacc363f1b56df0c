"""Inner-maximization solvers: the perturbation sets used in robust training.

Each threat model is a parameterized attack object with a uniform
`perturb(model, x, y)` entry point. Budgets are in pixel units for the Lp
attacks; the spatial budget is a fraction of max(h, w) unless
`budget_in_pixels` is set. A zero budget or zero steps always returns the
input unchanged, and solvers never mutate model parameters.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .errors import SolverError
from .models import feature_maps
from .warp import random_bounded_field, warp_images

THREAT_KINDS = ("linf", "l2", "spatial", "perceptual", "rand_gauss", "rand_spatial")


def input_gradient(model, x: torch.Tensor, y: torch.Tensor,
                   loss_fn=F.cross_entropy) -> torch.Tensor:
    """Gradient of the classification loss w.r.t. the input batch."""
    x = x.clone().detach().requires_grad_(True)
    loss = loss_fn(model(x), y)
    grad = torch.autograd.grad(loss, x)[0]
    if not torch.isfinite(grad).all():
        raise SolverError("non-finite input gradient")
    return grad


def _flat_norm(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).norm(dim=1)


def project_l2(delta: torch.Tensor, eps: float) -> torch.Tensor:
    norms = _flat_norm(delta).clamp_min(1e-12)
    factor = (eps / norms).clamp(max=1.0)
    return delta * factor.view(-1, *([1] * (delta.ndim - 1)))


class ThreatModel(BaseEstimator):
    """Base attack: constructor args are the serializable solver settings."""

    kind: str = ""

    def perturb(self, model, x: torch.Tensor, y: torch.Tensor,
                generator: torch.Generator | None = None) -> torch.Tensor:
        raise NotImplementedError

    def _generator(self, generator: torch.Generator | None) -> torch.Generator:
        if generator is not None:
            return generator
        return torch.Generator().manual_seed(getattr(self, "seed", 0) or 0)


class LinfPGD(ThreatModel):
    """Sign-gradient ascent projected onto the L-infinity ball and [0, 1]."""

    kind = "linf"

    def __init__(self, eps: float = 8 / 255, steps: int = 10, step_size: float | None = None,
                 random_start: bool = True, seed: int = 0):
        self.eps = eps
        self.steps = steps
        self.step_size = step_size
        self.random_start = random_start
        self.seed = seed

    def perturb(self, model, x, y, generator=None):
        if self.eps <= 0 or self.steps <= 0:
            return x.clone()
        step = self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps
        g = self._generator(generator)
        x_adv = x.clone()
        if self.random_start:
            noise = (torch.rand(x.shape, generator=g, device=x.device) * 2 - 1) * self.eps
            x_adv = (x_adv + noise).clamp(0.0, 1.0)
        for _ in range(self.steps):
            grad = input_gradient(model, x_adv, y)
            x_adv = x_adv + step * grad.sign()
            x_adv = x + (x_adv - x).clamp(-self.eps, self.eps)
            x_adv = x_adv.clamp(0.0, 1.0)
        return x_adv.detach()


class L2PGD(ThreatModel):
    """Normalized-gradient ascent projected onto the L2 ball and [0, 1]."""

    kind = "l2"

    def __init__(self, eps: float = 128 / 255, steps: int = 10, step_size: float | None = None,
                 random_start: bool = True, seed: int = 0):
        self.eps = eps
        self.steps = steps
        self.step_size = step_size
        self.random_start = random_start
        self.seed = seed

    def perturb(self, model, x, y, generator=None):
        if self.eps <= 0 or self.steps <= 0:
            return x.clone()
        step = self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps
        g = self._generator(generator)
        x_adv = x.clone()
        if self.random_start:
            noise = torch.randn(x.shape, generator=g, device=x.device)
            scale = torch.rand(x.shape[0], generator=g, device=x.device) * self.eps
            noise = noise / _flat_norm(noise).clamp_min(1e-12).view(-1, 1, 1, 1)
            x_adv = (x_adv + noise * scale.view(-1, 1, 1, 1)).clamp(0.0, 1.0)
        for _ in range(self.steps):
            grad = input_gradient(model, x_adv, y)
            norms = _flat_norm(grad)
            # zero gradient: skip the step rather than fail
            direction = grad / norms.clamp_min(1e-12).view(-1, 1, 1, 1)
            direction = direction * (norms > 0).float().view(-1, 1, 1, 1)
            x_adv = x_adv + step * direction
            x_adv = x + project_l2(x_adv - x, self.eps)
            x_adv = x_adv.clamp(0.0, 1.0)
        return x_adv.detach()


def flow_total_variation(flow: torch.Tensor) -> torch.Tensor:
    """Mean absolute finite difference of a (n, 2, h, w) flow field."""
    dh = (flow[:, :, 1:, :] - flow[:, :, :-1, :]).abs().mean(dim=(1, 2, 3))
    dw = (flow[:, :, :, 1:] - flow[:, :, :, :-1]).abs().mean(dim=(1, 2, 3))
    return dh + dw


class SpatialAttack(ThreatModel):
    """Adversarial pixel displacements: ascent on CE minus a smoothness term.

    The optimized flow is projected so max |displacement| stays within the
    budget; `eps` is a fraction of max(h, w) unless `budget_in_pixels`.
    """

    kind = "spatial"

    def __init__(self, eps: float = 0.025, steps: int = 10, step_size: float | None = None,
                 tau: float = 0.05, budget_in_pixels: bool = False, seed: int = 0):
        self.eps = eps
        self.steps = steps
        self.step_size = step_size
        self.tau = tau
        self.budget_in_pixels = budget_in_pixels
        self.seed = seed

    def displacement_bound(self, image_size: tuple[int, int]) -> float:
        if self.budget_in_pixels:
            return self.eps
        return self.eps * max(image_size)

    def perturb_with_flow(self, model, x, y, generator=None):
        n, _, h, w = x.shape
        bound = self.displacement_bound((h, w))
        flow = torch.zeros(n, 2, h, w, device=x.device)
        if self.eps <= 0 or self.steps <= 0:
            return x.clone(), flow
        step = self.step_size if self.step_size is not None else 2.5 * bound / self.steps
        for _ in range(self.steps):
            flow = flow.detach().requires_grad_(True)
            warped = warp_images(x, flow)
            loss = F.cross_entropy(model(warped), y) - self.tau * flow_total_variation(flow).mean()
            if not torch.isfinite(loss):
                raise SolverError("non-finite spatial attack loss")
            grad = torch.autograd.grad(loss, flow)[0]
            flow = (flow.detach() + step * grad.sign()).clamp(-bound, bound)
        return warp_images(x, flow).clamp(0.0, 1.0).detach(), flow.detach()

    def perturb(self, model, x, y, generator=None):
        return self.perturb_with_flow(model, x, y, generator)[0]


def normalized_features(model, x: torch.Tensor) -> torch.Tensor:
    """Flattened channel-normalized internal activations (the distance space)."""
    feats = feature_maps(model, x)
    parts = []
    for f in feats:
        f = f / f.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-10)
        parts.append(f.flatten(1))
    return torch.cat(parts, dim=1)


def perceptual_distance(model, x_adv: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return (normalized_features(model, x_adv) - normalized_features(model, x)).norm(dim=1)


class PerceptualAttack(ThreatModel):
    """Loss ascent penalized by the activation-space distance to the original.

    Solves the budgeted inner maximization by Lagrangian relaxation: maximize
    CE(f(x'), y) - lam * max(0, d(x', x) - eps) with normalized-gradient
    steps. The model itself supplies the activations (self-bounded), so it
    must expose `feature_maps`.
    """

    kind = "perceptual"

    def __init__(self, eps: float = 0.3, steps: int = 5, step_size: float = 0.02,
                 lam: float = 10.0, seed: int = 0):
        self.eps = eps
        self.steps = steps
        self.step_size = step_size
        self.lam = lam
        self.seed = seed

    def penalty_slack(self, model, x_adv, x) -> torch.Tensor:
        return (perceptual_distance(model, x_adv, x) - self.eps).clamp_min(0.0)

    def perturb(self, model, x, y, generator=None):
        if self.eps <= 0 or self.steps <= 0:
            return x.clone()
        x_adv = x.clone()
        for _ in range(self.steps):
            x_adv = x_adv.detach().requires_grad_(True)
            ce = F.cross_entropy(model(x_adv), y, reduction="none")
            obj = (ce - self.lam * self.penalty_slack(model, x_adv, x)).sum()
            if not torch.isfinite(obj):
                raise SolverError("non-finite perceptual attack loss")
            grad = torch.autograd.grad(obj, x_adv)[0]
            direction = grad / _flat_norm(grad).clamp_min(1e-12).view(-1, 1, 1, 1)
            x_adv = (x_adv.detach() + self.step_size * direction).clamp(0.0, 1.0)
        return x_adv.detach()


class GaussianNoise(ThreatModel):
    """Additive zero-mean Gaussian pixel noise (random-perturbation baseline)."""

    kind = "rand_gauss"

    def __init__(self, sigma: float = 0.1, seed: int = 0):
        self.sigma = sigma
        self.seed = seed

    def perturb(self, model, x, y=None, generator=None):
        if self.sigma <= 0:
            return x.clone()
        g = self._generator(generator)
        noise = torch.randn(x.shape, generator=g, device=x.device) * self.sigma
        return (x + noise).clamp(0.0, 1.0)


class RandomWarp(ThreatModel):
    """Random smooth warps with bounded peak displacement (baseline)."""

    kind = "rand_spatial"

    def __init__(self, sigma: float = 0.1, grid_k: int = 4,
                 budget_in_pixels: bool = False, seed: int = 0):
        self.sigma = sigma
        self.grid_k = grid_k
        self.budget_in_pixels = budget_in_pixels
        self.seed = seed

    def displacement_bound(self, image_size: tuple[int, int]) -> float:
        if self.budget_in_pixels:
            return self.sigma
        return self.sigma * max(image_size)

    def perturb(self, model, x, y=None, generator=None):
        if self.sigma <= 0:
            return x.clone()
        n, _, h, w = x.shape
        g = self._generator(generator)
        flows = random_bounded_field(self.displacement_bound((h, w)), (h, w),
                                     generator=g, grid_k=self.grid_k, batch=n)
        return warp_images(x, flows.to(x.device)).clamp(0.0, 1.0)


_THREATS = {
    "linf": LinfPGD,
    "l2": L2PGD,
    "spatial": SpatialAttack,
    "perceptual": PerceptualAttack,
    "rand_gauss": GaussianNoise,
    "rand_spatial": RandomWarp,
}


def make_threat(kind: str, **params) -> ThreatModel:
    """Build a threat model from its serialized (kind, params) form."""
    if kind not in _THREATS:
        raise ValueError(f"unknown threat kind {kind!r}; choose from {sorted(_THREATS)}")
    return _THREATS[kind](**params)


def threat_config(threat: ThreatModel) -> dict:
    """Serializable description: kind plus constructor params."""
    return {"kind": threat.kind, **threat.get_params()}
