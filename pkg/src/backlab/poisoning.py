"""Backdoor poisoning attacks as dataset transformers.

Each poisoner is an estimator: `transform` poisons floor(rate * n) training
samples (selected uniformly under the poisoner seed), `transform_test`
builds the triggered test set used for attack-success-rate evaluation, and
`apply_trigger` injects the trigger into a raw image batch. Dirty-label
poisoners relabel victims to the target class; clean-label poisoners only
touch samples already in the target class. All triggers preserve tensor
shape and the [0, 1] range.
"""

from __future__ import annotations

import math

import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import LabeledDataset
from .warp import build_warp_field, warp_images

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


def checkerboard(size: int, channels: int = 3) -> torch.Tensor:
    """(channels, size, size) pattern alternating between 1 and 0."""
    ij = torch.arange(size)
    cells = ((ij[:, None] + ij[None, :]) % 2 == 0).float()
    return cells.expand(channels, size, size).clone()


def place_patch(patch: torch.Tensor, image_size: tuple[int, int],
                corner: str = "bottom-right",
                offset: tuple[int, int] = (0, 0)) -> tuple[torch.Tensor, torch.Tensor]:
    """Embed a small patch into a full-size (pattern, mask) pair.

    The mask is binary with exactly patch-height * patch-width * channels
    ones; `offset` is measured inward from the chosen corner.
    """
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {CORNERS}")
    c, ph, pw = patch.shape
    h, w = image_size
    if ph > h or pw > w:
        raise ValueError("patch larger than image")
    dy, dx = offset
    top = dy if corner.startswith("top") else h - ph - dy
    left = dx if corner.endswith("left") else w - pw - dx
    if top < 0 or left < 0:
        raise ValueError("offset pushes patch outside the image")
    pattern = torch.zeros(c, h, w)
    mask = torch.zeros(c, h, w)
    pattern[:, top:top + ph, left:left + pw] = patch
    mask[:, top:top + ph, left:left + pw] = 1.0
    return pattern, mask


def apply_patch(x: torch.Tensor, pattern: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked replacement: x where mask is 0, the pattern where mask is 1."""
    if pattern.shape[-3:] != x.shape[-3:] or mask.shape[-3:] != x.shape[-3:]:
        raise ValueError(
            f"pattern/mask shape {tuple(pattern.shape[-3:])} does not match image "
            f"shape {tuple(x.shape[-3:])}")
    return ((1.0 - mask) * x + mask * pattern).clamp(0.0, 1.0)


def apply_blend(x: torch.Tensor, pattern: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex blend of the image with a whole-image trigger pattern."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be strictly inside (0, 1)")
    if pattern.shape[-3:] != x.shape[-3:]:
        raise ValueError("blend pattern shape does not match image shape")
    return (1.0 - alpha) * x + alpha * pattern


def apply_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp trigger: bilinear resampling at displaced grid coordinates."""
    return warp_images(x, flow).clamp(0.0, 1.0)


def smooth_blend_image(image_size: tuple[int, int], channels: int = 3,
                       seed: int = 7, grid: int = 4) -> torch.Tensor:
    """Deterministic colorful low-frequency image used as a blend trigger.

    Stands in for an arbitrary photographic blend pattern: coherent across
    the whole image, unlike the uniform-noise variant. `grid` sets the
    pattern's spatial frequency; 2 gives a broad color wash that survives
    warping, larger values add finer structure.
    """
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand((1, channels, grid, grid), generator=g)
    up = torch.nn.functional.interpolate(coarse, size=image_size, mode="bicubic",
                                         align_corners=True)
    img = up[0]
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo).clamp_min(1e-8)


class Poisoner(BaseEstimator):
    """Shared victim selection, bookkeeping, and test-set triggering."""

    kind: str = ""

    rate: float
    target_class: int
    label_mode: str
    seed: int

    def _validate(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        if self.label_mode not in ("clean", "dirty"):
            raise ValueError("label_mode must be 'clean' or 'dirty'")

    def fit(self, data: LabeledDataset | None = None, y=None):
        self._validate()
        return self

    def apply_trigger(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _select_victims(self, data: LabeledDataset) -> torch.Tensor:
        budget = math.floor(self.rate * len(data))
        g = torch.Generator().manual_seed(self.seed)
        if self.label_mode == "clean":
            pool = (data.labels == self.target_class).nonzero().flatten()
            if len(pool) < budget:
                raise ValueError(
                    f"clean-label poisoning needs {budget} target-class samples, "
                    f"dataset has {len(pool)}")
            chosen = pool[torch.randperm(len(pool), generator=g)[:budget]]
        else:
            chosen = torch.randperm(len(data), generator=g)[:budget]
        return torch.sort(chosen).values

    def _poison_images(self, data: LabeledDataset, idx: torch.Tensor) -> torch.Tensor:
        return self.apply_trigger(data.images[idx])

    def transform(self, data: LabeledDataset) -> LabeledDataset:
        """Poison floor(rate * n) samples; everything else stays bitwise intact."""
        self._validate()
        out = data.clone()
        idx = self._select_victims(data)
        if len(idx) == 0:
            return out
        out.images[idx] = self._poison_images(data, idx)
        out.poisoned[idx] = True
        if self.label_mode == "dirty":
            out.labels[idx] = self.target_class
        return out

    def fit_transform(self, data: LabeledDataset, y=None) -> LabeledDataset:
        return self.fit(data).transform(data)

    def transform_test(self, data: LabeledDataset) -> LabeledDataset:
        """Trigger every test sample whose true class is not the target.

        Labels are untouched; the success metric compares predictions to the
        target class externally.
        """
        keep = (data.original_labels != self.target_class).nonzero().flatten()
        sub = data.subset(keep)
        if len(sub) > 0:
            sub.images = self.apply_trigger(sub.images)
            sub.poisoned[:] = True
        return sub


class BadNetsPoisoner(Poisoner):
    """Corner patch trigger: a checkerboard or fixed random square."""

    kind = "badnets"

    def __init__(self, rate: float = 0.005, target_class: int = 2,
                 label_mode: str = "clean", patch_size: int = 3,
                 pattern: str = "checkerboard", corner: str = "bottom-right",
                 offset: tuple[int, int] = (0, 0), seed: int = 0):
        self.rate = rate
        self.target_class = target_class
        self.label_mode = label_mode
        self.patch_size = patch_size
        self.pattern = pattern
        self.corner = corner
        self.offset = offset
        self.seed = seed

    def patch_tensors(self, image_size: tuple[int, int],
                      channels: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self.pattern == "checkerboard":
            patch = checkerboard(self.patch_size, channels)
        elif self.pattern == "random":
            g = torch.Generator().manual_seed(self.seed)
            patch = torch.rand((channels, self.patch_size, self.patch_size), generator=g)
        else:
            raise ValueError(f"unknown patch pattern {self.pattern!r}")
        return place_patch(patch, image_size, self.corner, tuple(self.offset))

    def apply_trigger(self, images):
        pattern, mask = self.patch_tensors(images.shape[-2:], images.shape[-3])
        return apply_patch(images, pattern, mask)


class BlendedPoisoner(Poisoner):
    """Whole-image blend trigger with transparency alpha."""

    kind = "blended"

    def __init__(self, rate: float = 0.05, target_class: int = 2,
                 label_mode: str = "dirty", alpha: float = 0.2,
                 pattern: str = "smooth", pattern_grid: int = 4, seed: int = 0):
        self.rate = rate
        self.target_class = target_class
        self.label_mode = label_mode
        self.alpha = alpha
        self.pattern = pattern
        self.pattern_grid = pattern_grid
        self.seed = seed

    def blend_image(self, image_size: tuple[int, int], channels: int) -> torch.Tensor:
        if self.pattern == "smooth":
            return smooth_blend_image(image_size, channels, seed=self.seed + 7,
                                      grid=self.pattern_grid)
        if self.pattern == "random":
            g = torch.Generator().manual_seed(self.seed + 7)
            return torch.rand((channels, *image_size), generator=g)
        raise ValueError(f"unknown blend pattern {self.pattern!r}")

    def apply_trigger(self, images):
        pattern = self.blend_image(images.shape[-2:], images.shape[-3])
        return apply_blend(images, pattern, self.alpha)


class WaNetPoisoner(Poisoner):
    """Smooth warping-field trigger; one fixed field per poisoner seed."""

    kind = "wanet"

    def __init__(self, rate: float = 0.05, target_class: int = 2,
                 label_mode: str = "dirty", grid_k: int = 4, strength: float = 0.5,
                 seed: int = 0):
        self.rate = rate
        self.target_class = target_class
        self.label_mode = label_mode
        self.grid_k = grid_k
        self.strength = strength
        self.seed = seed

    def warp_field(self, image_size: tuple[int, int]) -> torch.Tensor:
        return build_warp_field(self.grid_k, self.strength, image_size, seed=self.seed + 13)

    def apply_trigger(self, images):
        return apply_warp(images, self.warp_field(images.shape[-2:]))


class LabelConsistentPoisoner(Poisoner):
    """Clean-label attack: adversarially perturb victims, then patch corners.

    Victims (target-class samples only) are first moved off their true class
    by L-infinity PGD against an independently trained clean surrogate, then
    stamped with a four-corner checkerboard. Labels never change. At test
    time only the corner patch is applied.
    """

    kind = "lc"

    def __init__(self, rate: float = 0.005, target_class: int = 2,
                 label_mode: str = "clean", eps: float = 8 / 255, pgd_steps: int = 20,
                 pgd_step_size: float = 2 / 255, patch_size: int = 3,
                 surrogate=None, surrogate_epochs: int = 10, seed: int = 0):
        self.rate = rate
        self.target_class = target_class
        self.label_mode = label_mode
        self.eps = eps
        self.pgd_steps = pgd_steps
        self.pgd_step_size = pgd_step_size
        self.patch_size = patch_size
        self.surrogate = surrogate
        self.surrogate_epochs = surrogate_epochs
        self.seed = seed

    def _validate(self):
        super()._validate()
        if self.label_mode != "clean":
            raise ValueError("label-consistent poisoning is clean-label by definition")

    def fit(self, data: LabeledDataset | None = None, y=None):
        """Train the clean surrogate on `data` unless one was supplied."""
        self._validate()
        if self.surrogate is not None:
            self.surrogate_ = self.surrogate
        else:
            if data is None:
                raise ValueError("fit needs data to train a surrogate")
            from .training import StandardTrainer  # deferred: avoids an import cycle
            trainer = StandardTrainer(epochs=self.surrogate_epochs, decay_epochs=(),
                                      lr=0.05, batch_size=64, seed=self.seed)
            self.surrogate_ = trainer.fit(data).model_
        return self

    def corner_tensors(self, image_size: tuple[int, int],
                       channels: int) -> tuple[torch.Tensor, torch.Tensor]:
        patch = checkerboard(self.patch_size, channels)
        pattern = torch.zeros(channels, *image_size)
        mask = torch.zeros(channels, *image_size)
        for corner in CORNERS:
            p, m = place_patch(patch, image_size, corner)
            pattern = torch.where(m > 0, p, pattern)
            mask = torch.maximum(mask, m)
        return pattern, mask

    def apply_trigger(self, images):
        pattern, mask = self.corner_tensors(images.shape[-2:], images.shape[-3])
        return apply_patch(images, pattern, mask)

    def perturb_victims(self, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Untargeted PGD within eps using the fitted surrogate."""
        if getattr(self, "surrogate_", None) is None:
            raise NotFittedError("surrogate not trained; call fit first")
        if self.eps <= 0:
            return images.clone()
        from .threats import LinfPGD  # deferred: threats has no poisoning dependency
        pgd = LinfPGD(eps=self.eps, steps=self.pgd_steps, step_size=self.pgd_step_size,
                      random_start=True, seed=self.seed)
        was_training = self.surrogate_.training
        self.surrogate_.eval()
        adv = pgd.perturb(self.surrogate_, images, labels,
                          generator=torch.Generator().manual_seed(self.seed + 1))
        if was_training:
            self.surrogate_.train()
        return adv

    def _poison_images(self, data: LabeledDataset, idx: torch.Tensor) -> torch.Tensor:
        adv = self.perturb_victims(data.images[idx], data.labels[idx])
        return self.apply_trigger(adv)


def make_lc_poison(images: torch.Tensor, labels: torch.Tensor, surrogate,
                   eps: float, poisoner: LabelConsistentPoisoner | None = None) -> torch.Tensor:
    """One-shot label-consistent poisoning of a raw batch."""
    p = poisoner or LabelConsistentPoisoner()
    p = LabelConsistentPoisoner(**{**p.get_params(), "eps": eps, "surrogate": surrogate})
    p.fit()
    return p.apply_trigger(p.perturb_victims(images, labels))


_POISONERS = {
    "badnets": BadNetsPoisoner,
    "blended": BlendedPoisoner,
    "wanet": WaNetPoisoner,
    "lc": LabelConsistentPoisoner,
}


def make_poisoner(kind: str, **params) -> Poisoner:
    if kind not in _POISONERS:
        raise ValueError(f"unknown poisoner kind {kind!r}; choose from {sorted(_POISONERS)}")
    return _POISONERS[kind](**params)


def poisoner_config(poisoner: Poisoner) -> dict:
    """Serializable description: kind plus primitive constructor params."""
    cfg = {"kind": poisoner.kind}
    for key, value in poisoner.get_params().items():
        if isinstance(value, (int, float, str, bool, tuple, list)) or value is None:
            cfg[key] = list(value) if isinstance(value, tuple) else value
    return cfg
