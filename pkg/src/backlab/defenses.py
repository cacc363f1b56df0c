"""Training-time baseline defenses: noisy clipped gradients and two-stage
loss-guided isolation with unlearning.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch.func import functional_call, grad, vmap

from .data import LabeledDataset
from .errors import CapabilityError, TrainingDivergedError
from .models import has_batchnorm
from .training import TrainerBase


def per_example_gradients(model, x: torch.Tensor, y: torch.Tensor) -> dict[str, torch.Tensor]:
    """Per-sample parameter gradients, stacked along a leading batch axis.

    Runs the model functionally in eval mode, so it requires per-sample
    normalization (group norm); batch norm would mix samples.
    """
    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}
    was_training = model.training
    model.eval()

    def sample_loss(p, xi, yi):
        logits = functional_call(model, (p, buffers), (xi.unsqueeze(0),))
        return F.cross_entropy(logits, yi.unsqueeze(0))

    grads = vmap(grad(sample_loss), in_dims=(None, 0, 0))(params, x, y)
    if was_training:
        model.train()
    return grads


def clip_per_example(grads: dict[str, torch.Tensor], clip_norm: float) -> dict[str, torch.Tensor]:
    """Rescale each sample's gradient to L2 norm at most clip_norm."""
    sq = None
    for g in grads.values():
        s = g.reshape(g.shape[0], -1).pow(2).sum(dim=1)
        sq = s if sq is None else sq + s
    norms = sq.sqrt()
    factor = (clip_norm / norms.clamp_min(1e-12)).clamp(max=1.0)
    return {k: g * factor.view(-1, *([1] * (g.ndim - 1))) for k, g in grads.items()}


def dpsgd_aggregate(model, x: torch.Tensor, y: torch.Tensor, clip_norm: float,
                    noise_multiplier: float,
                    generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """One noisy aggregated gradient: clip per example, average, add noise.

    The per-coordinate noise std is noise_multiplier * clip_norm / batch.
    """
    grads = per_example_gradients(model, x, y)
    if math.isfinite(clip_norm):
        grads = clip_per_example(grads, clip_norm)
    batch = x.shape[0]
    out = {}
    for k, g in grads.items():
        mean = g.mean(dim=0)
        if noise_multiplier > 0:
            std = noise_multiplier * clip_norm / batch
            noise = torch.randn(mean.shape, generator=generator, device=mean.device) * std
            mean = mean + noise
        out[k] = mean
    return out


class DPSGDTrainer(TrainerBase):
    """SGD on clipped per-example gradients plus Gaussian gradient noise.

    Requires a group-normalized architecture; clip_norm may be inf to
    disable clipping (with noise_multiplier 0 this reduces to plain SGD up
    to floating-point summation order).
    """

    kind = "dpsgd"

    def __init__(self, clip_norm: float = 1.0, noise_multiplier: float = 0.1,
                 arch: str = "small-cnn-groupnorm", epochs: int = 100, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4,
                 decay_epochs: tuple[int, ...] = (60, 90), batch_size: int = 128,
                 random_crop: bool = True, horizontal_flip: bool = True,
                 seed: int = 0, device: str | None = None, init_model=None):
        super().__init__(arch, epochs, lr, momentum, weight_decay, decay_epochs,
                         batch_size, random_crop, horizontal_flip, seed, device, init_model)
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier

    def _validate(self):
        super()._validate()
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")

    def _prepare(self, data):
        self._noise_gen = torch.Generator().manual_seed(self.seed * 8 + 5)

    def _update(self, model, optimizer, x, y, index) -> float:
        if has_batchnorm(model):
            raise CapabilityError("differentially private training requires group "
                                  "normalization, got a batch-norm model")
        agg = dpsgd_aggregate(model, x, y, self.clip_norm, self.noise_multiplier,
                              self._noise_gen)
        optimizer.zero_grad()
        named = dict(model.named_parameters())
        for k, g in agg.items():
            named[k].grad = g
        optimizer.step()
        with torch.no_grad():
            loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(self._epoch)
        return loss.item()


def lga_per_sample(logits: torch.Tensor, y: torch.Tensor, gamma: float) -> torch.Tensor:
    """Sign-flipped per-sample loss around the threshold gamma.

    Losses below gamma contribute negatively (local gradient ascent), which
    amplifies the loss gap that separates poisoned from clean samples. At
    gamma = 0 this is exactly the plain loss for nonnegative losses.
    """
    per = F.cross_entropy(logits, y, reduction="none")
    return torch.sign(per - gamma) * (per - gamma)


def lga_loss(logits: torch.Tensor, y: torch.Tensor, gamma: float) -> torch.Tensor:
    return lga_per_sample(logits, y, gamma).mean()


class ABLTrainer(TrainerBase):
    """Two-stage training: isolate the lowest-loss samples, then unlearn them.

    Stage 1 (before `turning_epoch`) trains with the sign-flipped loss around
    `gamma`, then flags round(isolation_rate * n) samples with the lowest
    training loss. Stage 2 continues with gradient ascent on flagged samples
    and normal descent on the rest. With an empty flagged set stage 2 is
    standard training.
    """

    kind = "abl"

    def __init__(self, gamma: float = 0.0, isolation_rate: float = 0.01,
                 turning_epoch: int = 20, unlearn_lr: float | None = None,
                 arch: str = "small-cnn", epochs: int = 100, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4,
                 decay_epochs: tuple[int, ...] = (60, 90), batch_size: int = 128,
                 random_crop: bool = True, horizontal_flip: bool = True,
                 seed: int = 0, device: str | None = None, init_model=None):
        super().__init__(arch, epochs, lr, momentum, weight_decay, decay_epochs,
                         batch_size, random_crop, horizontal_flip, seed, device, init_model)
        self.gamma = gamma
        self.isolation_rate = isolation_rate
        self.turning_epoch = turning_epoch
        self.unlearn_lr = unlearn_lr

    def _validate(self):
        super()._validate()
        if not 0.0 < self.isolation_rate < 1.0:
            raise ValueError("isolation_rate must be in (0, 1)")
        if self.epochs > 0 and not self.turning_epoch < self.epochs:
            raise ValueError("turning_epoch must come before the last epoch")

    def _prepare(self, data):
        self._flag_mask = torch.zeros(len(data), dtype=torch.bool)
        self.isolated_indices_ = None

    def _epoch_lr(self, epoch: int) -> float:
        if self.unlearn_lr is not None and epoch >= self.turning_epoch:
            return self.unlearn_lr
        return super()._epoch_lr(epoch)

    def _loss(self, model, x, y, index):
        if self._epoch < self.turning_epoch:
            return lga_loss(model(x), y, self.gamma)
        per = F.cross_entropy(model(x), y, reduction="none")
        sign = torch.where(self._flag_mask[index].to(per.device), -1.0, 1.0)
        return (sign * per).mean()

    def sample_losses(self, model, data: LabeledDataset) -> torch.Tensor:
        """Per-sample training losses, eval mode, no augmentation."""
        dev = self._device()
        was_training = model.training
        model.eval()
        losses = []
        with torch.no_grad():
            for i in range(0, len(data), self.batch_size):
                x = data.images[i:i + self.batch_size].to(dev)
                y = data.labels[i:i + self.batch_size].to(dev)
                losses.append(F.cross_entropy(model(x), y, reduction="none").cpu())
        if was_training:
            model.train()
        return torch.cat(losses)

    def _on_epoch_end(self, model, data, epoch):
        if epoch == self.turning_epoch - 1:
            losses = self.sample_losses(model, data)
            count = round(self.isolation_rate * len(data))
            order = torch.argsort(losses, stable=True)
            flagged = order[:count]
            self._flag_mask = torch.zeros(len(data), dtype=torch.bool)
            self._flag_mask[flagged] = True
            self.isolated_indices_ = torch.sort(flagged).values

    def fit(self, data, y=None, **kwargs):
        super().fit(data, y, **kwargs)
        if self.isolated_indices_ is None:
            self.isolated_indices_ = torch.zeros(0, dtype=torch.long)
        return self

    def isolation_report(self, data: LabeledDataset) -> dict:
        """Precision/recall of the flagged set against ground-truth flags."""
        flagged = set(self.isolated_indices_.tolist())
        truth = set(data.poisoned.nonzero().flatten().tolist())
        hit = len(flagged & truth)
        return {
            "flagged": len(flagged),
            "true_poisons": len(truth),
            "precision": hit / max(len(flagged), 1),
            "recall": hit / max(len(truth), 1),
        }
