"""Bi-level adaptive poisoning: craft per-sample perturbations whose training
gradient aligns with the gradient of the attacker's triggered objective,
periodically retraining the surrogate (robustly) on the current poisons.

The crafted deltas live on target-class samples with unchanged labels; the
trigger itself only appears in the attacker objective and at test time.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .data import LabeledDataset
from .errors import AttackError, DegenerateGradientError, TrainingDivergedError
from .poisoning import BadNetsPoisoner, Poisoner, poisoner_config
from .threats import LinfPGD
from .training import AdversarialTrainer, StandardTrainer


def per_sample_grad_norms(model, data: LabeledDataset, indices: torch.Tensor,
                          batch_size: int = 256) -> torch.Tensor:
    """L2 norm of the per-example parameter gradient for selected samples."""
    from torch.func import functional_call, grad, vmap

    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}
    was_training = model.training
    model.eval()

    def sample_loss(p, xi, yi):
        logits = functional_call(model, (p, buffers), (xi.unsqueeze(0),))
        return F.cross_entropy(logits, yi.unsqueeze(0))

    norms = []
    for i in range(0, len(indices), batch_size):
        idx = indices[i:i + batch_size]
        g = vmap(grad(sample_loss), in_dims=(None, 0, 0))(
            params, data.images[idx], data.labels[idx])
        sq = None
        for t in g.values():
            s = t.reshape(t.shape[0], -1).pow(2).sum(dim=1)
            sq = s if sq is None else sq + s
        norms.append(sq.sqrt())
    if was_training:
        model.train()
    return torch.cat(norms)


def select_poison_targets(data: LabeledDataset, model, target_class: int,
                          budget: int) -> torch.Tensor:
    """The `budget` target-class samples with the largest gradient norms.

    Ties break toward the smaller dataset index.
    """
    pool = (data.labels == target_class).nonzero().flatten()
    if len(pool) < budget:
        raise ValueError(f"need {budget} samples of class {target_class}, have {len(pool)}")
    norms = per_sample_grad_norms(model, data, pool)
    order = torch.argsort(-norms, stable=True)
    return torch.sort(pool[order[:budget]]).values


def _param_grads(model, x, y, create_graph: bool = False) -> list[torch.Tensor]:
    loss = F.cross_entropy(model(x), y)
    return list(torch.autograd.grad(loss, list(model.parameters()),
                                    create_graph=create_graph))


def _flat_dot(a: list[torch.Tensor], b: list[torch.Tensor]) -> torch.Tensor:
    return sum((ai * bi).sum() for ai, bi in zip(a, b))


def _flat_norm(a: list[torch.Tensor]) -> torch.Tensor:
    return _flat_dot(a, a).sqrt()


def matching_loss_against(model, x_poison, y_poison, target_grads: list[torch.Tensor],
                          target_norm: torch.Tensor, create_graph: bool = True):
    """1 - cosine(poison-batch gradient, fixed target gradient)."""
    poison_grads = _param_grads(model, x_poison, y_poison, create_graph=create_graph)
    poison_norm = _flat_norm(poison_grads)
    if poison_norm.detach().item() == 0.0 or target_norm.detach().item() == 0.0:
        raise DegenerateGradientError("zero-norm gradient in matching objective")
    cos = _flat_dot(poison_grads, target_grads) / (poison_norm * target_norm)
    return 1.0 - cos


def gradient_matching_loss(model, poison_batch: tuple[torch.Tensor, torch.Tensor],
                           target_batch: tuple[torch.Tensor, torch.Tensor]) -> float:
    """Alignment objective between two parameter gradients; in [0, 2].

    0 means the training gradient on the poisons points exactly along the
    gradient of the triggered-objective loss, 2 means exactly against it.
    """
    return float(gradient_matching_diagnostics(model, poison_batch, target_batch)["loss"])


def gradient_matching_diagnostics(model, poison_batch, target_batch) -> dict:
    """Matching loss plus the raw dot product and both gradient norms."""
    x_t, y_t = target_batch
    x_p, y_p = poison_batch
    if len(x_t) == 0 or len(x_p) == 0:
        raise ValueError("both batches must be nonempty")
    was_training = model.training
    model.eval()
    tg = [g.detach() for g in _param_grads(model, x_t, y_t)]
    pg = [g.detach() for g in _param_grads(model, x_p, y_p)]
    if was_training:
        model.train()
    tn, pn = _flat_norm(tg), _flat_norm(pg)
    if float(tn) == 0.0 or float(pn) == 0.0:
        raise DegenerateGradientError("zero-norm gradient in matching objective")
    dot = _flat_dot(tg, pg)
    return {"loss": float(1.0 - dot / (tn * pn)), "dot": float(dot),
            "target_norm": float(tn), "poison_norm": float(pn)}


def retrain_rounds(steps: int, retrain_factor: int) -> list[int]:
    """Crafting rounds at which the surrogate is retrained."""
    interval = steps // (retrain_factor + 1)
    if interval == 0:
        return []
    return [r for r in range(interval, steps + 1, interval) if r != steps]


class SignedAdam:
    """Adam moment tracking with the update replaced by its sign times lr."""

    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = torch.zeros(shape)
        self.v = torch.zeros(shape)
        self.t = 0

    def step(self, value: torch.Tensor, grad: torch.Tensor, lr_scale: float = 1.0):
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        update = m_hat / (v_hat.sqrt() + self.eps)
        return value - self.lr * lr_scale * update.sign()


class AdaptivePoisonCrafter(BaseEstimator):
    """Gradient-matching poison crafting with periodic robust retraining.

    `fit(data)` trains a clean surrogate, picks floor(rate * n) target-class
    samples by gradient norm, and optimizes box-bounded deltas for `steps`
    rounds of signed Adam, retraining the surrogate `retrain_factor` times
    along the way with the given inner budget. `transform(data)` applies the
    crafted deltas so the result replays through the normal pipeline.
    """

    def __init__(self, poisoner: Poisoner | None = None, rate: float = 0.01,
                 delta_max: float = 16 / 255, at_eps: float = 8 / 255, steps: int = 250,
                 retrain_factor: int = 4, lr: float = 1 / 255, betas=(0.9, 0.999),
                 surrogate_epochs: int = 10, retrain_epochs: int | None = None,
                 target_sample_cap: int = 1024, arch: str = "small-cnn",
                 batch_size: int = 128, seed: int = 0, device: str | None = None):
        self.poisoner = poisoner
        self.rate = rate
        self.delta_max = delta_max
        self.at_eps = at_eps
        self.steps = steps
        self.retrain_factor = retrain_factor
        self.lr = lr
        self.betas = betas
        self.surrogate_epochs = surrogate_epochs
        self.retrain_epochs = retrain_epochs
        self.target_sample_cap = target_sample_cap
        self.arch = arch
        self.batch_size = batch_size
        self.seed = seed
        self.device = device

    def _poisoner(self) -> Poisoner:
        return self.poisoner if self.poisoner is not None else BadNetsPoisoner(
            rate=self.rate, label_mode="dirty", seed=self.seed)

    def _trainer(self, epochs: int, seed: int):
        common = dict(arch=self.arch, epochs=epochs, batch_size=self.batch_size,
                      decay_epochs=(), seed=seed, device=self.device)
        if self.at_eps > 0:
            return AdversarialTrainer(threat=LinfPGD(eps=self.at_eps, steps=7), **common)
        return StandardTrainer(**common)

    def _target_batch(self, data: LabeledDataset, trig: Poisoner):
        n = len(data)
        g = torch.Generator().manual_seed(self.seed * 8 + 7)
        if n > self.target_sample_cap:
            idx = torch.randperm(n, generator=g)[:self.target_sample_cap]
        else:
            idx = torch.arange(n)
        x = trig.apply_trigger(data.images[idx])
        y = torch.full((len(idx),), trig.target_class, dtype=torch.long)
        return x, y

    def _project(self, delta: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        delta = delta.clamp(-self.delta_max, self.delta_max)
        return (base + delta).clamp(0.0, 1.0) - base

    def fit(self, data: LabeledDataset, y=None):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.retrain_factor < 0:
            raise ValueError("retrain_factor must be >= 0")
        trig = self._poisoner()

        surrogate = StandardTrainer(arch=self.arch, epochs=self.surrogate_epochs,
                                    decay_epochs=(), batch_size=self.batch_size,
                                    seed=self.seed, device=self.device).fit(data).model_

        budget = math.floor(self.rate * len(data))
        indices = select_poison_targets(data, surrogate, trig.target_class, budget)
        base = data.images[indices]
        labels = data.labels[indices]

        g = torch.Generator().manual_seed(self.seed * 8 + 6)
        delta = (torch.rand(base.shape, generator=g) * 2 - 1) * self.delta_max
        delta = self._project(delta, base)

        x_t, y_t = self._target_batch(data, trig)
        surrogate.eval()
        target_grads = [t.detach() for t in _param_grads(surrogate, x_t, y_t)]
        target_norm = _flat_norm(target_grads)

        optimizer = SignedAdam(delta.shape, lr=self.lr, betas=self.betas)
        rounds = retrain_rounds(self.steps, self.retrain_factor)
        retrain_epochs = self.retrain_epochs
        if retrain_epochs is None:
            retrain_epochs = max(1, self.surrogate_epochs // 4)

        history = []
        for r in range(1, self.steps + 1):
            d = delta.clone().requires_grad_(True)
            loss = matching_loss_against(surrogate, base + d, labels,
                                         target_grads, target_norm)
            grad_d = torch.autograd.grad(loss, d)[0]
            history.append(loss.detach().item())
            lr_scale = 0.1 if r >= 0.75 * self.steps else 1.0
            delta = optimizer.step(delta, grad_d, lr_scale).detach()
            delta = self._project(delta, base)

            if r in rounds:
                poisoned = self._apply(data, indices, delta)
                try:
                    surrogate = self._trainer(retrain_epochs, self.seed + r).fit(poisoned).model_
                except TrainingDivergedError as exc:
                    raise AttackError(r, f"surrogate retraining diverged: {exc}") from exc
                surrogate.eval()
                target_grads = [t.detach() for t in _param_grads(surrogate, x_t, y_t)]
                target_norm = _flat_norm(target_grads)

        final = matching_loss_against(surrogate, base + delta, labels,
                                      target_grads, target_norm, create_graph=False)
        history.append(float(final))

        self.deltas_ = delta.detach()
        self.indices_ = indices
        self.surrogate_ = surrogate
        self.matching_history_ = history
        return self

    def _apply(self, data: LabeledDataset, indices: torch.Tensor,
               deltas: torch.Tensor) -> LabeledDataset:
        out = data.clone()
        out.images[indices] = (out.images[indices] + deltas).clamp(0.0, 1.0)
        out.poisoned[indices] = True
        return out

    def transform(self, data: LabeledDataset) -> LabeledDataset:
        """Apply the crafted deltas; all other samples stay bitwise unchanged."""
        return self._apply(data, self.indices_, self.deltas_)

    def attack_config(self) -> dict:
        cfg = {"kind": "adaptive", "trigger": poisoner_config(self._poisoner())}
        for key, value in self.get_params().items():
            if isinstance(value, (int, float, str, bool)) or value is None:
                cfg[key] = value
            elif isinstance(value, (list, tuple)):
                cfg[key] = list(value)
        return cfg


def save_deltas(path_prefix: str, deltas: torch.Tensor, indices: torch.Tensor) -> tuple[str, str]:
    """Persist deltas as a tensor blob plus the sidecar index file."""
    from .data import write_index_file
    blob = path_prefix + "_deltas.pt"
    sidecar = path_prefix + "_indices.txt"
    torch.save(deltas, blob)
    write_index_file(indices.tolist(), sidecar)
    return blob, sidecar


def load_deltas(blob: str, sidecar: str) -> tuple[torch.Tensor, torch.Tensor]:
    from .data import read_index_file
    deltas = torch.load(blob, map_location="cpu", weights_only=True)
    indices = torch.tensor(read_index_file(sidecar), dtype=torch.long)
    return deltas, indices
