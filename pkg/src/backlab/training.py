"""Training engines: standard SGD, single-threat robust training, and the
composite variant that mixes two perturbation sets in one run.

All trainers share one loop so that degenerate settings collapse exactly:
a zero-budget robust trainer consumes the same RNG streams as the standard
trainer and reproduces its parameters bit for bit under a shared seed.
Robust batches are built from the current parameter snapshot (attacks run
in eval mode and never mutate parameters); there is exactly one optimizer
step per batch in every composition mode.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, clone

from .data import LabeledDataset, augment_batch
from .errors import SolverError, TrainingDivergedError
from .evaluation import Stopwatch, attack_success_rate, clean_accuracy, new_record
from .models import build_model, predict_logits
from .threats import ThreatModel, threat_config


def _gen(seed: int, salt: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 4 + salt)


class TrainerBase(BaseEstimator):
    """Shared SGD loop; subclasses override the per-batch perturbation hook."""

    kind = "standard"

    def __init__(self, arch: str = "small-cnn", epochs: int = 100, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4,
                 decay_epochs: tuple[int, ...] = (60, 90), batch_size: int = 128,
                 random_crop: bool = True, horizontal_flip: bool = True,
                 seed: int = 0, device: str | None = None, init_model=None):
        self.arch = arch
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_epochs = decay_epochs
        self.batch_size = batch_size
        self.random_crop = random_crop
        self.horizontal_flip = horizontal_flip
        self.seed = seed
        self.device = device
        self.init_model = init_model

    # -- configuration ----------------------------------------------------

    def _validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        dec = list(self.decay_epochs)
        if any(b <= a for a, b in zip(dec, dec[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.epochs > 0 and any(e >= self.epochs for e in dec):
            raise ValueError("decay_epochs must lie before the last epoch")

    def _device(self) -> torch.device:
        if self.device is not None:
            return torch.device(self.device)
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")

    def defense_config(self) -> dict:
        cfg = {"kind": self.kind}
        for key, value in self.get_params().items():
            if key == "init_model":
                continue
            if isinstance(value, ThreatModel):
                cfg[key.rstrip("_")] = threat_config(value)
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], ThreatModel):
                cfg[key] = [threat_config(t) for t in value]
            elif isinstance(value, (int, float, str, bool)) or value is None:
                cfg[key] = value
            elif isinstance(value, (list, tuple)):
                cfg[key] = list(value)
        return cfg

    # -- hooks -------------------------------------------------------------

    def _prepare(self, data: LabeledDataset):
        """Subclass setup before the epoch loop (e.g. solver state)."""

    def _batch_inputs(self, model, x, y, step: int, g_attack) -> torch.Tensor:
        return x

    def _loss(self, model, x, y, index) -> torch.Tensor:
        return F.cross_entropy(model(x), y)

    def _update(self, model, optimizer, x, y, index) -> float:
        loss = self._loss(model, x, y, index)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(self._epoch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        return loss.item()

    def _on_epoch_end(self, model, data: LabeledDataset, epoch: int):
        """Stage transitions (e.g. poison isolation) hook."""

    # -- main loop ----------------------------------------------------------

    def _epoch_lr(self, epoch: int) -> float:
        drops = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * (0.1 ** drops)

    def fit(self, data: LabeledDataset, y=None, eval_data: LabeledDataset | None = None,
            poisoner=None, eval_every: int = 1):
        """Train on `data`; optionally track ACC/ASR on `eval_data` per epoch."""
        if len(data) == 0:
            raise ValueError("training data is empty")
        self._validate()
        dev = self._device()

        if self.init_model is not None:
            import copy
            model = copy.deepcopy(self.init_model)
        else:
            model = build_model(self.arch, data.num_classes, data.channels, seed=self.seed)
        model = model.to(dev)

        g_shuffle = _gen(self.seed, 1)
        g_aug = _gen(self.seed, 2)
        g_attack = _gen(self.seed, 3)

        optimizer = torch.optim.SGD(model.parameters(), lr=self.lr,
                                    momentum=self.momentum, weight_decay=self.weight_decay)
        self._prepare(data)

        history = {"epoch": [], "loss": [], "acc": [], "asr": []}
        n = len(data)
        step = 0
        for epoch in range(self.epochs):
            self._epoch = epoch
            lr_now = self._epoch_lr(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            model.train()
            perm = torch.randperm(n, generator=g_shuffle)
            epoch_loss, seen = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                x = data.images[idx]
                yb = data.labels[idx].to(dev)
                if self.random_crop or self.horizontal_flip:
                    x = augment_batch(x, g_aug, self.random_crop, self.horizontal_flip)
                x = x.to(dev)
                try:
                    x = self._batch_inputs(model, x, yb, step, g_attack)
                except SolverError as exc:
                    raise SolverError(f"inner solver failed at step {step}: {exc}") from exc
                model.train()
                epoch_loss += self._update(model, optimizer, x, yb, idx) * len(idx)
                seen += len(idx)
                step += 1
            self._on_epoch_end(model, data, epoch)

            history["epoch"].append(epoch)
            history["loss"].append(epoch_loss / max(seen, 1))
            if eval_data is not None and (epoch % eval_every == 0 or epoch == self.epochs - 1):
                history["acc"].append(clean_accuracy(model, eval_data, device=dev))
                if poisoner is not None:
                    history["asr"].append(attack_success_rate(model, eval_data, poisoner,
                                                              device=dev))

        model.eval()
        self.model_ = model
        self.optimizer_ = optimizer
        self.history_ = history
        self.final_epoch_ = self.epochs
        return self

    # -- inference ----------------------------------------------------------

    def predict_logits(self, images: torch.Tensor) -> torch.Tensor:
        return predict_logits(self.model_, images, device=self._device())

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict_logits(images).argmax(dim=1)

    def score(self, data: LabeledDataset, y=None) -> float:
        return clean_accuracy(self.model_, data, device=self._device()) / 100.0


class StandardTrainer(TrainerBase):
    """Plain SGD with the usual momentum / weight-decay / step-decay recipe."""

    kind = "standard"


class AdversarialTrainer(TrainerBase):
    """Robust training: every batch is perturbed by one threat-model solver
    at the current parameter snapshot before the SGD step."""

    kind = "at"

    def __init__(self, threat: ThreatModel | None = None, arch: str = "small-cnn",
                 epochs: int = 30, lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 5e-4, decay_epochs: tuple[int, ...] = (60, 90),
                 batch_size: int = 128, random_crop: bool = True,
                 horizontal_flip: bool = True, seed: int = 0,
                 device: str | None = None, init_model=None):
        super().__init__(arch, epochs, lr, momentum, weight_decay, decay_epochs,
                         batch_size, random_crop, horizontal_flip, seed, device, init_model)
        self.threat = threat

    def _attack(self, threat, model, x, y, g_attack):
        model.eval()
        adv = threat.perturb(model, x, y, generator=g_attack)
        model.train()
        return adv.detach()

    def _batch_inputs(self, model, x, y, step, g_attack):
        if self.threat is None:
            raise ValueError("AdversarialTrainer requires a threat model")
        return self._attack(self.threat, model, x, y, g_attack)


class CompositeAdversarialTrainer(AdversarialTrainer):
    """Robust training against several perturbation sets in one run.

    batch_split partitions every batch evenly and perturbs each part with a
    different threat model before a joint step; step_alternate cycles the
    threat model across optimizer steps on full batches. Either way there is
    one parameter update per batch.
    """

    kind = "cat"

    def __init__(self, threats: tuple[ThreatModel, ...] | None = None,
                 mode: str = "batch_split", arch: str = "small-cnn", epochs: int = 30,
                 lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 5e-4,
                 decay_epochs: tuple[int, ...] = (60, 90), batch_size: int = 128,
                 random_crop: bool = True, horizontal_flip: bool = True,
                 seed: int = 0, device: str | None = None, init_model=None):
        super().__init__(None, arch, epochs, lr, momentum, weight_decay, decay_epochs,
                         batch_size, random_crop, horizontal_flip, seed, device, init_model)
        self.threats = threats
        self.mode = mode

    def _validate(self):
        super()._validate()
        if not self.threats:
            raise ValueError("CompositeAdversarialTrainer needs at least one threat model")
        if self.mode not in ("batch_split", "step_alternate"):
            raise ValueError("mode must be 'batch_split' or 'step_alternate'")
        if self.mode == "batch_split" and self.batch_size % len(self.threats) != 0:
            raise ValueError("batch_split needs batch_size divisible by the threat count")

    def _batch_inputs(self, model, x, y, step, g_attack):
        threats = list(self.threats)
        if self.mode == "step_alternate":
            return self._attack(threats[step % len(threats)], model, x, y, g_attack)
        parts_x = torch.tensor_split(x, len(threats))
        parts_y = torch.tensor_split(y, len(threats))
        out = [self._attack(t, model, px, py, g_attack) if len(px) else px
               for t, px, py in zip(threats, parts_x, parts_y)]
        return torch.cat(out)


def default_composite(eps_linf: float = 2 / 255, eps_spatial: float = 0.025,
                      steps: int = 10, **trainer_params) -> CompositeAdversarialTrainer:
    """The recommended two-threat configuration: small L-inf plus small warp."""
    from .threats import LinfPGD, SpatialAttack
    return CompositeAdversarialTrainer(
        threats=(LinfPGD(eps=eps_linf, steps=steps), SpatialAttack(eps=eps_spatial, steps=steps)),
        **trainer_params)


def evaluate_pair_matrix(attacks: list, defenses: list, train_data: LabeledDataset,
                         test_data: LabeledDataset, eval_curves: bool = False) -> list:
    """Train and evaluate every (poisoner, trainer) pair.

    Returns one RunRecord per cell; a failed cell yields a record with an
    "error" extra and the matrix keeps going.
    """
    from .poisoning import poisoner_config

    if not attacks or not defenses:
        raise ValueError("attacks and defenses must be nonempty")
    records = []
    for poisoner in attacks:
        for trainer in defenses:
            atk_cfg = poisoner_config(poisoner)
            def_cfg = trainer.defense_config()
            seed = trainer.get_params().get("seed", 0)
            try:
                with Stopwatch() as timer:
                    poisoned = poisoner.fit(train_data).transform(train_data)
                    fitted = clone(trainer)
                    fitted.fit(poisoned,
                               eval_data=test_data if eval_curves else None,
                               poisoner=poisoner if eval_curves else None)
                    acc = clean_accuracy(fitted.model_, test_data)
                    asr = attack_success_rate(fitted.model_, test_data, poisoner)
                records.append(new_record(atk_cfg, def_cfg, acc, asr, seed,
                                          curves=fitted.history_,
                                          wall_clock_s=timer.seconds))
            except Exception as exc:  # record and continue
                records.append(new_record(atk_cfg, def_cfg, 0.0, 0.0, seed,
                                          extras={"error": f"{type(exc).__name__}: {exc}"}))
    return records
