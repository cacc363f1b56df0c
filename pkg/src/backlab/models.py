"""Classifier architectures, parameter flattening, and checkpoint files.

Both architectures accept images in [0, 1] and apply their own mean/std
normalization in forward, keeping perturbation budgets in pixel units.
They expose `feature_maps` (per-block activations) for perceptual attacks,
and a `norm_kind` attribute ("batch" or "group") that DPSGD checks.
"""

from __future__ import annotations

import io
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapabilityError, FormatError

CHECKPOINT_VERSION = 1

# CIFAR-10 statistics; an affine transform inside forward, harmless elsewhere.
_MEAN = (0.4914, 0.4822, 0.4465)
_STD = (0.2470, 0.2435, 0.2616)


def _norm_layer(kind: str, width: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(width)
    if kind == "group":
        return nn.GroupNorm(num_groups=min(8, width), num_channels=width)
    raise ValueError(f"unknown norm kind {kind!r}")


class _Normalize(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels == 3:
            mean, std = _MEAN, _STD
        else:
            mean, std = (0.5,) * channels, (0.25,) * channels
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class SmallCNN(nn.Module):
    """Three conv blocks plus a linear head; the desk-scale architecture."""

    def __init__(self, num_classes: int = 10, channels: int = 3, norm_kind: str = "batch",
                 widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.norm_kind = norm_kind
        self.normalize = _Normalize(channels)
        blocks = []
        c_in = channels
        for c_out in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, bias=False),
                _norm_layer(norm_kind, c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(widths[-1], num_classes)

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        out = self.normalize(x)
        for block in self.blocks:
            out = block(out)
            feats.append(out)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.feature_maps(x)[-1]
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, norm_kind: str):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.n1 = _norm_layer(norm_kind, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.n2 = _norm_layer(norm_kind, c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                _norm_layer(norm_kind, c_out),
            )

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no max-pool)."""

    def __init__(self, num_classes: int = 10, channels: int = 3, norm_kind: str = "batch"):
        super().__init__()
        self.num_classes = num_classes
        self.norm_kind = norm_kind
        self.normalize = _Normalize(channels)
        self.conv1 = nn.Conv2d(channels, 64, 3, stride=1, padding=1, bias=False)
        self.n1 = _norm_layer(norm_kind, 64)
        widths = (64, 128, 256, 512)
        strides = (1, 2, 2, 2)
        layers = []
        c_in = 64
        for c_out, s in zip(widths, strides):
            layers.append(nn.Sequential(
                _ResBlock(c_in, c_out, s, norm_kind),
                _ResBlock(c_out, c_out, 1, norm_kind),
            ))
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(widths[-1], num_classes)

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        out = F.relu(self.n1(self.conv1(self.normalize(x))))
        for layer in self.layers:
            out = layer(out)
            feats.append(out)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.feature_maps(x)[-1]
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


ARCHITECTURES = {
    "small-cnn": lambda num_classes, channels: SmallCNN(num_classes, channels, "batch"),
    "small-cnn-groupnorm": lambda num_classes, channels: SmallCNN(num_classes, channels, "group"),
    "resnet18": lambda num_classes, channels: ResNet18(num_classes, channels, "batch"),
    "resnet18-groupnorm": lambda num_classes, channels: ResNet18(num_classes, channels, "group"),
}


@contextmanager
def _forked_seed(seed: int):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        yield


def build_model(arch: str, num_classes: int = 10, channels: int = 3,
                seed: int | None = None) -> nn.Module:
    """Instantiate an architecture by id, with seed-deterministic init."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    if seed is None:
        model = ARCHITECTURES[arch](num_classes, channels)
    else:
        with _forked_seed(seed):
            model = ARCHITECTURES[arch](num_classes, channels)
    model.arch = arch
    model.in_channels = channels
    return model


def get_flat_params(model: nn.Module) -> torch.Tensor:
    """Concatenate all parameters into one vector (detached copy)."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_params(model: nn.Module, flat: torch.Tensor) -> None:
    """Write a flat vector back into the parameters, bit-exactly."""
    offset = 0
    for p in model.parameters():
        n = p.numel()
        with torch.no_grad():
            p.copy_(flat[offset:offset + n].view_as(p))
        offset += n
    if offset != flat.numel():
        raise ValueError(f"parameter vector length {flat.numel()} != model size {offset}")


def get_flat_buffers(model: nn.Module) -> torch.Tensor:
    bufs = [b.detach().reshape(-1).float() for b in model.buffers()]
    return torch.cat(bufs) if bufs else torch.zeros(0)


def set_flat_buffers(model: nn.Module, flat: torch.Tensor) -> None:
    offset = 0
    for b in model.buffers():
        n = b.numel()
        with torch.no_grad():
            b.copy_(flat[offset:offset + n].view_as(b).to(b.dtype))
        offset += n


def feature_maps(model: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    """Internal activations for perceptual distance; CapabilityError if absent."""
    fn = getattr(model, "feature_maps", None)
    if fn is None:
        raise CapabilityError(f"{type(model).__name__} does not expose feature_maps")
    return fn(x)


def has_batchnorm(model: nn.Module) -> bool:
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in model.modules())


def predict_logits(model: nn.Module, images: torch.Tensor, batch_size: int = 256,
                   device: str | torch.device | None = None) -> torch.Tensor:
    """Batched forward pass in eval mode; returns logits on the CPU."""
    if device is not None:
        dev = device
    else:
        param = next(model.parameters(), None)
        dev = param.device if param is not None else images.device
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(images[i:i + batch_size].to(dev)).cpu())
    if was_training:
        model.train()
    return torch.cat(outs) if outs else torch.zeros(0, getattr(model, "num_classes", 0))


def save_checkpoint(path: str, model: nn.Module, epoch: int = 0,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    """Persist arch id + flat parameter vector + training-state header."""
    moments = None
    if optimizer is not None:
        bufs = []
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p, {})
                mb = state.get("momentum_buffer")
                bufs.append(mb.reshape(-1) if mb is not None else torch.zeros(p.numel()))
        moments = torch.cat(bufs) if bufs else torch.zeros(0)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": getattr(model, "arch", type(model).__name__),
        "num_classes": model.num_classes,
        "channels": getattr(model, "in_channels", 3),
        "params": get_flat_params(model).cpu(),
        "buffers": get_flat_buffers(model).cpu(),
        "epoch": epoch,
        "moments": moments,
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[nn.Module, dict]:
    """Rebuild the model from a checkpoint; returns (model, header)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = build_model(payload["arch"], payload["num_classes"], payload["channels"])
    set_flat_params(model, payload["params"])
    set_flat_buffers(model, payload["buffers"])
    header = {"epoch": payload["epoch"], "arch": payload["arch"], "moments": payload["moments"]}
    return model, header


def checkpoint_bytes(model: nn.Module, epoch: int = 0) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, model, epoch)  # type: ignore[arg-type]
    return buf.getvalue()
