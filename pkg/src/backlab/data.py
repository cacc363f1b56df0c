"""Datasets, CIFAR binary ingestion, and synthetic desk-scale data.

Images are float32 tensors shaped (n, c, h, w) with every value in [0, 1].
Any mean/std normalization happens inside the model forward, never here, so
perturbation budgets stay in pixel units (fractions of 255).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch

from .errors import FormatError

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass
class LabeledDataset:
    """A batch of labeled images plus per-sample poisoning provenance.

    Attributes:
        images: float tensor (n, c, h, w), values in [0, 1].
        labels: int64 tensor (n,), class ids in [0, num_classes).
        num_classes: number of classes.
        split: "train" or "test".
        poisoned: bool tensor (n,), True for samples a poisoner modified.
        original_labels: int64 tensor (n,), labels before any relabeling.
    """

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    split: str = "train"
    poisoned: torch.Tensor = field(default=None)  # type: ignore[assignment]
    original_labels: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ValueError("labels must be 1-d and match the batch dimension")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        self.images = self.images.float()
        self.labels = self.labels.long()
        if self.poisoned is None:
            self.poisoned = torch.zeros(len(self.labels), dtype=torch.bool)
        if self.original_labels is None:
            self.original_labels = self.labels.clone()

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def clone(self) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images.clone(),
            labels=self.labels.clone(),
            num_classes=self.num_classes,
            split=self.split,
            poisoned=self.poisoned.clone(),
            original_labels=self.original_labels.clone(),
        )

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            split=self.split,
            poisoned=self.poisoned[idx],
            original_labels=self.original_labels[idx],
        )


def load_cifar(path: str, split: str = "train", num_classes: int = 10,
               image_size: tuple[int, int] = (32, 32), channels: int = 3) -> LabeledDataset:
    """Load a dataset stored in the CIFAR binary batch layout.

    Each record is 1 label byte followed by c*h*w pixel bytes (channel-major,
    row-major within a channel). Pixels map to [0, 1] via division by 255 and
    sample order equals file order.

    `path` may be a single .bin file or a directory containing the standard
    CIFAR-10 batch files for the requested split.

    Raises:
        FormatError: truncated records or label bytes >= num_classes.
    """
    if os.path.isdir(path):
        names = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
        files = [os.path.join(path, n) for n in names]
        missing = [f for f in files if not os.path.exists(f)]
        if missing:
            raise FormatError(f"missing CIFAR batch files: {missing}")
    else:
        files = [path]

    h, w = image_size
    record = 1 + channels * h * w
    images, labels = [], []
    for f in files:
        with open(f, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % record != 0:
            raise FormatError(f"{f}: size {len(raw)} is not a multiple of record length {record}")
        buf = torch.frombuffer(bytearray(raw), dtype=torch.uint8).view(-1, record)
        lab = buf[:, 0].long()
        if int(lab.max()) >= num_classes:
            raise FormatError(f"{f}: label byte {int(lab.max())} out of range [0, {num_classes})")
        img = buf[:, 1:].reshape(-1, channels, h, w).float() / 255.0
        images.append(img)
        labels.append(lab)

    return LabeledDataset(images=torch.cat(images), labels=torch.cat(labels),
                          num_classes=num_classes, split=split)


def save_cifar(data: LabeledDataset, path: str) -> None:
    """Write a dataset in the CIFAR binary batch layout (single file).

    Pixel values are quantized with round(v * 255); datasets that came from
    this layout round-trip bit-exactly.
    """
    imgs = (data.images.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    flat = imgs.reshape(len(data), -1)
    lab = data.labels.to(torch.uint8).unsqueeze(1)
    records = torch.cat([lab, flat], dim=1)
    with open(path, "wb") as fh:
        fh.write(records.numpy().tobytes())


def write_index_file(indices, path: str) -> None:
    """Write a sidecar index file: one integer position per line."""
    idx = [int(i) for i in indices]
    with open(path, "w") as fh:
        fh.write("\n".join(str(i) for i in idx))
        if idx:
            fh.write("\n")


def read_index_file(path: str) -> list[int]:
    with open(path) as fh:
        return [int(line) for line in fh.read().split()]


def _smooth_field(shape: tuple[int, ...], grid: int, generator: torch.Generator) -> torch.Tensor:
    """Low-frequency random field in [-1, 1], bicubic upsample of a coarse grid."""
    c, h, w = shape
    coarse = torch.rand((1, c, grid, grid), generator=generator) * 2.0 - 1.0
    up = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)
    return up[0].clamp(-1.0, 1.0)


def make_synthetic(num_classes: int, per_class: int, size: tuple[int, int] = (32, 32),
                   seed: int = 0, channels: int = 3, noise: float = 0.12,
                   contrast: float = 0.35, noise_grid: int | None = None,
                   split: str = "train") -> LabeledDataset:
    """Generate class-separable Gaussian-blob images, deterministic under seed.

    Each class gets a fixed smooth prototype image drawn from `seed`; samples
    are the prototype plus Gaussian noise, clipped to [0, 1]. The train and
    test splits of the same seed share prototypes (the same underlying task)
    but draw disjoint noise. `noise` and `contrast` control how hard the
    classification problem is; `noise_grid` draws the noise on a coarse grid
    and upsamples it, giving locally smooth images like natural photos
    (per-pixel noise makes tiny spatial warps act like huge pixel noise).
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    h, w = size
    g = torch.Generator().manual_seed(seed)
    protos = []
    for _ in range(num_classes):
        protos.append(0.5 + contrast * _smooth_field((channels, h, w), grid=4, generator=g))
    protos = torch.stack(protos).clamp(0.0, 1.0)

    g_noise = g if split == "train" else torch.Generator().manual_seed(seed + 9973)
    n = num_classes * per_class
    if noise_grid is None:
        field = torch.randn((n, channels, h, w), generator=g_noise)
    else:
        coarse = torch.randn((n, channels, noise_grid, noise_grid), generator=g_noise)
        field = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bicubic",
                                                align_corners=True)
        field = field / field.std(dim=(1, 2, 3), keepdim=True).clamp_min(1e-8)
    images = protos.repeat_interleave(per_class, dim=0) + noise * field
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    return LabeledDataset(images=images.clamp(0.0, 1.0), labels=labels,
                          num_classes=num_classes, split=split)


def augment_batch(x: torch.Tensor, generator: torch.Generator,
                  random_crop: bool = True, horizontal_flip: bool = True,
                  pad: int = 4) -> torch.Tensor:
    """Random crop (reflection padding) and horizontal flip for a batch.

    Pure given the generator; labels are untouched and values stay in [0, 1].
    """
    n, _, h, w = x.shape
    out = x
    if random_crop:
        padded = torch.nn.functional.pad(out, (pad, pad, pad, pad), mode="reflect")
        offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
        rows = offs[:, 0, None] + torch.arange(h)
        cols = offs[:, 1, None] + torch.arange(w)
        bi = torch.arange(n)[:, None, None]
        out = padded[bi, :, rows[:, :, None], cols[:, None, :]]
        # advanced indexing puts channels last; restore (n, c, h, w)
        out = out.permute(0, 3, 1, 2).contiguous()
    if horizontal_flip:
        flip = torch.rand(n, generator=generator) < 0.5
        out = out.clone() if out is x else out
        out[flip] = torch.flip(out[flip], dims=(3,))
    return out
