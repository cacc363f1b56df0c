"""Metrics and persisted run records.

ACC is the percent of clean test samples classified correctly. ASR is the
percent of triggered test samples predicted as the target class, where the
triggered set excludes samples whose true class already is the target (see
`Poisoner.transform_test`); sample labels play no role beyond that
exclusion. Both are pure functions of (parameters, data, spec).
"""

from __future__ import annotations

import hashlib
import json
import time
import uuid
from dataclasses import dataclass, field

import torch

from .data import LabeledDataset
from .models import predict_logits


def clean_accuracy(model, test: LabeledDataset, batch_size: int = 256,
                   device=None) -> float:
    """Percent of argmax-correct predictions on an unmodified test set."""
    if len(test) == 0:
        raise ValueError("empty test set")
    preds = predict_logits(model, test.images, batch_size, device).argmax(dim=1)
    return 100.0 * (preds == test.labels).float().mean().item()


def attack_success_rate(model, test: LabeledDataset, poisoner,
                        batch_size: int = 256, device=None) -> float:
    """Percent of triggered non-target-class samples predicted as the target."""
    triggered = poisoner.transform_test(test)
    return asr_on_triggered(model, triggered, poisoner.target_class, batch_size, device)


def asr_on_triggered(model, triggered: LabeledDataset, target_class: int,
                     batch_size: int = 256, device=None) -> float:
    """ASR over an already-triggered set; labels in the set are ignored."""
    if len(triggered) == 0:
        raise ValueError("triggered test set is empty (all samples were target class?)")
    preds = predict_logits(model, triggered.images, batch_size, device).argmax(dim=1)
    return 100.0 * (preds == target_class).float().mean().item()


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (torch.Tensor,)):
        return obj.tolist()
    return obj


def config_hash(attack: dict, defense: dict, seed: int, dataset: dict | None = None) -> str:
    """Deterministic hash of the canonicalized experiment configuration."""
    payload = {"attack": _canonical(attack or {}), "defense": _canonical(defense or {}),
               "seed": seed, "dataset": _canonical(dataset or {})}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunRecord:
    """One experiment result: configs, final metrics, per-epoch curves."""

    run_id: str
    config_hash: str
    attack: dict
    defense: dict
    acc: float
    asr: float
    curves: dict = field(default_factory=lambda: {"epoch": [], "acc": [], "asr": [], "loss": []})
    seed: int = 0
    wall_clock_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "asr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")

    def to_dict(self) -> dict:
        out = {"run_id": self.run_id, "config_hash": self.config_hash,
               "attack": self.attack, "defense": self.defense,
               "acc": self.acc, "asr": self.asr, "curves": self.curves,
               "seed": self.seed, "wall_clock_s": self.wall_clock_s}
        if self.extras:
            out["extras"] = self.extras
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(run_id=d["run_id"], config_hash=d["config_hash"], attack=d["attack"],
                   defense=d["defense"], acc=d["acc"], asr=d["asr"], curves=d["curves"],
                   seed=d["seed"], wall_clock_s=d["wall_clock_s"],
                   extras=d.get("extras", {}))

    @classmethod
    def from_json(cls, blob: str) -> "RunRecord":
        return cls.from_dict(json.loads(blob))


def new_record(attack: dict, defense: dict, acc: float, asr: float, seed: int,
               curves: dict | None = None, wall_clock_s: float = 0.0,
               dataset: dict | None = None, extras: dict | None = None,
               run_id: str | None = None) -> RunRecord:
    h = config_hash(attack, defense, seed, dataset)
    return RunRecord(run_id=run_id or h[:12], config_hash=h, attack=attack, defense=defense,
                     acc=acc, asr=asr,
                     curves=curves or {"epoch": [], "acc": [], "asr": [], "loss": []},
                     seed=seed, wall_clock_s=wall_clock_s, extras=extras or {})


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def _panel_key(record: RunRecord) -> tuple[str, str]:
    attack = record.attack.get("kind", "attack")
    threat = record.extras.get("threat_kind")
    if threat is None:
        threat = record.defense.get("threat", {}).get("kind", record.defense.get("kind", "defense"))
    return attack, threat


def emit_plots(records: list[RunRecord], out_dir: str) -> list[str]:
    """Render ACC/ASR-vs-budget panels plus a CSV of the plotted points.

    Records must share a sweep id. Writes one vector-graphics file and one
    CSV per (attack, threat-model) panel; an empty record list writes
    nothing and returns an empty list so callers can warn.
    """
    import csv
    import os

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        return []
    sweep_ids = {r.extras.get("sweep_id", "") for r in records}
    if len(sweep_ids) > 1:
        raise ValueError(f"records mix sweep ids: {sorted(sweep_ids)}")
    sweep_id = sweep_ids.pop() or uuid.uuid4().hex[:8]

    os.makedirs(out_dir, exist_ok=True)
    panels: dict[tuple[str, str], list[RunRecord]] = {}
    for rec in records:
        panels.setdefault(_panel_key(rec), []).append(rec)

    written = []
    for (attack, threat), recs in panels.items():
        recs = sorted(recs, key=lambda r: r.extras.get("budget", 0.0))
        budgets = [r.extras.get("budget", 0.0) for r in recs]
        accs = [r.acc for r in recs]
        asrs = [r.asr for r in recs]

        stem = f"{sweep_id}_{attack}_{threat}".replace("/", "-")
        csv_path = os.path.join(out_dir, stem + ".csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["budget", "acc", "asr"])
            for b, ac, sr in zip(budgets, accs, asrs):
                writer.writerow([repr(float(b)), repr(float(ac)), repr(float(sr))])
        written.append(csv_path)

        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(budgets, accs, marker="o", label="ACC")
        ax.plot(budgets, asrs, marker="s", label="ASR")
        ax.set_xlabel("perturbation budget")
        ax.set_ylabel("percent")
        ax.set_ylim(-2, 102)
        ax.set_title(f"{attack} vs {threat}")
        ax.legend()
        fig.tight_layout()
        pdf_path = os.path.join(out_dir, stem + ".pdf")
        fig.savefig(pdf_path)
        plt.close(fig)
        written.append(pdf_path)
    return written
