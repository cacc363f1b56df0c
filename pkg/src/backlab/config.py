"""Experiment config files: flat INI-style sections, strictly validated.

Unknown sections or keys are rejected so a typo in a budget never runs
silently with defaults. Values are plain scalars; list values use commas.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .errors import ConfigError

DATA_ROOT_ENV = "BACKLAB_DATA_ROOT"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> list[float]:
    return [float(p) for p in s.split(",") if p.strip()]


def _ints(s: str) -> list[int]:
    return [int(p) for p in s.split(",") if p.strip()]


# key -> (converter, default); None default means "not set"
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "name": (str, "synthetic"),          # synthetic | cifar10 | poisoned
        "path": (str, None),                 # cifar root, or a cmd_poison output dir
        "seed": (int, 0),
        "classes": (int, 10),
        "per_class": (int, 200),
        "test_per_class": (int, 50),
        "height": (int, 32),
        "width": (int, 32),
        "channels": (int, 3),
        "noise": (float, 0.12),
        "contrast": (float, 0.35),
        "noise_grid": (int, None),           # coarse noise grid: locally smooth images
        "subset": (int, None),               # cap on the train split
    },
    "poison": {
        "kind": (str, "badnets"),            # badnets | blended | wanet | lc
        "rate": (float, 0.01),
        "target_class": (int, 2),
        "label_mode": (str, None),           # poisoner default when omitted
        "patch_size": (int, 3),
        "pattern": (str, None),
        "corner": (str, "bottom-right"),
        "alpha": (float, 0.2),
        "grid_k": (int, 4),
        "strength": (float, 0.5),
        "eps": (float, 8 / 255),
        "pgd_steps": (int, 20),
        "pgd_step_size": (float, 2 / 255),
        "surrogate_epochs": (int, 10),
        "seed": (int, 0),
    },
    "defense": {
        "kind": (str, "standard"),           # standard | at | cat | dpsgd | abl
        "arch": (str, "small-cnn"),
        "epochs": (int, 30),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "decay_epochs": (_ints, []),
        "batch_size": (int, 128),
        "random_crop": (_bool, True),
        "horizontal_flip": (_bool, True),
        "seed": (int, 0),
        # single-threat robust training
        "threat": (str, "linf"),
        "threat_eps": (float, 8 / 255),
        "threat_steps": (int, 10),
        "threat_step_size": (float, None),
        "tau": (float, 0.05),
        "lam": (float, 10.0),
        # composite
        "threats": (str, "linf+spatial"),
        "threat_eps_2": (float, 0.025),
        "mode": (str, "batch_split"),
        # dpsgd
        "clip_norm": (float, 1.0),
        "noise_multiplier": (float, 0.1),
        # abl
        "gamma": (float, 0.0),
        "isolation_rate": (float, 0.01),
        "turning_epoch": (int, 20),
        "unlearn_lr": (float, None),
    },
    "eval": {
        "batch_size": (int, 256),
        "checkpoint": (str, None),
        "budgets": (_floats, []),
        "sweep_threat": (str, "linf"),
        "records": (str, None),              # directory of RunRecord JSON files
    },
    "adaptive": {
        "steps": (int, 250),
        "retrain_factor": (int, 4),
        "delta_max": (float, 16 / 255),
        "at_eps": (float, 8 / 255),
        "rate": (float, 0.01),
        "lr": (float, 1 / 255),
        "surrogate_epochs": (int, 10),
        "retrain_epochs": (int, None),
        "target_sample_cap": (int, 1024),
        "seed": (int, 0),
    },
    "output": {
        "dir": (str, "runs/out"),
    },
}


@dataclass
class ExperimentConfig:
    """Parsed and validated config: one dict per section, defaults filled in."""

    dataset: dict = field(default_factory=dict)
    poison: dict = field(default_factory=dict)
    defense: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return getattr(self, name)


def parse_config(path: str) -> ExperimentConfig:
    """Read and strictly validate a config file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        out = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                out[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        setattr(cfg, section, out)

    for section, keys in SCHEMA.items():
        filled = cfg.section(section)
        for key, (_, default) in keys.items():
            if key not in filled and default is not None:
                filled[key] = default

    # dataset root can come from the environment when the path key is absent
    if "path" not in cfg.dataset and os.environ.get(DATA_ROOT_ENV):
        cfg.dataset["path"] = os.environ[DATA_ROOT_ENV]
    return cfg


def build_poisoner(cfg: ExperimentConfig):
    from .poisoning import make_poisoner

    p = cfg.poison
    kind = p["kind"]
    common = {"rate": p["rate"], "target_class": p["target_class"], "seed": p["seed"]}
    if p.get("label_mode"):
        common["label_mode"] = p["label_mode"]
    if kind == "badnets":
        return make_poisoner(kind, patch_size=p["patch_size"],
                             pattern=p.get("pattern") or "checkerboard",
                             corner=p["corner"], **common)
    if kind == "blended":
        return make_poisoner(kind, alpha=p["alpha"],
                             pattern=p.get("pattern") or "smooth", **common)
    if kind == "wanet":
        return make_poisoner(kind, grid_k=p["grid_k"], strength=p["strength"], **common)
    if kind == "lc":
        return make_poisoner(kind, eps=p["eps"], pgd_steps=p["pgd_steps"],
                             pgd_step_size=p["pgd_step_size"], patch_size=p["patch_size"],
                             surrogate_epochs=p["surrogate_epochs"], **common)
    raise ConfigError(f"unknown poison kind {kind!r}")


def build_trainer(cfg: ExperimentConfig, device: str | None = None):
    from .defenses import ABLTrainer, DPSGDTrainer
    from .threats import make_threat
    from .training import AdversarialTrainer, CompositeAdversarialTrainer, StandardTrainer

    d = cfg.defense
    base = dict(arch=d["arch"], epochs=d["epochs"], lr=d["lr"], momentum=d["momentum"],
                weight_decay=d["weight_decay"], decay_epochs=tuple(d["decay_epochs"]),
                batch_size=d["batch_size"], random_crop=d["random_crop"],
                horizontal_flip=d["horizontal_flip"], seed=d["seed"], device=device)
    kind = d["kind"]
    if kind == "standard":
        return StandardTrainer(**base)
    if kind == "at":
        threat = _threat_from(d, d["threat"], d["threat_eps"])
        return AdversarialTrainer(threat=threat, **base)
    if kind == "cat":
        kinds = [k.strip() for k in d["threats"].split("+") if k.strip()]
        if len(kinds) < 1:
            raise ConfigError("cat defense needs at least one threat kind")
        # first threat takes threat_eps, the rest take threat_eps_2
        threats = tuple(_threat_from(d, k, d["threat_eps"] if i == 0 else d["threat_eps_2"])
                        for i, k in enumerate(kinds))
        return CompositeAdversarialTrainer(threats=threats, mode=d["mode"], **base)
    if kind == "dpsgd":
        if "groupnorm" not in d["arch"]:
            base["arch"] = d["arch"] + "-groupnorm"
        return DPSGDTrainer(clip_norm=d["clip_norm"],
                            noise_multiplier=d["noise_multiplier"], **base)
    if kind == "abl":
        return ABLTrainer(gamma=d["gamma"], isolation_rate=d["isolation_rate"],
                          turning_epoch=d["turning_epoch"], unlearn_lr=d.get("unlearn_lr"),
                          **base)
    raise ConfigError(f"unknown defense kind {kind!r}")


def _threat_from(d: dict, kind: str, budget: float):
    from .threats import make_threat

    params: dict = {"steps": d["threat_steps"]}
    if d.get("threat_step_size") is not None:
        params["step_size"] = d["threat_step_size"]
    if kind == "spatial":
        params["tau"] = d["tau"]
    if kind == "perceptual":
        params["lam"] = d["lam"]
        params.pop("step_size", None)
    if kind.startswith("rand"):
        return make_threat(kind, sigma=budget)
    return make_threat(kind, eps=budget, **params)


def load_dataset(cfg: ExperimentConfig, split: str = "train"):
    """Materialize the train or test split the config describes."""
    from .data import load_cifar, make_synthetic

    ds = cfg.dataset
    name = ds.get("name", "synthetic")
    if name == "synthetic":
        per = ds["per_class"] if split == "train" else ds["test_per_class"]
        return make_synthetic(ds["classes"], per, (ds["height"], ds["width"]),
                              seed=ds["seed"], channels=ds["channels"], noise=ds["noise"],
                              contrast=ds["contrast"], noise_grid=ds.get("noise_grid"),
                              split=split)
    if name == "cifar10":
        path = ds.get("path")
        if not path:
            raise ConfigError(f"cifar10 needs dataset.path or ${DATA_ROOT_ENV}")
        data = load_cifar(path, split=split, num_classes=ds["classes"])
        if split == "train" and ds.get("subset"):
            data = data.subset(range(min(ds["subset"], len(data))))
        return data
    if name == "poisoned":
        from .data import read_index_file
        path = ds.get("path")
        if not path or not os.path.isdir(path):
            raise ConfigError("poisoned dataset needs dataset.path pointing at a "
                              "cmd_poison output directory")
        fname = "train.bin" if split == "train" else "test.bin"
        data = load_cifar(os.path.join(path, fname), split=split, num_classes=ds["classes"],
                          image_size=(ds["height"], ds["width"]), channels=ds["channels"])
        if split == "train":
            sidecar = os.path.join(path, "poison_index.txt")
            if os.path.exists(sidecar):
                import torch
                idx = torch.tensor(read_index_file(sidecar), dtype=torch.long)
                if len(idx):
                    data.poisoned[idx] = True
        return data
    raise ConfigError(f"unknown dataset name {name!r}")
