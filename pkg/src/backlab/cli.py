"""Command-line front end.

Subcommands: poison, train, eval, sweep, adaptive, plot. Every run writes
into an output directory with a manifest listing artifact hashes. Exit
codes: 0 success, 1 completed with warnings (e.g. nothing to plot),
2 config/input error, 3 runtime/training error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from .config import ExperimentConfig, build_poisoner, build_trainer, load_dataset, parse_config
from .errors import BacklabError, ConfigError


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, config_hash: str, artifacts: list[str]) -> str:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p) for p in sorted(artifacts)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(out_dir: str) -> bool:
    """Re-hash the listed artifacts; True when everything matches."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    return all(_sha256(os.path.join(out_dir, rel)) == digest
               for rel, digest in manifest["artifacts"].items())


def _config_blob_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps({s: cfg.section(s) for s in
                       ("dataset", "poison", "defense", "eval", "adaptive")},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.out:
        cfg.output["dir"] = args.out
    if args.seed is not None:
        cfg.dataset["seed"] = args.seed
        cfg.poison["seed"] = args.seed
        cfg.defense["seed"] = args.seed
        cfg.adaptive["seed"] = args.seed
    return cfg


def cmd_poison(cfg: ExperimentConfig, device: str | None) -> int:
    from .data import save_cifar, write_index_file

    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    train = load_dataset(cfg, "train")
    test = load_dataset(cfg, "test")
    poisoner = build_poisoner(cfg)
    poisoned = poisoner.fit(train).transform(train)

    train_path = os.path.join(out, "train.bin")
    test_path = os.path.join(out, "test.bin")
    index_path = os.path.join(out, "poison_index.txt")
    spec_path = os.path.join(out, "poison.json")
    save_cifar(poisoned, train_path)
    save_cifar(test, test_path)
    write_index_file(poisoned.poisoned.nonzero().flatten().tolist(), index_path)
    from .poisoning import poisoner_config
    with open(spec_path, "w") as fh:
        json.dump(poisoner_config(poisoner), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "poison", _config_blob_hash(cfg),
                   [train_path, test_path, index_path, spec_path])
    print(f"poisoned {int(poisoned.poisoned.sum())} of {len(poisoned)} samples -> {out}")
    return 0


def _load_poisoned_inputs(cfg: ExperimentConfig):
    """Train/test splits plus the poisoner recorded by cmd_poison."""
    from .poisoning import make_poisoner

    path = cfg.dataset.get("path")
    if cfg.dataset.get("name") == "poisoned" and path:
        spec_path = os.path.join(path, "poison.json")
        if not os.path.exists(spec_path):
            raise ConfigError(f"missing {spec_path}; run the poison subcommand first")
        with open(spec_path) as fh:
            spec = json.load(fh)
        kind = spec.pop("kind")
        spec.pop("surrogate", None)
        poisoner = make_poisoner(kind, **spec)
        return load_dataset(cfg, "train"), load_dataset(cfg, "test"), poisoner
    # inline poisoning: synthetic or raw cifar described directly in the config
    train = load_dataset(cfg, "train")
    test = load_dataset(cfg, "test")
    poisoner = build_poisoner(cfg)
    train = poisoner.fit(train).transform(train)
    return train, test, poisoner


def cmd_train(cfg: ExperimentConfig, device: str | None) -> int:
    from .evaluation import Stopwatch, attack_success_rate, clean_accuracy, new_record
    from .models import save_checkpoint
    from .poisoning import poisoner_config

    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    train, test, poisoner = _load_poisoned_inputs(cfg)
    trainer = build_trainer(cfg, device)

    with Stopwatch() as timer:
        trainer.fit(train, eval_data=test, poisoner=poisoner)
        acc = clean_accuracy(trainer.model_, test)
        asr = attack_success_rate(trainer.model_, test, poisoner)
    record = new_record(poisoner_config(poisoner), trainer.defense_config(), acc, asr,
                        cfg.defense["seed"], curves=trainer.history_,
                        wall_clock_s=timer.seconds)

    ckpt_path = os.path.join(out, "checkpoint.pt")
    rec_path = os.path.join(out, "record.json")
    save_checkpoint(ckpt_path, trainer.model_, epoch=trainer.final_epoch_,
                    optimizer=trainer.optimizer_)
    with open(rec_path, "w") as fh:
        fh.write(record.to_json() + "\n")
    write_manifest(out, "train", _config_blob_hash(cfg), [ckpt_path, rec_path])
    print(f"ACC {acc:.2f}  ASR {asr:.2f}  ({record.run_id})")
    return 0


def cmd_eval(cfg: ExperimentConfig, device: str | None) -> int:
    from .evaluation import attack_success_rate, clean_accuracy, new_record
    from .models import load_checkpoint
    from .poisoning import poisoner_config

    ckpt = cfg.eval.get("checkpoint")
    if not ckpt or not os.path.exists(ckpt):
        raise ConfigError("eval.checkpoint must point at an existing checkpoint file")
    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    model, _ = load_checkpoint(ckpt)
    train, test, poisoner = _load_poisoned_inputs(cfg)
    acc = clean_accuracy(model, test)
    asr = attack_success_rate(model, test, poisoner)
    record = new_record(poisoner_config(poisoner), {"kind": "eval", "checkpoint": ckpt},
                        acc, asr, cfg.defense["seed"])
    rec_path = os.path.join(out, "record.json")
    with open(rec_path, "w") as fh:
        fh.write(record.to_json() + "\n")
    write_manifest(out, "eval", _config_blob_hash(cfg), [rec_path])
    print(f"ACC {acc:.2f}  ASR {asr:.2f}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, device: str | None) -> int:
    from .experiments import budget_sweep

    budgets = cfg.eval.get("budgets") or []
    if not budgets:
        raise ConfigError("eval.budgets must list at least one budget")
    if cfg.dataset.get("name") == "poisoned":
        raise ConfigError("sweep re-poisons per budget; point dataset at the raw data "
                          "and give an inline [poison] section")
    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    train = load_dataset(cfg, "train")
    test = load_dataset(cfg, "test")
    poisoner = build_poisoner(cfg)

    d = cfg.defense
    params = dict(arch=d["arch"], epochs=d["epochs"], lr=d["lr"], momentum=d["momentum"],
                  weight_decay=d["weight_decay"], decay_epochs=tuple(d["decay_epochs"]),
                  batch_size=d["batch_size"], random_crop=d["random_crop"],
                  horizontal_flip=d["horizontal_flip"], seed=d["seed"], device=device)
    records = budget_sweep(poisoner, cfg.eval["sweep_threat"], budgets, train, test,
                           trainer_params=params, sweep_id=_config_blob_hash(cfg)[:8])
    paths = []
    for rec in records:
        p = os.path.join(out, f"record_{rec.extras['budget']:.6f}.json")
        with open(p, "w") as fh:
            fh.write(rec.to_json() + "\n")
        paths.append(p)
    write_manifest(out, "sweep", _config_blob_hash(cfg), paths)
    failures = [r for r in records if "error" in r.extras]
    for r in records:
        tag = r.extras.get("error", f"ACC {r.acc:.2f}  ASR {r.asr:.2f}")
        print(f"budget {r.extras['budget']:.6f}: {tag}")
    return 3 if len(failures) == len(records) else 0


def cmd_adaptive(cfg: ExperimentConfig, device: str | None) -> int:
    from .adaptive import AdaptivePoisonCrafter, save_deltas

    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    train = load_dataset(cfg, "train")
    a = cfg.adaptive
    poisoner = build_poisoner(cfg)
    crafter = AdaptivePoisonCrafter(
        poisoner=poisoner, rate=a["rate"], delta_max=a["delta_max"], at_eps=a["at_eps"],
        steps=a["steps"], retrain_factor=a["retrain_factor"], lr=a["lr"],
        surrogate_epochs=a["surrogate_epochs"], retrain_epochs=a.get("retrain_epochs"),
        target_sample_cap=a["target_sample_cap"], arch=cfg.defense["arch"],
        batch_size=cfg.defense["batch_size"], seed=a["seed"], device=device)
    crafter.fit(train)
    blob, sidecar = save_deltas(os.path.join(out, "adaptive"), crafter.deltas_,
                                crafter.indices_)
    write_manifest(out, "adaptive", _config_blob_hash(cfg), [blob, sidecar])
    print(f"crafted {len(crafter.indices_)} deltas "
          f"(matching loss {crafter.matching_history_[-1]:.4f}) -> {out}")
    return 0


def cmd_plot(cfg: ExperimentConfig, device: str | None) -> int:
    from .evaluation import RunRecord, emit_plots

    rec_dir = cfg.eval.get("records") or cfg.output["dir"]
    records = []
    if os.path.isdir(rec_dir):
        for name in sorted(os.listdir(rec_dir)):
            if name.startswith("record") and name.endswith(".json"):
                with open(os.path.join(rec_dir, name)) as fh:
                    records.append(RunRecord.from_json(fh.read()))
    out = cfg.output["dir"]
    os.makedirs(out, exist_ok=True)
    written = emit_plots(records, out)
    if not written:
        print("warning: no records to plot", file=sys.stderr)
        return 1
    write_manifest(out, "plot", _config_blob_hash(cfg), written)
    print("\n".join(os.path.relpath(p) for p in written))
    return 0


COMMANDS = {
    "poison": cmd_poison,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "adaptive": cmd_adaptive,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backlab",
                                     description="backdoor poisoning / robust training lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--device", default=None, help="torch device id")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        cfg = _apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args.device)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except BacklabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
