"""Sweep and single-run orchestration shared by the CLI and the test harness."""

from __future__ import annotations

import uuid

from sklearn.base import clone

from .data import LabeledDataset
from .evaluation import RunRecord, Stopwatch, attack_success_rate, clean_accuracy, new_record
from .poisoning import Poisoner, poisoner_config
from .threats import make_threat
from .training import AdversarialTrainer, TrainerBase


def run_single(poisoner: Poisoner, trainer: TrainerBase, train_data: LabeledDataset,
               test_data: LabeledDataset, eval_curves: bool = True,
               dataset_info: dict | None = None, extras: dict | None = None) -> RunRecord:
    """Poison, train, evaluate once; returns the persisted record shape."""
    atk_cfg = poisoner_config(poisoner)
    def_cfg = trainer.defense_config()
    with Stopwatch() as timer:
        poisoned = poisoner.fit(train_data).transform(train_data)
        fitted = clone(trainer)
        fitted.fit(poisoned,
                   eval_data=test_data if eval_curves else None,
                   poisoner=poisoner if eval_curves else None)
        acc = clean_accuracy(fitted.model_, test_data)
        asr = attack_success_rate(fitted.model_, test_data, poisoner)
    record = new_record(atk_cfg, def_cfg, acc, asr, trainer.get_params().get("seed", 0),
                        curves=fitted.history_, wall_clock_s=timer.seconds,
                        dataset=dataset_info, extras=extras)
    if record.curves.get("acc"):
        best = max(range(len(record.curves["acc"])), key=lambda i: record.curves["acc"][i])
        record.extras.setdefault("best_epoch", record.curves["epoch"][best])
        record.extras.setdefault("best_acc", record.curves["acc"][best])
    record.trainer_ = fitted  # fitted estimator rides along, never serialized
    return record


def budget_sweep(poisoner: Poisoner, threat_kind: str, budgets: list[float],
                 train_data: LabeledDataset, test_data: LabeledDataset,
                 trainer_params: dict | None = None, sweep_id: str | None = None,
                 eval_curves: bool = False) -> list[RunRecord]:
    """One full train+eval per budget; failures are recorded, the sweep goes on.

    Budget semantics follow the threat kind: eps for the solver threats,
    sigma for the random baselines. Budget 0 degenerates to standard
    training.
    """
    if not budgets:
        raise ValueError("budgets must be nonempty")
    if list(budgets) != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    sweep_id = sweep_id or uuid.uuid4().hex[:8]
    params = dict(trainer_params or {})
    seed = params.get("seed", 0)

    records = []
    for budget in budgets:
        extras = {"sweep_id": sweep_id, "budget": float(budget), "threat_kind": threat_kind}
        try:
            threat = make_threat(threat_kind,
                                 **({"sigma": budget} if threat_kind.startswith("rand")
                                    else {"eps": budget}))
            trainer = AdversarialTrainer(threat=threat, **params)
            record = run_single(poisoner, trainer, train_data, test_data,
                                eval_curves=eval_curves, extras=extras)
        except Exception as exc:
            record = new_record(poisoner_config(poisoner),
                                {"kind": "at", "threat": {"kind": threat_kind}},
                                0.0, 0.0, seed,
                                extras={**extras, "error": f"{type(exc).__name__}: {exc}"})
        records.append(record)
    return records
