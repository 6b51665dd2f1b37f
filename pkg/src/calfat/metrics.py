"""Evaluation metrics: natural/robust/per-class accuracy and model spread."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, pgd
from .data import Dataset
from .losses import ClassPrior
from .nn import Model, flatten, forward


@dataclass
class RoundMetrics:
    """One communication round's evaluation snapshot.

    Absent classes carry NaN in per_class_acc rather than 0, so they cannot
    drag averages down. robust_acc maps attack name to accuracy and may be
    empty on rounds where attack evaluation was skipped.
    """

    round_index: int
    natural_acc: float
    heterogeneity_s2: float
    robust_acc: dict[str, float] = field(default_factory=dict)
    per_class_acc: np.ndarray = field(default_factory=lambda: np.empty(0))


def accuracy(model: Model, data: Dataset) -> tuple[float, np.ndarray]:
    """Overall and per-class accuracy; argmax ties break toward class 0."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.argmax(forward(model, data.features), axis=1)
    hits = preds == data.labels
    per_class = np.full(data.num_classes, np.nan)
    for c in range(data.num_classes):
        mask = data.labels == c
        if mask.any():
            per_class[c] = float(hits[mask].mean())
    return float(hits.mean()), per_class


def robust_accuracy(
    model: Model,
    data: Dataset,
    spec: AttackSpec,
    rng: np.random.Generator | int | None = None,
    prior: ClassPrior | None = None,
) -> float:
    """Accuracy on white-box adversarial inputs generated against `model`."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if spec.objective == "ckl" and prior is None:
        prior = ClassPrior.uniform(data.num_classes, 0.01)
    adv = pgd(model, spec, data.features, y=data.labels, prior=prior, rng=rng)
    preds = np.argmax(forward(model, adv.x_adv), axis=1)
    return float((preds == data.labels).mean())


def heterogeneity_s2(models: list[Model]) -> float:
    """Sample variance of the flattened parameter vectors across models.

    Vectors are shifted by the first model before centering, so identical
    models yield exactly 0 (variance is translation invariant).
    """
    if len(models) < 2:
        raise ValueError("heterogeneity needs at least two models")
    flats = np.stack([flatten(m) for m in models])
    flats -= flats[0].copy()
    centered = flats - flats.mean(axis=0)
    return float(np.sum(centered * centered) / (len(models) - 1))


def _csv_header(attack_names: list[str], num_classes: int) -> list[str]:
    return (
        ["round", "natural_acc", "s2"]
        + [f"rob_{name}" for name in attack_names]
        + [f"cls_{c}" for c in range(num_classes)]
    )


def write_metrics(series: list[RoundMetrics], path, fmt: str = "csv") -> None:
    """Serialize a metric series; one row (CSV) or record (JSON) per round."""
    if fmt == "csv":
        attack_names = sorted({name for rm in series for name in rm.robust_acc})
        num_classes = len(series[0].per_class_acc) if series else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_csv_header(attack_names, num_classes))
            for rm in series:
                row = [rm.round_index, repr(float(rm.natural_acc)), repr(float(rm.heterogeneity_s2))]
                row += [repr(float(rm.robust_acc.get(name, np.nan))) for name in attack_names]
                row += [repr(float(v)) for v in rm.per_class_acc]
                writer.writerow(row)
    elif fmt == "json":
        records = [
            {
                "round_index": rm.round_index,
                "natural_acc": float(rm.natural_acc),
                "heterogeneity_s2": float(rm.heterogeneity_s2),
                "robust_acc": {k: float(v) for k, v in rm.robust_acc.items()},
                "per_class_acc": [float(v) for v in rm.per_class_acc],
            }
            for rm in series
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def read_metrics(path, fmt: str = "csv") -> list[RoundMetrics]:
    """Inverse of :func:`write_metrics`."""
    if fmt == "json":
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
        return [
            RoundMetrics(
                round_index=int(r["round_index"]),
                natural_acc=float(r["natural_acc"]),
                heterogeneity_s2=float(r["heterogeneity_s2"]),
                robust_acc={k: float(v) for k, v in r["robust_acc"].items()},
                per_class_acc=np.array(r["per_class_acc"], dtype=np.float64),
            )
            for r in records
        ]
    if fmt == "csv":
        with open(path, "r", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        attack_cols = [(i, h[4:]) for i, h in enumerate(header) if h.startswith("rob_")]
        class_cols = [i for i, h in enumerate(header) if h.startswith("cls_")]
        out = []
        for row in rows[1:]:
            out.append(
                RoundMetrics(
                    round_index=int(row[0]),
                    natural_acc=float(row[1]),
                    heterogeneity_s2=float(row[2]),
                    robust_acc={name: float(row[i]) for i, name in attack_cols},
                    per_class_acc=np.array([float(row[i]) for i in class_cols]),
                )
            )
        return out
    raise ValueError(f"unknown metrics format {fmt!r}")
