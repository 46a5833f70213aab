"""Accuracy, group unfairness, the search reward and two-model disagreement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset

DEFAULT_EPSILON = 1e-3


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FairnessReport:
    overall_accuracy: float
    per_attribute_unfairness: dict[str, float]
    multi_unfairness: float
    reward: float
    per_group_accuracy: dict[tuple[str, str], float]

    def objective(self, name: str) -> float:
        """Look up a scalar by name: ``accuracy``, ``multi_unfairness``,
        ``reward`` or ``U:<attribute>``."""
        if name == "accuracy":
            return self.overall_accuracy
        if name == "multi_unfairness":
            return self.multi_unfairness
        if name == "reward":
            return self.reward
        if name.startswith("U:"):
            return self.per_attribute_unfairness[name[2:]]
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_attribute_unfairness": dict(self.per_attribute_unfairness),
            "multi_unfairness": self.multi_unfairness,
            "reward": self.reward,
            "per_group_accuracy": [
                {"attribute": a, "group": g, "accuracy": v}
                for (a, g), v in self.per_group_accuracy.items()
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FairnessReport":
        return cls(
            float(obj["overall_accuracy"]),
            {k: float(v) for k, v in obj["per_attribute_unfairness"].items()},
            float(obj["multi_unfairness"]),
            float(obj["reward"]),
            {(r["attribute"], r["group"]): float(r["accuracy"]) for r in obj["per_group_accuracy"]},
        )


def _as_index(subset, n: int) -> np.ndarray:
    if subset is None:
        return np.arange(n)
    idx = np.asarray(subset, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise MetricError("subset index out of range")
    return idx


def accuracy(predictions: Sequence[int], labels: Sequence[int], subset=None) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise MetricError("predictions and labels differ in length")
    idx = _as_index(subset, len(lab))
    if idx.size == 0:
        raise MetricError("accuracy of empty group undefined")
    return float(np.count_nonzero(pred[idx] == lab[idx]) / idx.size)


def _split_correct(pred: np.ndarray, dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    """Correctness over ``idx``; predictions may be split- or dataset-aligned."""
    if idx.size == 0:
        raise MetricError("accuracy of empty group undefined")
    if len(pred) == idx.size:
        return pred == dataset.labels[idx]
    if len(pred) == len(dataset):
        return pred[idx] == dataset.labels[idx]
    raise MetricError(
        f"{len(pred)} predictions match neither the split ({idx.size}) nor the dataset ({len(dataset)})"
    )


def _group_accuracies(correct: np.ndarray, groups: np.ndarray, n_groups: int):
    """Per-group (accuracy, count) for the rows given; empty groups -> count 0."""
    counts = np.bincount(groups, minlength=n_groups)
    hits = np.bincount(groups, weights=correct.astype(np.float64), minlength=n_groups)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = hits / counts
    return acc, counts


def unfairness(predictions: Sequence[int], dataset: Dataset, split, attribute: str) -> float:
    """L1 deviation of group accuracies from the split-wide accuracy.

    Groups with no member inside ``split`` are skipped.
    """
    k = dataset.schema.position(attribute)
    pred = np.asarray(predictions)
    idx = _as_index(split, len(dataset))
    correct = _split_correct(pred, dataset, idx)
    overall = np.count_nonzero(correct) / idx.size
    acc, counts = _group_accuracies(correct, dataset.groups[idx, k],
                                    len(dataset.schema.attributes[k].groups))
    present = counts > 0
    return float(np.abs(acc[present] - overall).sum())


def multi_unfairness(per_attribute: Mapping[str, float]) -> float:
    if not per_attribute:
        raise MetricError("no attributes given")
    return float(sum(per_attribute.values()))


def reward(overall_accuracy: float, per_attribute_unfairness: Mapping[str, float],
           epsilon: float = DEFAULT_EPSILON) -> float:
    """Sum over attributes of accuracy / max(U, epsilon)."""
    if epsilon <= 0:
        raise MetricError("epsilon must be positive")
    if overall_accuracy < 0:
        raise MetricError("accuracy must be non-negative")
    total = 0.0
    for name, u in per_attribute_unfairness.items():
        if u < 0:
            raise MetricError(f"negative unfairness for '{name}'")
        total += overall_accuracy / max(u, epsilon)
    return total


def disagreement_breakdown(model_a: Sequence[int], model_b: Sequence[int],
                           labels: Sequence[int], subset=None):
    """Fractions (both_wrong, only_a, only_b, both_right) over ``subset``."""
    a = np.asarray(model_a)
    b = np.asarray(model_b)
    lab = np.asarray(labels)
    idx = _as_index(subset, len(lab))
    if idx.size == 0:
        raise MetricError("breakdown of empty group undefined")
    ca = a[idx] == lab[idx]
    cb = b[idx] == lab[idx]
    n = idx.size
    only_a = np.count_nonzero(ca & ~cb)
    only_b = np.count_nonzero(~ca & cb)
    both = np.count_nonzero(ca & cb)
    neither = n - only_a - only_b - both
    return neither / n, only_a / n, only_b / n, both / n


def full_report(predictions: Sequence[int], dataset: Dataset, split=None,
                epsilon: float = DEFAULT_EPSILON) -> FairnessReport:
    pred = np.asarray(predictions)
    idx = _as_index(split, len(dataset))
    correct = _split_correct(pred, dataset, idx)
    overall = float(np.count_nonzero(correct) / idx.size)
    per_attr: dict[str, float] = {}
    per_group: dict[tuple[str, str], float] = {}
    for k, attr in enumerate(dataset.schema.attributes):
        acc, counts = _group_accuracies(correct, dataset.groups[idx, k], len(attr.groups))
        present = counts > 0
        per_attr[attr.name] = float(np.abs(acc[present] - overall).sum())
        for g in np.flatnonzero(present):
            per_group[(attr.name, attr.groups[g])] = float(acc[g])
    return FairnessReport(
        overall_accuracy=overall,
        per_attribute_unfairness=per_attr,
        multi_unfairness=multi_unfairness(per_attr),
        reward=reward(overall, per_attr, epsilon),
        per_group_accuracy=per_group,
    )
