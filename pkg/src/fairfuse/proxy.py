"""Unprivileged-group detection, per-sample/per-group weights and the proxy set.

The proxy set trains the fusion head.  It holds only training samples that
belong to at least one unprivileged group, each weighted by its group weight.
Weights follow a two-pass scheme: a sample earns one point for every
unprivileged group it belongs to, and a group's weight is the mean of its
members' points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, ModelPool


class ProxyError(ValueError):
    pass


@dataclass(frozen=True)
class UnprivilegedMap:
    groups: dict[str, frozenset[int]]
    basis_accuracy: float
    margin: float = 0.0

    @property
    def empty(self) -> bool:
        return not any(self.groups.values())

    def flagged(self) -> list[tuple[str, int]]:
        return [(a, g) for a, gs in self.groups.items() for g in sorted(gs)]


@dataclass(frozen=True)
class WeightTable:
    sample_weight: dict[str, int]
    group_weight: dict[tuple[str, int], float]


@dataclass(frozen=True, eq=False)
class ProxySample:
    sample_id: str
    input: np.ndarray
    target: np.ndarray
    weight: float


def identify_unprivileged(dataset: Dataset, pool: ModelPool, train_split,
                          margin: float = 0.0, exclude_unknown: bool = True,
                          models: Sequence[int] | None = None) -> UnprivilegedMap:
    """Flag groups whose model-averaged train accuracy falls below the
    model-averaged overall train accuracy minus ``margin``.

    ``models`` restricts the average to a subset of the pool (default: all).
    """
    if margin < 0:
        raise ProxyError("margin must be non-negative")
    idx = np.asarray(train_split, dtype=np.int64)
    if idx.size == 0:
        raise ProxyError("empty training split")
    members = range(len(pool)) if models is None else list(models)
    if not members:
        raise ProxyError("no models to average over")
    labels = dataset.labels[idx]
    correct = np.stack([pool[j].predictions[idx] == labels for j in members]).astype(np.float64)
    basis = float(correct.mean())
    out: dict[str, frozenset[int]] = {}
    for k, attr in enumerate(dataset.schema.attributes):
        g_of = dataset.groups[idx, k]
        flagged = set()
        for g in range(len(attr.groups)):
            if exclude_unknown and g == attr.unknown_index:
                continue
            mask = g_of == g
            if not mask.any():
                continue
            # mean over models of per-model group accuracy
            if correct[:, mask].mean() < basis - margin:
                flagged.add(g)
        out[attr.name] = frozenset(flagged)
    return UnprivilegedMap(out, basis, margin)


def membership(dataset: Dataset, unpriv: UnprivilegedMap) -> np.ndarray:
    """(N, F) boolean matrix: sample i is in the f-th flagged group."""
    cols = []
    for attr_name, g in unpriv.flagged():
        k = dataset.schema.position(attr_name)
        cols.append(dataset.groups[:, k] == g)
    if not cols:
        return np.zeros((len(dataset), 0), dtype=bool)
    return np.stack(cols, axis=1)


def compute_weights(dataset: Dataset, train_split, unpriv: UnprivilegedMap) -> WeightTable:
    idx = np.asarray(train_split, dtype=np.int64)
    mem = membership(dataset, unpriv)[idx]
    w_img = mem.sum(axis=1)
    sample_weight = {dataset.sample_ids[i]: int(w) for i, w in zip(idx, w_img)}
    group_weight: dict[tuple[str, int], float] = {}
    for f, (attr_name, g) in enumerate(unpriv.flagged()):
        inside = mem[:, f]
        n_g = int(inside.sum())
        if n_g == 0:
            name = dataset.schema[attr_name].groups[g]
            raise ProxyError(f"unprivileged group '{name}' of '{attr_name}' has no training samples")
        group_weight[(attr_name, g)] = float(w_img[inside].sum() / n_g)
    return WeightTable(sample_weight, group_weight)


def proxy_arrays(dataset: Dataset, pool: ModelPool, selected: Sequence[int], train_split,
                 unpriv: UnprivilegedMap, weights: WeightTable):
    """Array form of :func:`build_proxy`: ``(rows, X, Y, w)``.

    ``rows`` are dataset indices of the proxy samples in train-split order.
    """
    if not len(selected):
        raise ProxyError("no models selected")
    for j in selected:
        if not 0 <= j < len(pool):
            raise ProxyError(f"selected model index {j} out of range for pool of {len(pool)}")
    idx = np.asarray(train_split, dtype=np.int64)
    mem = membership(dataset, unpriv)[idx]
    gw = np.array([weights.group_weight[key] for key in unpriv.flagged()], dtype=np.float64)
    keep = mem.any(axis=1)
    rows = idx[keep]
    if gw.size:
        # a sample in several flagged groups takes the largest group weight
        w = np.where(mem[keep], gw[None, :], -np.inf).max(axis=1)
    else:
        w = np.zeros(0)
    X = np.concatenate([pool[j].probabilities[rows] for j in selected], axis=1)
    Y = np.eye(dataset.num_classes)[dataset.labels[rows]]
    return rows, X, Y, w


def build_proxy(dataset: Dataset, pool: ModelPool, selected: Sequence[int], train_split,
                unpriv: UnprivilegedMap, weights: WeightTable) -> list[ProxySample]:
    rows, X, Y, w = proxy_arrays(dataset, pool, selected, train_split, unpriv, weights)
    ids = dataset.sample_ids
    return [ProxySample(ids[r], X[i], Y[i], float(w[i])) for i, r in enumerate(rows)]


def original_arrays(dataset: Dataset, pool: ModelPool, selected: Sequence[int], train_split):
    """Every training sample with weight 1: the ablation baseline."""
    idx = np.asarray(train_split, dtype=np.int64)
    X = np.concatenate([pool[j].probabilities[idx] for j in selected], axis=1)
    Y = np.eye(dataset.num_classes)[dataset.labels[idx]]
    return idx, X, Y, np.ones(len(idx))


def stack_proxy(proxy: Sequence[ProxySample]):
    """Stack ProxySample records into ``(X, Y, w)`` arrays."""
    if not proxy:
        raise ProxyError("empty proxy")
    X = np.stack([p.input for p in proxy])
    Y = np.stack([p.target for p in proxy])
    w = np.array([p.weight for p in proxy], dtype=np.float64)
    return X, Y, w


def weights_to_rows(dataset: Dataset, table: WeightTable):
    """Audit rows: ``[(attribute, group, weight)]`` and ``[(sample_id, weight)]``."""
    group_rows = [(a, dataset.schema[a].groups[g], w) for (a, g), w in table.group_weight.items()]
    sample_rows = list(table.sample_weight.items())
    return group_rows, sample_rows

