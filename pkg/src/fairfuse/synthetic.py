"""Engineered datasets and model pools with controllable complementarity.

Each synthetic model gets a target accuracy for every (attribute, group).  Per
cell (one group per attribute) the accuracy is the model's overall accuracy
plus the per-attribute group offsets, so every group marginal hits its
target.  Correct/incorrect counts are fixed per cell by rounding rather than
drawn independently, which keeps realized accuracies within a fraction of a
point of the targets.

Model 0 is the anchor.  For each other model, the fraction of samples on
which exactly one of the pair is right is set to ``complementarity`` inside
designated unprivileged groups and to its minimum ``|a - b|`` elsewhere.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Attribute,
    AttributeSchema,
    Dataset,
    LabeledSample,
    ModelEntry,
    ModelPool,
)
from .metrics import disagreement_breakdown


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class SynthAttribute:
    name: str
    groups: tuple[str, ...]
    proportions: tuple[float, ...] | None = None
    unknown_group: str | None = None

    def shares(self) -> np.ndarray:
        if self.proportions is None:
            return np.full(len(self.groups), 1.0 / len(self.groups))
        p = np.asarray(self.proportions, dtype=np.float64)
        return p / p.sum()


@dataclass(frozen=True)
class SynthModel:
    name: str
    group_accuracy: dict[str, dict[str, float]]


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int
    num_samples: int
    attributes: tuple[SynthAttribute, ...]
    models: tuple[SynthModel, ...]
    complementarity: float
    unprivileged: dict[str, tuple[str, ...]] = field(default_factory=dict)
    correct_confidence: tuple[float, float] = (0.55, 0.95)
    wrong_confidence: tuple[float, float] | None = None
    true_class_share: tuple[float, float] = (0.40, 0.80)

    @property
    def wrong_range(self) -> tuple[float, float]:
        """Confidence range of a wrong prediction; by default (0.40, 0.70),
        lifted above 1/M so a binary wrong answer still wins the argmax."""
        if self.wrong_confidence is not None:
            return tuple(self.wrong_confidence)
        lo = max(0.40, 1.0 / self.num_classes + 0.05)
        return lo, max(0.70, lo)

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticConfig":
        return cls(
            num_classes=int(obj["num_classes"]),
            num_samples=int(obj["num_samples"]),
            attributes=tuple(
                SynthAttribute(a["name"], tuple(a["groups"]),
                               tuple(a["proportions"]) if a.get("proportions") else None,
                               a.get("unknown_group"))
                for a in obj["attributes"]
            ),
            models=tuple(SynthModel(m["name"], m["group_accuracy"]) for m in obj["models"]),
            complementarity=float(obj["complementarity"]),
            unprivileged={k: tuple(v) for k, v in obj.get("unprivileged", {}).items()},
            correct_confidence=tuple(obj.get("correct_confidence", (0.55, 0.95))),
            wrong_confidence=tuple(obj["wrong_confidence"]) if obj.get("wrong_confidence") else None,
            true_class_share=tuple(obj.get("true_class_share", (0.40, 0.80))),
        )


def _round_counts(total: int, shares: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``total * shares``."""
    raw = total * shares
    counts = np.floor(raw).astype(np.int64)
    rest = total - counts.sum()
    order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
    counts[order[:rest]] += 1
    return counts


def _cell_accuracies(cfg: SyntheticConfig, model: SynthModel, cells) -> np.ndarray:
    base = None
    offsets = []
    for attr in cfg.attributes:
        try:
            targets = np.array([model.group_accuracy[attr.name][g] for g in attr.groups], dtype=float)
        except KeyError as exc:
            raise InfeasibleConfig(f"model '{model.name}' lacks a target for {exc}") from None
        if np.any(targets < 0) or np.any(targets > 1):
            raise InfeasibleConfig(f"model '{model.name}': targets must lie in [0, 1]")
        mean = float(attr.shares() @ targets)
        if base is None:
            base = mean
        elif abs(mean - base) > 1e-6:
            raise InfeasibleConfig(
                f"model '{model.name}': group targets imply overall accuracy {base:.4f} "
                f"on one attribute but {mean:.4f} on '{attr.name}'"
            )
        offsets.append(targets - mean)
    acc = np.array([base + sum(off[g] for off, g in zip(offsets, cell)) for cell in cells])
    if np.any(acc < -1e-12) or np.any(acc > 1 + 1e-12):
        raise InfeasibleConfig(
            f"model '{model.name}': group targets combine to a cell accuracy outside [0, 1]"
        )
    return np.clip(acc, 0.0, 1.0)


def _validate(cfg: SyntheticConfig) -> None:
    if cfg.num_classes < 2:
        raise InfeasibleConfig("need at least 2 classes")
    if len(cfg.models) < 2:
        raise InfeasibleConfig("need at least 2 models")
    if not 0 <= cfg.complementarity <= 1:
        raise InfeasibleConfig(f"complementarity rate {cfg.complementarity} outside [0, 1]")
    names = {a.name: a for a in cfg.attributes}
    for attr, groups in cfg.unprivileged.items():
        if attr not in names:
            raise InfeasibleConfig(f"unprivileged attribute '{attr}' not in schema")
        for g in groups:
            if g not in names[attr].groups:
                raise InfeasibleConfig(f"unprivileged group '{g}' not in '{attr}'")
    lo, hi = cfg.correct_confidence
    if not 0.5 < lo <= hi < 1:
        raise InfeasibleConfig("correct_confidence must lie in (0.5, 1)")
    lo, hi = cfg.wrong_range
    if not 1.0 / cfg.num_classes < lo <= hi < 1:
        raise InfeasibleConfig("wrong_confidence must lie in (1/M, 1)")


def _pair_probabilities(a: float, b: float, rate: float, where: str):
    """(both, only_a, only_b, neither) for marginals a, b and exactly-one rate."""
    upper = min(a + b, 2 - a - b)
    if rate > upper + 1e-12:
        raise InfeasibleConfig(
            f"complementarity rate {rate} exceeds min(a+b, 2-a-b) = {upper:.4f} "
            f"for accuracies a={a:.4f}, b={b:.4f} ({where})"
        )
    if rate < abs(a - b) - 1e-12:
        raise InfeasibleConfig(
            f"complementarity rate {rate} is below |a-b| = {abs(a - b):.4f} "
            f"for accuracies a={a:.4f}, b={b:.4f} ({where})"
        )
    both = (a + b - rate) / 2
    return max(both, 0.0), max(a - both, 0.0), max(b - both, 0.0)


def _score_row(m: int, label: int, correct: bool, cfg: SyntheticConfig, rng) -> np.ndarray:
    row = np.zeros(m)
    if correct:
        pred = label
        c = rng.uniform(*cfg.correct_confidence)
        others = [j for j in range(m) if j != pred]
        row[others] = (1 - c) * rng.dirichlet(np.ones(len(others)))
    else:
        pred = int(rng.choice([j for j in range(m) if j != label]))
        c = rng.uniform(*cfg.wrong_range)
        rest = 1 - c
        t = min(rest * rng.uniform(*cfg.true_class_share), c * 0.98)
        others = [j for j in range(m) if j not in (pred, label)]
        row[label] = t
        if others:
            row[others] = (rest - t) * rng.dirichlet(np.ones(len(others)))
        else:
            row[label] = rest
    row[pred] = c
    # keep pred the strict argmax
    top_other = np.max(np.delete(row, pred))
    if top_other >= c:
        row = np.where(np.arange(m) == pred, c, (1 - c) / (m - 1))
    return row / row.sum()


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[Dataset, ModelPool]:
    cfg = config
    _validate(cfg)
    attrs = cfg.attributes
    cells = list(itertools.product(*(range(len(a.groups)) for a in attrs)))
    cell_share = np.array([math.prod(a.shares()[g] for a, g in zip(attrs, c)) for c in cells])
    unpriv_idx = {
        a.name: {a.groups.index(g) for g in cfg.unprivileged.get(a.name, ())} for a in attrs
    }
    cell_unpriv = [
        any(g in unpriv_idx[a.name] for a, g in zip(attrs, c)) for c in cells
    ]
    accs = [_cell_accuracies(cfg, m, cells) for m in cfg.models]
    # joint probabilities per (partner model, cell); raises before any sampling
    joint = []
    for j in range(1, len(cfg.models)):
        rows = []
        for ci, cell in enumerate(cells):
            a, b = accs[0][ci], accs[j][ci]
            rate = cfg.complementarity if cell_unpriv[ci] else abs(a - b)
            where = ", ".join(f"{x.name}={x.groups[g]}" for x, g in zip(attrs, cell))
            rows.append(_pair_probabilities(a, b, rate, f"{cfg.models[0].name}/{cfg.models[j].name} at {where}"))
        joint.append(rows)

    rng = np.random.default_rng(seed)
    n = cfg.num_samples
    counts = _round_counts(n, cell_share)
    cell_of = rng.permutation(np.repeat(np.arange(len(cells)), counts))
    labels = rng.integers(0, cfg.num_classes, size=n)

    n_models = len(cfg.models)
    correct = np.zeros((n_models, n), dtype=bool)
    for ci in range(len(cells)):
        members = rng.permutation(np.flatnonzero(cell_of == ci))
        nc = len(members)
        if nc == 0:
            continue
        k0 = min(nc, int(math.floor(nc * accs[0][ci] + 0.5)))
        right0, wrong0 = members[:k0], members[k0:]
        correct[0, right0] = True
        for j in range(1, n_models):
            both, _, only_b = joint[j - 1][ci]
            kb = min(len(right0), int(math.floor(nc * both + 0.5)))
            ko = min(len(wrong0), int(math.floor(nc * only_b + 0.5)))
            correct[j, rng.permutation(right0)[:kb]] = True
            correct[j, rng.permutation(wrong0)[:ko]] = True

    width = max(4, len(str(n - 1)))
    samples = tuple(
        LabeledSample(f"s{i:0{width}d}", int(labels[i]),
                      {a.name: int(cells[cell_of[i]][k]) for k, a in enumerate(attrs)})
        for i in range(n)
    )
    schema = AttributeSchema(tuple(Attribute(a.name, tuple(a.groups), a.unknown_group) for a in attrs))
    dataset = Dataset(schema, cfg.num_classes, samples)
    entries = []
    for j, model in enumerate(cfg.models):
        scores = np.stack([
            _score_row(cfg.num_classes, int(labels[i]), bool(correct[j, i]), cfg, rng) for i in range(n)
        ])
        entries.append(ModelEntry(model.name, scores, "probability"))
    return dataset, ModelPool(tuple(entries))


def realized_summary(cfg: SyntheticConfig, dataset: Dataset, pool: ModelPool):
    """Realized per-group accuracies and complementarity rates.

    Returns ``(accuracy_rows, complementarity_rows)`` where accuracy rows are
    ``(model, attribute, group, target, realized)`` and complementarity rows
    ``(model_a, model_b, attribute, group, target, realized)`` for designated
    unprivileged groups.
    """
    acc_rows = []
    labels = dataset.labels
    for j, model in enumerate(cfg.models):
        hit = pool[j].predictions == labels
        for k, attr in enumerate(dataset.schema.attributes):
            for g, gname in enumerate(attr.groups):
                mask = dataset.groups[:, k] == g
                if mask.any():
                    acc_rows.append((model.name, attr.name, gname,
                                     model.group_accuracy[attr.name][gname], float(hit[mask].mean())))
    comp_rows = []
    for j in range(1, len(cfg.models)):
        for attr_name, gnames in cfg.unprivileged.items():
            k = dataset.schema.position(attr_name)
            for gname in gnames:
                g = dataset.schema[attr_name].index(gname)
                idx = np.flatnonzero(dataset.groups[:, k] == g)
                if idx.size == 0:
                    continue
                _, only_a, only_b, _ = disagreement_breakdown(
                    pool[0].predictions, pool[j].predictions, labels, idx)
                comp_rows.append((pool[0].name, pool[j].name, attr_name, gname,
                                  cfg.complementarity, only_a + only_b))
    return acc_rows, comp_rows


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

_AGE = SynthAttribute("age", ("young", "adult", "senior"))
_SITE = SynthAttribute("site", ("head", "torso", "limb"))


def _preset_complementary() -> SyntheticConfig:
    return SyntheticConfig(
        num_classes=4,
        num_samples=2000,
        attributes=(_AGE, _SITE),
        models=(
            SynthModel("resnet18-sim", {
                "age": {"young": 0.86, "adult": 0.86, "senior": 0.68},
                "site": {"head": 0.86, "torso": 0.86, "limb": 0.68},
            }),
            SynthModel("densenet121-sim", {
                "age": {"young": 0.85, "adult": 0.85, "senior": 0.70},
                "site": {"head": 0.87, "torso": 0.87, "limb": 0.66},
            }),
        ),
        complementarity=0.30,
        unprivileged={"age": ("senior",), "site": ("limb",)},
    )


def _preset_uniform() -> SyntheticConfig:
    flat = {"age": {g: 0.8 for g in _AGE.groups}, "site": {g: 0.8 for g in _SITE.groups}}
    return SyntheticConfig(
        num_classes=4,
        num_samples=2000,
        attributes=(_AGE, _SITE),
        models=(SynthModel("model-a-sim", flat), SynthModel("model-b-sim", flat)),
        complementarity=0.0,
        unprivileged={},
    )


PRESETS = {
    "complementary-2attr": _preset_complementary,
    "uniform-fair": _preset_uniform,
}


def preset(name: str) -> SyntheticConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset '{name}'; choose from {sorted(PRESETS)}") from None
