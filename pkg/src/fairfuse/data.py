"""Dataset, schema and cached model-pool containers, plus file I/O and splitting.

Pool members are frozen models represented only by their class-score matrices,
row-aligned to ``Dataset.samples``.  Raw scores are softmaxed at load time so
everything downstream sees probability rows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PROB_TOL = 1e-6
SPLIT_FRACTIONS = (0.64, 0.16, 0.20)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class LoadError(DataError):
    pass


def fmt_float(x: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(x))


# --------------------------------------------------------------------------
# schema / dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Attribute:
    name: str
    groups: tuple[str, ...]
    unknown_group: str | None = None

    def __post_init__(self):
        if len(self.groups) < 2:
            raise DataError(f"attribute '{self.name}' needs at least 2 groups")
        if len(set(self.groups)) != len(self.groups):
            raise DataError(f"duplicate group names in attribute '{self.name}'")
        if self.unknown_group is not None and self.unknown_group not in self.groups:
            raise DataError(
                f"unknown_group '{self.unknown_group}' is not a group of '{self.name}'"
            )

    def index(self, group: str) -> int:
        return self.groups.index(group)

    @property
    def unknown_index(self) -> int | None:
        return None if self.unknown_group is None else self.index(self.unknown_group)


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DataError("attribute names must be unique")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def __len__(self) -> int:
        return len(self.attributes)

    def __getitem__(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def position(self, name: str) -> int:
        for k, a in enumerate(self.attributes):
            if a.name == name:
                return k
        raise DataError(f"attribute '{name}' not in schema")


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    label: int
    group_of: Mapping[str, int]


@dataclass(frozen=True)
class Dataset:
    schema: AttributeSchema
    num_classes: int
    samples: tuple[LabeledSample, ...]

    def __post_init__(self):
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        seen = set()
        names = set(self.schema.names)
        for s in self.samples:
            if s.sample_id in seen:
                raise DataError(f"duplicate sample_id '{s.sample_id}'")
            seen.add(s.sample_id)
            if not 0 <= s.label < self.num_classes:
                raise DataError(f"label {s.label} out of range for sample {s.sample_id}")
            if set(s.group_of) != names:
                raise DataError(f"sample {s.sample_id} must carry exactly one group per attribute")
            for a in self.schema.attributes:
                if not 0 <= s.group_of[a.name] < len(a.groups):
                    raise DataError(f"group index out of range for sample {s.sample_id}")

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @cached_property
    def groups(self) -> np.ndarray:
        """(N, K) matrix of group indices, columns in schema order."""
        out = np.zeros((len(self.samples), len(self.schema)), dtype=np.int64)
        for i, s in enumerate(self.samples):
            for k, a in enumerate(self.schema.attributes):
                out[i, k] = s.group_of[a.name]
        return out

    @cached_property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def indices(self, ids: Iterable[str]) -> np.ndarray:
        """Dataset-order index array for a set of sample ids."""
        return np.array(sorted(self.index_of[i] for i in ids), dtype=np.int64)


# --------------------------------------------------------------------------
# model pool
# --------------------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ModelEntry:
    name: str
    scores: np.ndarray
    score_kind: str = "probability"

    def __post_init__(self):
        if self.score_kind not in ("probability", "raw"):
            raise DataError(f"unknown score_kind '{self.score_kind}'")
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise DataError(f"scores for '{self.name}' must be a matrix")
        if not np.all(np.isfinite(s)):
            raise DataError(f"non-finite scores for '{self.name}'")
        if self.score_kind == "raw":
            s = softmax_rows(s)
        if s.min(initial=0.0) < 0 or s.max(initial=0.0) > 1:
            raise DataError(f"probability scores for '{self.name}' outside [0,1]")
        sums = s.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
        if bad.size:
            raise DataError(f"row {bad[0]} of '{self.name}' sums to {sums[bad[0]]!r}, not 1")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def probabilities(self) -> np.ndarray:
        """Probability rows; ``raw`` inputs were softmaxed on construction."""
        return self.scores

    @cached_property
    def predictions(self) -> np.ndarray:
        # np.argmax returns the first maximum -> ties go to the lowest class
        return np.argmax(self.probabilities, axis=1)


@dataclass(frozen=True)
class ModelPool:
    entries: tuple[ModelEntry, ...]

    def __post_init__(self):
        if len(self.entries) < 2:
            raise DataError("model pool needs at least 2 entries")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("model names must be unique")
        shapes = {e.scores.shape for e in self.entries}
        if len(shapes) != 1:
            raise DataError(f"pool entries are not aligned: shapes {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ModelEntry:
        return self.entries[i]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"no model named '{name}' in pool") from None

    def check_aligned(self, dataset: Dataset) -> None:
        n, m = self.entries[0].scores.shape
        if n != len(dataset) or m != dataset.num_classes:
            raise DataError(
                f"pool scores are {n}x{m}, dataset needs {len(dataset)}x{dataset.num_classes}"
            )


# --------------------------------------------------------------------------
# loading / writing
# --------------------------------------------------------------------------


def schema_from_json(obj: dict) -> tuple[AttributeSchema, int]:
    try:
        m = int(obj["num_classes"])
        attrs = tuple(
            Attribute(a["name"], tuple(a["groups"]), a.get("unknown_group"))
            for a in obj["attributes"]
        )
    except (KeyError, TypeError) as exc:
        raise LoadError(f"malformed schema: {exc}") from exc
    if m < 1:
        raise LoadError("num_classes must be positive")
    return AttributeSchema(attrs), m


def schema_to_json(schema: AttributeSchema, num_classes: int) -> dict:
    return {
        "num_classes": num_classes,
        "attributes": [
            {"name": a.name, "groups": list(a.groups), "unknown_group": a.unknown_group}
            for a in schema.attributes
        ],
    }


def load_schema(path: str | Path) -> tuple[AttributeSchema, int]:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return schema_from_json(obj)
    except DataError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def load_dataset(dataset_path: str | Path, schema_path: str | Path) -> Dataset:
    schema, m = load_schema(schema_path)
    samples = []
    seen = set()
    with open(dataset_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["sample_id", "label", *schema.names]
        if header != expected:
            raise LoadError(f"{dataset_path}: header {header} != {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise LoadError(f"malformed row at line {lineno}: expected {len(expected)} fields")
            sid, label_txt, *group_names = row
            if sid in seen:
                raise LoadError(f"duplicate sample_id '{sid}' at line {lineno}")
            seen.add(sid)
            try:
                label = int(label_txt, 10)
            except ValueError:
                raise LoadError(f"bad label '{label_txt}' at line {lineno}") from None
            if not 0 <= label < m:
                raise LoadError(f"label {label} out of range [0, {m}) at line {lineno}")
            group_of = {}
            for attr, gname in zip(schema.attributes, group_names):
                if gname not in attr.groups:
                    raise LoadError(
                        f"unknown group '{gname}' for attribute '{attr.name}' at line {lineno}"
                    )
                group_of[attr.name] = attr.index(gname)
            samples.append(LabeledSample(sid, label, group_of))
    return Dataset(schema, m, tuple(samples))


def write_dataset(dataset: Dataset, dataset_path: str | Path, schema_path: str | Path) -> None:
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_json(dataset.schema, dataset.num_classes), fh, indent=2)
        fh.write("\n")
    with open(dataset_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *dataset.schema.names])
        for s in dataset.samples:
            w.writerow(
                [s.sample_id, s.label]
                + [a.groups[s.group_of[a.name]] for a in dataset.schema.attributes]
            )


def load_model_outputs(
    path: str | Path, dataset: Dataset, name: str, score_kind: str = "probability"
) -> ModelEntry:
    m = dataset.num_classes
    rows: dict[str, list[float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["sample_id", *(f"score_{j}" for j in range(m))]
        if header != expected:
            raise LoadError(f"{path}: header {header} != {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != m + 1:
                raise LoadError(f"{path}: malformed row at line {lineno}")
            sid = row[0]
            if sid not in dataset.index_of:
                raise LoadError(f"{path}: extra outputs for unknown sample {sid}")
            if sid in rows:
                raise LoadError(f"{path}: duplicate outputs for sample {sid}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise LoadError(f"{path}: non-numeric score at line {lineno}") from None
            if score_kind == "probability":
                total = math.fsum(vals)
                if abs(total - 1.0) > PROB_TOL or min(vals) < 0 or max(vals) > 1:
                    raise LoadError(
                        f"{path}: scores for sample {sid} are not a probability row (sum {total!r})"
                    )
            rows[sid] = vals
    for sid in dataset.sample_ids:
        if sid not in rows:
            raise LoadError(f"missing outputs for sample {sid}")
    scores = np.array([rows[sid] for sid in dataset.sample_ids], dtype=np.float64)
    try:
        return ModelEntry(name, scores, score_kind)
    except DataError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def write_model_outputs(entry: ModelEntry, dataset: Dataset, path: str | Path) -> None:
    probs = entry.probabilities
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *(f"score_{j}" for j in range(probs.shape[1]))])
        for sid, row in zip(dataset.sample_ids, probs):
            w.writerow([sid, *(fmt_float(v) for v in row)])


def load_pool(manifest_path: str | Path, dataset: Dataset) -> ModelPool:
    manifest_path = Path(manifest_path)
    try:
        items = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{manifest_path}: invalid JSON: {exc}") from exc
    entries = []
    for item in items:
        p = Path(item["path"])
        if not p.is_absolute():
            p = manifest_path.parent / p
        entries.append(load_model_outputs(p, dataset, item["name"], item.get("score_kind", "probability")))
    try:
        return ModelPool(tuple(entries))
    except DataError as exc:
        raise LoadError(f"{manifest_path}: {exc}") from exc


def write_pool(pool: ModelPool, dataset: Dataset, directory: str | Path,
               manifest_name: str = "pool.json") -> Path:
    directory = Path(directory)
    manifest = []
    for e in pool.entries:
        fname = f"{e.name}.csv"
        write_model_outputs(e, dataset, directory / fname)
        manifest.append({"name": e.name, "path": fname, "score_kind": "probability"})
    out = directory / manifest_name
    out.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    # dataset-order index arrays, filled by split_dataset
    train: np.ndarray = field(default=None, compare=False, repr=False)
    val: np.ndarray = field(default=None, compare=False, repr=False)
    test: np.ndarray = field(default=None, compare=False, repr=False)

    def indices(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _round_half_down(x: float) -> int:
    # exact .5 ties go down so the remainder lands in train
    return math.ceil(x - 0.5)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_val = _round_half_down(n * SPLIT_FRACTIONS[1])
    n_test = _round_half_down(n * SPLIT_FRACTIONS[2])
    return n - n_val - n_test, n_val, n_test


def _apportion(quotas: Sequence[float], caps: Sequence[int], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` with per-bin caps."""
    counts = [min(math.floor(q), c) for q, c in zip(quotas, caps)]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    remaining = total - sum(counts)
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if counts[i] < caps[i]:
                counts[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise DataError("cannot apportion split sizes")
    return counts


def split_dataset(dataset: Dataset, seed: int) -> SplitAssignment:
    """Stratified 64/16/20 split, deterministic in ``seed``.

    Global val/test sizes are rounded to nearest (ties toward train) and then
    apportioned to classes by largest remainder, so both the per-class
    proportions and the global sizes stay within one sample of exact.
    """
    n = len(dataset)
    if n < 5:
        raise DataError(f"need at least 5 samples for a three-way split, got {n}")
    _, n_val, n_test = split_sizes(n)
    labels = dataset.labels
    classes = sorted(set(labels.tolist()))
    members = [np.flatnonzero(labels == c) for c in classes]
    sizes = [len(m) for m in members]
    test_counts = _apportion([s * SPLIT_FRACTIONS[2] for s in sizes], sizes, n_test)
    val_counts = _apportion(
        [s * SPLIT_FRACTIONS[1] for s in sizes],
        [s - t for s, t in zip(sizes, test_counts)],
        n_val,
    )
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for idx, nt, nv in zip(members, test_counts, val_counts):
        perm = rng.permutation(idx)
        test.extend(perm[:nt])
        val.extend(perm[nt:nt + nv])
        train.extend(perm[nt + nv:])
    ids = dataset.sample_ids
    tr, va, te = (np.array(sorted(x), dtype=np.int64) for x in (train, val, test))
    return SplitAssignment(
        frozenset(ids[i] for i in tr),
        frozenset(ids[i] for i in va),
        frozenset(ids[i] for i in te),
        seed,
        tr,
        va,
        te,
    )
