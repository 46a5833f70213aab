"""CSV/JSON emitters (and parsers) for run outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from .controller import FusionSpec
from .data import Dataset, ModelPool, fmt_float
from .metrics import FairnessReport
from .search import Evaluation, SearchRecord

SEP = ";"


def _f(x) -> str:
    return "" if x is None else fmt_float(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# search history / pareto
# --------------------------------------------------------------------------


def history_header(attributes: Sequence[str]) -> list[str]:
    return ["episode", "reward", "accuracy", *(f"U_{a}" for a in attributes),
            "selected_models", "depth", "widths", "activations"]


def history_row(rec: SearchRecord, attributes: Sequence[str], model_names: Sequence[str]) -> list[str]:
    rep = rec.report
    return [
        str(rec.episode),
        _f(rec.reward),
        _f(rep.overall_accuracy if rep else None),
        *(_f(rep.per_attribute_unfairness[a] if rep else None) for a in attributes),
        SEP.join(model_names[i] for i in rec.spec.selected_models),
        str(rec.spec.depth),
        SEP.join(map(str, rec.spec.widths)),
        SEP.join(rec.spec.activations),
    ]


def write_history(path: str | Path, records: Sequence[SearchRecord], attributes: Sequence[str],
                  model_names: Sequence[str]) -> None:
    _write_csv(Path(path), history_header(attributes),
               (history_row(r, attributes, model_names) for r in records))


def write_timings(path: str | Path, records: Sequence[SearchRecord]) -> None:
    _write_csv(Path(path), ["episode", "seconds"], ([str(r.episode), _f(r.seconds)] for r in records))


def parse_history(path: str | Path, attributes: Sequence[str], model_names: Sequence[str]):
    """Read a history/pareto CSV back into ``(episode, FusionSpec, reward, accuracy, U)`` tuples."""
    out = []
    for row in read_csv(path):
        names = row["selected_models"].split(SEP)
        spec = FusionSpec(
            tuple(model_names.index(n) for n in names),
            int(row["depth"]),
            tuple(int(w) for w in row["widths"].split(SEP)) if row["widths"] else (),
            tuple(row["activations"].split(SEP)) if row["activations"] else (),
        )
        acc = float(row["accuracy"]) if row["accuracy"] else None
        u = {a: float(row[f"U_{a}"]) for a in attributes if row[f"U_{a}"]}
        out.append((int(row["episode"]), spec, float(row["reward"]), acc, u))
    return out


# --------------------------------------------------------------------------
# standalone model metrics
# --------------------------------------------------------------------------


def metrics_header(attributes: Sequence[str]) -> list[str]:
    return ["model", "split", "accuracy", *(f"U_{a}" for a in attributes), "multi_unfairness", "reward"]


def metrics_row(model: str, split: str, rep: FairnessReport, attributes: Sequence[str]) -> list[str]:
    return [model, split, _f(rep.overall_accuracy),
            *(_f(rep.per_attribute_unfairness[a]) for a in attributes),
            _f(rep.multi_unfairness), _f(rep.reward)]


def write_metrics(path, rows: Sequence[tuple[str, str, FairnessReport]], attributes) -> None:
    _write_csv(Path(path), metrics_header(attributes),
               (metrics_row(m, s, r, attributes) for m, s, r in rows))


def write_group_metrics(path, rows: Sequence[tuple[str, str, FairnessReport]]) -> None:
    out = []
    for model, split, rep in rows:
        for (a, g), v in rep.per_group_accuracy.items():
            out.append([model, split, a, g, _f(v)])
    _write_csv(Path(path), ["model", "split", "attribute", "group", "accuracy"], out)


BREAKDOWN_HEADER = ["model_a", "model_b", "split", "attribute", "group", "unprivileged", "n",
                    "both_wrong", "only_a", "only_b", "both_right"]


def write_breakdown(path, rows) -> None:
    _write_csv(Path(path), BREAKDOWN_HEADER,
               ([a, b, split, attr, g, str(int(unp)), str(n), *(_f(x) for x in fr)]
                for a, b, split, attr, g, unp, n, fr in rows))


def write_weights(directory: Path, dataset: Dataset, table) -> None:
    from .proxy import weights_to_rows

    groups, samples = weights_to_rows(dataset, table)
    _write_csv(directory / "weights_groups.csv", ["attribute", "group", "weight"],
               ([a, g, _f(w)] for a, g, w in groups))
    _write_csv(directory / "weights_samples.csv", ["sample_id", "weight"],
               ([s, str(w)] for s, w in samples))


# --------------------------------------------------------------------------
# best structure documents
# --------------------------------------------------------------------------


def best_document(record: SearchRecord, ev: Evaluation, test: FairnessReport, pool: ModelPool) -> dict:
    spec = record.spec.canonical()
    return {
        "episode": record.episode,
        "reward": record.reward,
        "spec": spec.to_json(),
        "selected_model_names": [pool.names[i] for i in spec.selected_models],
        "mlp": {
            "layer_widths": list(ev.mlp_spec.layer_widths),
            "activations": list(ev.mlp_spec.activations),
            "input_width": ev.mlp_spec.input_width,
            "num_classes": ev.mlp_spec.num_classes,
            "params": ev.params.to_json(),
        },
        "validation_report": record.report.to_json(),
        "test_report": test.to_json(),
    }


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
