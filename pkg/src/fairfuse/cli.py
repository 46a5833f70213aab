"""``muffin`` command line: synth, metrics, search, oracle.

Exit codes: 0 success, 1 I/O or validation failure, 2 infeasible
configuration, 3 oracle guard violation.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import report
from .controller import ControllerConfig, ControllerError, SearchSpace
from .data import DataError, load_dataset, load_pool, split_dataset, write_dataset, write_pool
from .fusion import TrainConfig
from .metrics import DEFAULT_EPSILON, disagreement_breakdown, full_report
from .proxy import ProxyError, identify_unprivileged
from .search import (
    GuardError,
    SearchConfig,
    SearchError,
    brute_force_oracle,
    run_search,
)
from .synthetic import InfeasibleConfig, SyntheticConfig, generate_synthetic, preset, realized_summary

log = logging.getLogger("fairfuse")

EXIT_OK, EXIT_IO, EXIT_INFEASIBLE, EXIT_GUARD = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# documented config keys and their defaults; flags use the same names with dashes
DEFAULTS = {
    "dataset": None,
    "schema": None,
    "pool": None,
    "out": "out",
    "seed": 0,
    "workers": 1,
    "episodes": 500,
    "n_select": 2,
    "depth_choices": [1, 2, 3],
    "width_choices": [8, 10, 12, 16, 18],
    "activation_choices": ["relu", "tanh", "sigmoid"],
    "hidden_size": 64,
    "gamma": 0.99,
    "baseline_decay": 0.9,
    "controller_batch": 5,
    "controller_lr": 0.01,
    "head_lr": 0.05,
    "epochs": 200,
    "batch_size": 32,
    "epsilon": DEFAULT_EPSILON,
    "margin": 0.0,
    "exclude_unknown": True,
    "unpriv_basis": "pool_mean",
    "proxy_mode": "weighted",
    "pin_model": None,
    "objectives": None,
    "checkpoint_every": 50,
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def build(cls, args: argparse.Namespace) -> "RunConfig":
        values = dict(DEFAULTS)
        if getattr(args, "config", None):
            try:
                file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            unknown = set(file_values) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            values.update(file_values)
        for key in DEFAULTS:
            v = getattr(args, key, None)
            if v is not None:
                values[key] = v
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        for key in ("seed", "workers", "episodes", "n_select", "hidden_size", "controller_batch",
                    "epochs", "batch_size", "checkpoint_every"):
            if not isinstance(v[key], int) or v[key] < 0:
                raise ConfigError(f"'{key}' must be a non-negative integer")
        for key in ("workers", "n_select", "hidden_size", "controller_batch", "epochs", "batch_size"):
            if v[key] < 1:
                raise ConfigError(f"'{key}' must be >= 1")
        for key in ("head_lr", "controller_lr", "epsilon"):
            if not v[key] > 0:
                raise ConfigError(f"'{key}' must be positive")
        if v["margin"] < 0:
            raise ConfigError("'margin' must be non-negative")

    def require_inputs(self) -> None:
        for key in ("dataset", "schema", "pool"):
            if not self.values[key]:
                raise ConfigError(f"missing '{key}' (flag --{key} or config key)")
            if not Path(self.values[key]).is_file():
                raise ConfigError(f"{key} file not found: {self.values[key]}")

    def search_config(self, pool_names, checkpoint_dir=None) -> SearchConfig:
        v = self.values
        pin = v["pin_model"]
        pin_idx = None
        if pin is not None:
            if pin not in pool_names:
                raise ConfigError(f"--pin-model '{pin}' is not in the pool {pool_names}")
            pin_idx = pool_names.index(pin)
        return SearchConfig(
            episodes=v["episodes"],
            seed=v["seed"],
            epsilon=v["epsilon"],
            margin=v["margin"],
            exclude_unknown=v["exclude_unknown"],
            unpriv_basis=v["unpriv_basis"],
            proxy_mode=v["proxy_mode"],
            pin_model=pin_idx,
            workers=v["workers"],
            objectives=tuple(v["objectives"]) if v["objectives"] else None,
            checkpoint_every=v["checkpoint_every"],
            checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
            train=TrainConfig(v["head_lr"], v["epochs"], v["batch_size"], 0),
            controller=ControllerConfig(v["hidden_size"], v["gamma"], v["baseline_decay"],
                                        v["controller_batch"], v["controller_lr"]),
        )

    def space(self, pool_size: int) -> SearchSpace:
        v = self.values
        return SearchSpace(pool_size, v["n_select"], tuple(v["depth_choices"]),
                           tuple(v["width_choices"]), tuple(v["activation_choices"]))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _str_list(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def _global_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, help="run seed (default 0)")
    g.add_argument("--out", help="output directory (default ./out)")
    g.add_argument("--config", help="JSON file with flat config keys; flags override it")
    g.add_argument("--workers", type=int, help="parallel candidate evaluations (1 = exact replay)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _input_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--dataset", help="dataset CSV (sample_id,label,<attributes>)")
    g.add_argument("--schema", help="schema JSON")
    g.add_argument("--pool", help="pool manifest JSON")
    g.add_argument("--epsilon", type=float, help="reward denominator floor (default 1e-3)")
    g.add_argument("--margin", type=float, help="accuracy gap below which a group is unprivileged")
    unk = g.add_mutually_exclusive_group()
    unk.add_argument("--exclude-unknown", dest="exclude_unknown", action="store_const", const=True,
                     help="never flag a schema's unknown group as unprivileged (default)")
    unk.add_argument("--include-unknown", dest="exclude_unknown", action="store_const", const=False,
                     help="allow the unknown group to be flagged")


def _search_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search space")
    g.add_argument("--n-select", dest="n_select", type=int, help="models united per structure")
    g.add_argument("--depth-choices", dest="depth_choices", type=_int_list, help="e.g. 1,2,3")
    g.add_argument("--width-choices", dest="width_choices", type=_int_list, help="e.g. 8,10,12,16,18")
    g.add_argument("--activation-choices", dest="activation_choices", type=_str_list,
                   help="subset of relu,tanh,sigmoid")
    g.add_argument("--pin-model", dest="pin_model", help="always include this pool model")
    g = p.add_argument_group("fusion head training")
    g.add_argument("--head-lr", dest="head_lr", type=float, help="learning rate (default 0.05)")
    g.add_argument("--epochs", type=int, help="training epochs (default 200)")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default 32)")
    g.add_argument("--proxy-mode", dest="proxy_mode", choices=["weighted", "unweighted", "original"],
                   help="training set for the head (default weighted)")
    g.add_argument("--unpriv-basis", dest="unpriv_basis", choices=["pool_mean", "per_episode"],
                   help="models averaged when flagging unprivileged groups")


def _controller_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("controller")
    g.add_argument("--episodes", type=int, help="search episodes (default 500)")
    g.add_argument("--hidden-size", dest="hidden_size", type=int, help="RNN hidden size (default 64)")
    g.add_argument("--gamma", type=float, help="step discount (default 0.99)")
    g.add_argument("--baseline-decay", dest="baseline_decay", type=float,
                   help="moving-average factor for the reward baseline (default 0.9)")
    g.add_argument("--controller-batch", dest="controller_batch", type=int,
                   help="episodes per policy update (default 5)")
    g.add_argument("--controller-lr", dest="controller_lr", type=float,
                   help="policy learning rate (default 0.01)")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   help="write a controller checkpoint every N episodes (default 50, 0 = off)")
    g.add_argument("--objectives", type=_str_list,
                   help="Pareto objectives, e.g. min:U:age,min:U:site,max:accuracy")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="muffin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write an engineered dataset and model pool")
    _global_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", help="complementary-2attr (default) or uniform-fair")
    src.add_argument("--synth-config", dest="synth_config", help="JSON synthetic configuration")
    p.add_argument("--complementarity", type=float, help="override the complementarity rate")
    p.add_argument("--num-samples", dest="num_samples", type=int, help="override the sample count")

    p = sub.add_parser("metrics", help="standalone metrics and disagreement breakdowns per pool model")
    _global_flags(p)
    _input_flags(p)

    p = sub.add_parser("search", help="controller-driven search for a fused structure")
    _global_flags(p)
    _input_flags(p)
    _search_flags(p)
    _controller_flags(p)

    p = sub.add_parser("oracle", help="train and score every structure in a small space")
    _global_flags(p)
    _input_flags(p)
    _search_flags(p)
    return parser


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or "out")
    if args.synth_config:
        try:
            cfg = SyntheticConfig.from_json(json.loads(Path(args.synth_config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot read synthetic config: {exc}") from exc
    else:
        try:
            cfg = preset(args.preset or "complementary-2attr")
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    overrides = {}
    if args.complementarity is not None:
        overrides["complementarity"] = args.complementarity
    if args.num_samples is not None:
        overrides["num_samples"] = args.num_samples
    if overrides:
        cfg = replace(cfg, **overrides)
    dataset, pool = generate_synthetic(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out / "dataset.csv", out / "schema.json")
    write_pool(pool, dataset, out)
    acc_rows, comp_rows = realized_summary(cfg, dataset, pool)
    print(f"wrote {len(dataset)} samples and {len(pool)} models to {out}")
    print("model,attribute,group,target,realized")
    for m, a, g, t, r in acc_rows:
        print(f"{m},{a},{g},{t:.4f},{r:.4f}")
    if comp_rows:
        print("model_a,model_b,attribute,group,target_complementarity,realized")
        for ma, mb, a, g, t, r in comp_rows:
            print(f"{ma},{mb},{a},{g},{t:.4f},{r:.4f}")
    return EXIT_OK


def _load_inputs(cfg: RunConfig):
    cfg.require_inputs()
    dataset = load_dataset(cfg.dataset, cfg.schema)
    pool = load_pool(cfg.pool, dataset)
    pool.check_aligned(dataset)
    return dataset, pool


def cmd_metrics(args) -> int:
    cfg = RunConfig.build(args)
    dataset, pool = _load_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    attrs = dataset.schema.names
    splits = {"all": None}
    if len(dataset) >= 5:
        sp = split_dataset(dataset, cfg.seed)
        splits.update(train=sp.train, val=sp.val, test=sp.test)
    rows = [(e.name, name, full_report(e.predictions, dataset, idx, cfg.epsilon))
            for e in pool.entries for name, idx in splits.items()]
    report.write_metrics(out / "baseline_metrics.csv", rows, attrs)
    report.write_group_metrics(out / "group_metrics.csv", rows)

    basis = splits["train"] if "train" in splits else np.arange(len(dataset))
    unpriv = identify_unprivileged(dataset, pool, basis, cfg.margin, cfg.exclude_unknown)
    breakdown = []
    for (i, a), (j, b) in itertools.combinations(enumerate(pool.entries), 2):
        for k, attr in enumerate(dataset.schema.attributes):
            for g, gname in enumerate(attr.groups):
                members = np.flatnonzero(dataset.groups[:, k] == g)
                if members.size == 0:
                    continue
                fr = disagreement_breakdown(a.predictions, b.predictions, dataset.labels, members)
                breakdown.append((a.name, b.name, "all", attr.name, gname,
                                  g in unpriv.groups[attr.name], len(members), fr))
    report.write_breakdown(out / "breakdown.csv", breakdown)
    for name, split, rep in rows:
        if split in ("all", "test"):
            us = " ".join(f"U_{a}={rep.per_attribute_unfairness[a]:.4f}" for a in attrs)
            print(f"{name:>20s} {split:>5s} acc={rep.overall_accuracy:.4f} {us} reward={rep.reward:.3f}")
    return EXIT_OK


def _prepare_search(args):
    cfg = RunConfig.build(args)
    dataset, pool = _load_inputs(cfg)
    split = split_dataset(dataset, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, dataset, pool, split, out


def cmd_search(args) -> int:
    cfg, dataset, pool, split, out = _prepare_search(args)
    ckpt = out / "checkpoints" if cfg.checkpoint_every else None
    sconf = cfg.search_config(pool.names, ckpt)
    space = cfg.space(len(pool))

    def progress(rec):
        log.info("episode %d reward %.4f %s", rec.episode, rec.reward, rec.spec.key())

    result = run_search(dataset, pool, split, space, sconf, progress)
    attrs = dataset.schema.names
    report.write_history(out / "history.csv", result.history, attrs, pool.names)
    report.write_timings(out / "timings.csv", result.history)
    report.write_history(out / "pareto.csv", list(result.pareto.records), attrs, pool.names)
    report.write_weights(out, dataset, result.context.weights)
    doc = report.best_document(result.best, result.best_eval, result.best_test, pool)
    doc["objectives"] = list(result.pareto.objectives)
    report.write_json(out / "best.json", doc)
    t = result.best_test
    print(f"best structure {result.best.spec.key()} (episode {result.best.episode})")
    print(f"validation reward {result.best.reward:.4f}; test accuracy {t.overall_accuracy:.4f}, "
          + ", ".join(f"U_{a}={t.per_attribute_unfairness[a]:.4f}" for a in attrs))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg, dataset, pool, split, out = _prepare_search(args)
    space = cfg.space(len(pool))
    count = space.count()
    print(f"search space has {count} structures")
    result = brute_force_oracle(dataset, pool, split, space, cfg.search_config(pool.names))
    doc = report.best_document(result.best, result.best_eval, result.best_test, pool)
    doc["structures"] = count
    report.write_json(out / "oracle_best.json", doc)
    report.write_history(out / "oracle_all.csv", result.records, dataset.schema.names, pool.names)
    print(f"oracle best {result.best.spec.key()} reward {result.best.reward:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "metrics": cmd_metrics, "search": cmd_search, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InfeasibleConfig as exc:
        print(f"infeasible configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except GuardError as exc:
        print(f"refusing to enumerate: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (ConfigError, DataError, ProxyError, ControllerError, SearchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
