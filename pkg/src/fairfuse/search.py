"""Episode loop, Pareto bookkeeping and an exhaustive oracle.

One episode: sample a structure from the controller, build the proxy set for
its models, train the head, score the fused predictor on the validation
split, and feed the reward back to the controller in batches of ``m``.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import (
    ControllerConfig,
    ControllerParams,
    FusionSpec,
    SearchSpace,
    init_controller,
    reinforce_update,
    sample_episode,
)
from .data import Dataset, ModelPool, SplitAssignment
from .fusion import MlpParams, MlpSpec, TrainConfig, fused_predict_many, init_mlp, train_arrays
from .metrics import DEFAULT_EPSILON, FairnessReport, full_report, reward
from .proxy import (
    UnprivilegedMap,
    WeightTable,
    compute_weights,
    identify_unprivileged,
    original_arrays,
    proxy_arrays,
)

log = logging.getLogger(__name__)

MAX_ORACLE_STRUCTURES = 10_000
PROXY_MODES = ("weighted", "unweighted", "original")


class SearchError(RuntimeError):
    pass


class GuardError(SearchError):
    def __init__(self, count: int, limit: int = MAX_ORACLE_STRUCTURES):
        super().__init__(f"search space has {count} structures, oracle limit is {limit}")
        self.count = count
        self.limit = limit


@dataclass(frozen=True)
class SearchConfig:
    episodes: int = 500
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    margin: float = 0.0
    exclude_unknown: bool = True
    unpriv_basis: str = "pool_mean"
    proxy_mode: str = "weighted"
    pin_model: int | None = None
    workers: int = 1
    objectives: tuple[str, ...] | None = None
    checkpoint_every: int = 50
    checkpoint_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if self.unpriv_basis not in ("pool_mean", "per_episode"):
            raise SearchError(f"unknown unpriv_basis '{self.unpriv_basis}'")
        if self.proxy_mode not in PROXY_MODES:
            raise SearchError(f"unknown proxy_mode '{self.proxy_mode}'")
        if self.workers < 1:
            raise SearchError("workers must be >= 1")


@dataclass
class SearchRecord:
    episode: int
    spec: FusionSpec
    report: FairnessReport | None
    seconds: float = 0.0
    error: str | None = None

    @property
    def reward(self) -> float:
        return 0.0 if self.report is None else self.report.reward


@dataclass(frozen=True)
class Evaluation:
    report: FairnessReport | None
    mlp_spec: MlpSpec | None
    params: MlpParams | None
    seconds: float
    error: str | None = None


# --------------------------------------------------------------------------
# pareto
# --------------------------------------------------------------------------


def default_objectives(attribute_names: Sequence[str]) -> tuple[str, ...]:
    return tuple(f"min:U:{a}" for a in attribute_names) + ("max:accuracy",)


def _signed(report: FairnessReport, objectives: Sequence[str]) -> tuple[float, ...]:
    # every objective turned into "larger is better"
    out = []
    for obj in objectives:
        direction, _, name = obj.partition(":")
        v = report.objective(name)
        if direction == "min":
            out.append(-v)
        elif direction == "max":
            out.append(v)
        else:
            raise SearchError(f"objective '{obj}' must start with 'min:' or 'max:'")
    return tuple(out)


def dominates(a: FairnessReport, b: FairnessReport, objectives: Sequence[str]) -> bool:
    va, vb = _signed(a, objectives), _signed(b, objectives)
    return all(x >= y for x, y in zip(va, vb)) and any(x > y for x, y in zip(va, vb))


@dataclass(frozen=True)
class ParetoSet:
    objectives: tuple[str, ...]
    records: tuple[SearchRecord, ...] = ()


def pareto_update(front: ParetoSet, candidate: SearchRecord,
                  objectives: Sequence[str] | None = None) -> ParetoSet:
    """Insert ``candidate`` iff nothing on the front dominates it; evict what it dominates.

    A structure already on the front is not inserted twice.
    """
    objectives = tuple(objectives or front.objectives)
    if candidate.report is None:
        return front
    key = candidate.spec.key()
    if any(r.spec.key() == key for r in front.records):
        return front
    if any(dominates(r.report, candidate.report, objectives) for r in front.records):
        return front
    kept = tuple(r for r in front.records if not dominates(candidate.report, r.report, objectives))
    return ParetoSet(objectives, kept + (candidate,))


# --------------------------------------------------------------------------
# candidate evaluation
# --------------------------------------------------------------------------


@dataclass
class SearchContext:
    dataset: Dataset
    pool: ModelPool
    split: SplitAssignment
    unpriv: UnprivilegedMap
    weights: WeightTable
    config: SearchConfig

    @classmethod
    def prepare(cls, dataset: Dataset, pool: ModelPool, split: SplitAssignment,
                config: SearchConfig) -> "SearchContext":
        pool.check_aligned(dataset)
        # one-time pre-processing, independent of which models an episode picks
        unpriv = identify_unprivileged(dataset, pool, split.train, config.margin, config.exclude_unknown)
        weights = compute_weights(dataset, split.train, unpriv)
        return cls(dataset, pool, split, unpriv, weights, config)


def training_seed(run_seed: int, spec: FusionSpec) -> int:
    """Head-training seed, a pure function of the run seed and the structure."""
    ss = np.random.SeedSequence([run_seed, zlib.crc32(spec.key().encode())])
    return int(ss.generate_state(1)[0])


def training_arrays(ctx: SearchContext, selected: Sequence[int]):
    cfg = ctx.config
    ds, pool, train = ctx.dataset, ctx.pool, ctx.split.train
    if cfg.proxy_mode == "original":
        return original_arrays(ds, pool, selected, train)
    if cfg.unpriv_basis == "per_episode":
        unpriv = identify_unprivileged(ds, pool, train, cfg.margin, cfg.exclude_unknown, selected)
        weights = compute_weights(ds, train, unpriv)
    else:
        unpriv, weights = ctx.unpriv, ctx.weights
    rows, X, Y, w = proxy_arrays(ds, pool, selected, train, unpriv, weights)
    if cfg.proxy_mode == "unweighted":
        w = np.ones_like(w)
    return rows, X, Y, w


def train_head(ctx: SearchContext, spec: FusionSpec) -> tuple[MlpSpec, MlpParams]:
    spec = spec.canonical()
    selected = spec.selected_models
    m = ctx.dataset.num_classes
    mlp = MlpSpec(spec.widths, spec.activations, len(selected) * m, m)
    tc = ctx.config.train
    cfg = TrainConfig(tc.learning_rate, tc.epochs, tc.batch_size, training_seed(ctx.config.seed, spec))
    _, X, Y, w = training_arrays(ctx, selected)
    if len(X) == 0:
        log.warning("empty proxy set for %s; head left at initialisation", spec.key())
        return mlp, init_mlp(mlp, cfg.seed)
    return mlp, train_arrays(mlp, X, Y, w, cfg)


def evaluate_spec(ctx: SearchContext, spec: FusionSpec, split_name: str = "val") -> Evaluation:
    t0 = time.perf_counter()
    try:
        mlp, params = train_head(ctx, spec)
        rows = ctx.split.indices(split_name)
        pred = fused_predict_many(ctx.pool, spec.canonical().selected_models, params, mlp, rows)
        report = full_report(pred, ctx.dataset, rows, ctx.config.epsilon)
    except Exception as exc:  # noqa: BLE001 - failed candidates score 0, the search goes on
        log.warning("evaluation of %s failed: %s", spec.key(), exc)
        return Evaluation(None, None, None, time.perf_counter() - t0, str(exc))
    return Evaluation(report, mlp, params, time.perf_counter() - t0)


def test_report(ctx: SearchContext, spec: FusionSpec, ev: Evaluation,
                split_name: str = "test") -> FairnessReport:
    rows = ctx.split.indices(split_name)
    pred = fused_predict_many(ctx.pool, spec.canonical().selected_models, ev.params, ev.mlp_spec, rows)
    return full_report(pred, ctx.dataset, rows, ctx.config.epsilon)


_WORKER_CTX: SearchContext | None = None


def _worker_init(ctx: SearchContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker_eval(spec: FusionSpec) -> Evaluation:
    return evaluate_spec(_WORKER_CTX, spec)


class Evaluator:
    """Memoised candidate evaluation, optionally fanned out to worker processes."""

    def __init__(self, ctx: SearchContext):
        self.ctx = ctx
        self.cache: dict[str, Evaluation] = {}
        self._executor = None
        if ctx.config.workers > 1:
            self._executor = ProcessPoolExecutor(
                ctx.config.workers, initializer=_worker_init, initargs=(ctx,)
            )

    def evaluate(self, specs: Sequence[FusionSpec]) -> list[Evaluation]:
        todo = []
        for s in specs:
            k = s.key()
            if k not in self.cache and k not in {t.key() for t in todo}:
                todo.append(s)
        if self._executor is not None and len(todo) > 1:
            results = list(self._executor.map(_worker_eval, todo))
        else:
            results = [evaluate_spec(self.ctx, s) for s in todo]
        for s, r in zip(todo, results):
            self.cache[s.key()] = r
        return [self.cache[s.key()] for s in specs]

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------


@dataclass
class SearchResult:
    history: list[SearchRecord]
    pareto: ParetoSet
    best: SearchRecord
    best_test: FairnessReport
    best_eval: Evaluation
    controller: ControllerParams
    context: SearchContext


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5EA7C4, episode]).generate_state(1)[0])


def run_search(dataset: Dataset, pool: ModelPool, split: SplitAssignment, space: SearchSpace,
               config: SearchConfig | None = None, progress=None) -> SearchResult:
    config = config or SearchConfig()
    if config.episodes <= 0:
        raise SearchError("no episodes requested")
    if space.pool_size != len(pool):
        raise SearchError(f"search space expects {space.pool_size} models, pool has {len(pool)}")
    ctx = SearchContext.prepare(dataset, pool, split, config)
    objectives = config.objectives or default_objectives(dataset.schema.names)
    controller = init_controller(space, config.controller, seed=config.seed)
    m = config.controller.batch_size
    history: list[SearchRecord] = []
    front = ParetoSet(tuple(objectives))
    evaluator = Evaluator(ctx)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    try:
        for start in range(0, config.episodes, m):
            episodes = range(start, min(start + m, config.episodes))
            traces = [sample_episode(controller, space, _episode_seed(config.seed, ep), config.pin_model)
                      for ep in episodes]
            t0 = time.perf_counter()
            evals = evaluator.evaluate([tr.spec for tr in traces])
            batch_seconds = time.perf_counter() - t0
            for ep, tr, ev in zip(episodes, traces, evals):
                rec = SearchRecord(ep, tr.spec, ev.report, ev.seconds if ev.seconds else batch_seconds, ev.error)
                tr.reward = rec.reward
                history.append(rec)
                front = pareto_update(front, rec, objectives)
                if progress is not None:
                    progress(rec)
            controller = reinforce_update(controller, space, traces, config.pin_model)
            done = episodes[-1] + 1
            if ckpt_dir is not None and config.checkpoint_every and (
                done % config.checkpoint_every == 0 or done == config.episodes
            ):
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                (ckpt_dir / f"controller_ep{done:05d}.json").write_text(
                    json.dumps(checkpoint_json(controller, space, done)), encoding="utf-8"
                )
    finally:
        evaluator.close()
    ok = [r for r in history if r.report is not None]
    if not ok:
        raise SearchError("every episode failed")
    best = max(ok, key=lambda r: (r.reward, -r.episode))
    best_eval = evaluator.cache[best.spec.key()]
    return SearchResult(history, front, best, test_report(ctx, best.spec, best_eval),
                        best_eval, controller, ctx)


def checkpoint_json(controller: ControllerParams, space: SearchSpace, episode: int) -> dict:
    obj = controller.to_json()
    obj["episode"] = episode
    obj["space"] = space.to_json()
    return obj


@dataclass
class OracleResult:
    best: SearchRecord
    records: list[SearchRecord]
    best_test: FairnessReport
    best_eval: Evaluation


def brute_force_oracle(dataset: Dataset, pool: ModelPool, split: SplitAssignment,
                       space: SearchSpace, config: SearchConfig | None = None) -> OracleResult:
    """Train and score every structure in ``space``; return the max-reward one."""
    config = config or SearchConfig()
    count = space.count()
    if count > MAX_ORACLE_STRUCTURES:
        raise GuardError(count)
    ctx = SearchContext.prepare(dataset, pool, split, config)
    evaluator = Evaluator(ctx)
    specs = [s for s in space.enumerate()
             if config.pin_model is None or config.pin_model in s.selected_models]
    try:
        evals = evaluator.evaluate(specs)
    finally:
        evaluator.close()
    records = [SearchRecord(i, s, ev.report, ev.seconds, ev.error)
               for i, (s, ev) in enumerate(zip(specs, evals))]
    ok = [r for r in records if r.report is not None]
    if not ok:
        raise SearchError("every structure failed")
    best = max(ok, key=lambda r: (r.reward, -r.episode))
    best_eval = evaluator.cache[best.spec.key()]
    return OracleResult(best, records, test_report(ctx, best.spec, best_eval), best_eval)


def recomputed_reward(record: SearchRecord, epsilon: float = DEFAULT_EPSILON) -> float:
    if record.report is None:
        return 0.0
    return reward(record.report.overall_accuracy, record.report.per_attribute_unfairness, epsilon)
