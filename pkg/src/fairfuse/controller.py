"""Recurrent policy over fusion structures, trained with REINFORCE.

A structure is emitted one decision at a time: ``n_select`` pool models
(already-chosen models are masked out), the head depth, then a width and an
activation for each hidden layer.  Every step feeds the embedding of the
previous action through a tanh RNN cell and samples from a step-specific
softmax decoder.  All gradients are hand-written backprop through time.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import ACTIVATIONS


class ControllerError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    pool_size: int
    n_select: int = 2
    depth_choices: tuple[int, ...] = (1, 2, 3)
    width_choices: tuple[int, ...] = (8, 10, 12, 16, 18)
    activation_choices: tuple[str, ...] = ("relu", "tanh", "sigmoid")

    def __post_init__(self):
        for name in ("depth_choices", "width_choices", "activation_choices"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 1 <= self.n_select <= self.pool_size:
            raise ControllerError(f"n_select={self.n_select} must lie in [1, pool_size={self.pool_size}]")
        if not (self.depth_choices and self.width_choices and self.activation_choices):
            raise ControllerError("choice lists must be non-empty")
        if min(self.depth_choices) < 1 or min(self.width_choices) < 1:
            raise ControllerError("depths and widths must be positive")
        for a in self.activation_choices:
            if a not in ACTIVATIONS:
                raise ControllerError(f"unknown activation '{a}'")

    @property
    def max_steps(self) -> int:
        return self.n_select + 1 + 2 * max(self.depth_choices)

    def step_kinds(self, depth: int | None = None) -> list[str]:
        """Kinds of the decision steps; all possible steps if ``depth`` is None."""
        d = max(self.depth_choices) if depth is None else depth
        return ["model"] * self.n_select + ["depth"] + ["width", "activation"] * d

    def n_choices(self, kind: str) -> int:
        return {
            "model": self.pool_size,
            "depth": len(self.depth_choices),
            "width": len(self.width_choices),
            "activation": len(self.activation_choices),
        }[kind]

    def action_offset(self, kind: str) -> int:
        order = ["model", "depth", "width", "activation"]
        return sum(self.n_choices(k) for k in order[: order.index(kind)])

    @property
    def vocab_size(self) -> int:
        # every action plus a start token
        return sum(self.n_choices(k) for k in ("model", "depth", "width", "activation")) + 1

    def count(self) -> int:
        per_depth = sum(
            (len(self.width_choices) * len(self.activation_choices)) ** d for d in self.depth_choices
        )
        return math.comb(self.pool_size, self.n_select) * per_depth

    def enumerate(self):
        """Every structure with models in ascending order."""
        for models in itertools.combinations(range(self.pool_size), self.n_select):
            for depth in self.depth_choices:
                for widths in itertools.product(self.width_choices, repeat=depth):
                    for acts in itertools.product(self.activation_choices, repeat=depth):
                        yield FusionSpec(models, depth, widths, acts)

    def to_json(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "n_select": self.n_select,
            "depth_choices": list(self.depth_choices),
            "width_choices": list(self.width_choices),
            "activation_choices": list(self.activation_choices),
        }


@dataclass(frozen=True)
class FusionSpec:
    selected_models: tuple[int, ...]
    depth: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "selected_models", tuple(int(i) for i in self.selected_models))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(set(self.selected_models)) != len(self.selected_models):
            raise ControllerError("selected models must be distinct")
        if len(self.widths) != self.depth or len(self.activations) != self.depth:
            raise ControllerError("widths/activations must have one entry per layer")

    def canonical(self) -> "FusionSpec":
        """Same structure with models in ascending order (order does not change the head)."""
        return replace(self, selected_models=tuple(sorted(self.selected_models)))

    def key(self) -> str:
        c = self.canonical()
        return (
            "m=" + ",".join(map(str, c.selected_models))
            + "|w=" + ",".join(map(str, c.widths))
            + "|a=" + ",".join(c.activations)
        )

    def to_json(self) -> dict:
        return {
            "selected_models": list(self.selected_models),
            "depth": self.depth,
            "widths": list(self.widths),
            "activations": list(self.activations),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FusionSpec":
        return cls(tuple(obj["selected_models"]), int(obj["depth"]),
                   tuple(obj["widths"]), tuple(obj["activations"]))


@dataclass(frozen=True)
class ControllerConfig:
    hidden_size: int = 64
    gamma: float = 0.99
    baseline_decay: float = 0.9
    batch_size: int = 5
    learning_rate: float = 0.01
    init_scale: float = 0.1

    def __post_init__(self):
        if self.hidden_size < 1 or self.batch_size < 1:
            raise ControllerError("hidden_size and batch_size must be positive")
        if not 0 < self.gamma <= 1 or not 0 <= self.baseline_decay < 1:
            raise ControllerError("gamma must be in (0, 1], baseline_decay in [0, 1)")
        if self.learning_rate <= 0:
            raise ControllerError("learning_rate must be positive")


@dataclass
class ControllerParams:
    w_ih: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray
    embed: np.ndarray
    dec_w: list[np.ndarray]
    dec_b: list[np.ndarray]
    config: ControllerConfig = field(default_factory=ControllerConfig)
    baseline: float | None = None
    step: int = 0

    def arrays(self) -> list[np.ndarray]:
        return [self.w_ih, self.w_hh, self.b_h, self.embed, *self.dec_w, *self.dec_b]

    def copy(self) -> "ControllerParams":
        return ControllerParams(
            self.w_ih.copy(), self.w_hh.copy(), self.b_h.copy(), self.embed.copy(),
            [w.copy() for w in self.dec_w], [b.copy() for b in self.dec_b],
            self.config, self.baseline, self.step,
        )

    def zeros_like(self) -> "ControllerParams":
        return ControllerParams(
            np.zeros_like(self.w_ih), np.zeros_like(self.w_hh), np.zeros_like(self.b_h),
            np.zeros_like(self.embed), [np.zeros_like(w) for w in self.dec_w],
            [np.zeros_like(b) for b in self.dec_b], self.config,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def to_json(self) -> dict:
        def mat(a):
            a = np.atleast_2d(a)
            return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(v) for v in a.ravel()]}

        return {
            "w_ih": mat(self.w_ih),
            "w_hh": mat(self.w_hh),
            "b_h": [float(v) for v in self.b_h],
            "embed": mat(self.embed),
            "dec_w": [mat(w) for w in self.dec_w],
            "dec_b": [[float(v) for v in b] for b in self.dec_b],
            "baseline": self.baseline,
            "step": self.step,
            "config": self.config.__dict__.copy(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ControllerParams":
        def mat(m):
            return np.array(m["data"], dtype=np.float64).reshape(m["rows"], m["cols"])

        return cls(
            mat(obj["w_ih"]), mat(obj["w_hh"]), np.array(obj["b_h"], dtype=np.float64),
            mat(obj["embed"]), [mat(w) for w in obj["dec_w"]],
            [np.array(b, dtype=np.float64) for b in obj["dec_b"]],
            ControllerConfig(**obj["config"]), obj["baseline"], int(obj["step"]),
        )


@dataclass
class EpisodeTrace:
    spec: FusionSpec
    actions: list[int]
    log_probs: list[float]
    reward: float | None = None


def init_controller(space: SearchSpace, config: ControllerConfig | None = None,
                    seed: int = 0) -> ControllerParams:
    config = config or ControllerConfig()
    rng = np.random.default_rng(seed)
    h = config.hidden_size
    s = config.init_scale

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    kinds = space.step_kinds()
    return ControllerParams(
        w_ih=u(h, h),
        w_hh=u(h, h),
        b_h=np.zeros(h),
        embed=u(space.vocab_size, h),
        dec_w=[u(space.n_choices(k), h) for k in kinds],
        dec_b=[np.zeros(space.n_choices(k)) for k in kinds],
        config=config,
    )


def _check_params(params: ControllerParams, space: SearchSpace) -> None:
    kinds = space.step_kinds()
    if len(params.dec_w) != len(kinds):
        raise ControllerError(
            f"controller has {len(params.dec_w)} decoders, search space needs {len(kinds)}"
        )
    for t, k in enumerate(kinds):
        if params.dec_w[t].shape[0] != space.n_choices(k):
            raise ControllerError(f"decoder {t} has the wrong number of choices for a '{k}' step")
    if params.embed.shape[0] != space.vocab_size:
        raise ControllerError("embedding table does not match the search space")


class _Rollout:
    """Step-by-step policy evaluation shared by sampling, scoring and backprop."""

    def __init__(self, params: ControllerParams, space: SearchSpace, pin: int | None = None):
        self.params = params
        self.space = space
        self.pin = pin
        self.h = np.zeros(params.config.hidden_size)
        self.prev_token = space.vocab_size - 1  # start token
        self.chosen_models: list[int] = []
        self.kinds = ["model"] * space.n_select + ["depth"]
        self.t = 0
        # per-step records for backprop
        self.tokens: list[int] = []
        self.hs: list[np.ndarray] = [self.h]
        self.probs: list[np.ndarray] = []

    def mask(self, kind: str) -> np.ndarray | None:
        if kind != "model":
            return None
        m = np.ones(self.space.pool_size, dtype=bool)
        m[self.chosen_models] = False
        if self.pin is not None and not self.chosen_models:
            m[:] = False
            m[self.pin] = True
        return m

    def distribution(self) -> np.ndarray:
        p = self.params
        kind = self.kinds[self.t]
        x = p.embed[self.prev_token]
        h = np.tanh(p.w_ih @ x + p.w_hh @ self.h + p.b_h)
        logits = p.dec_w[self.t] @ h + p.dec_b[self.t]
        mask = self.mask(kind)
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        z = logits - logits.max()
        e = np.exp(z)
        probs = e / e.sum()
        self._pending = (h, probs)
        return probs

    def commit(self, choice: int) -> None:
        h, probs = self._pending
        kind = self.kinds[self.t]
        if probs[choice] <= 0:
            raise ControllerError(f"action {choice} is masked at step {self.t}")
        self.tokens.append(self.prev_token)
        self.probs.append(probs)
        self.h = h
        self.hs.append(h)
        if kind == "model":
            self.chosen_models.append(choice)
        elif kind == "depth":
            depth = self.space.depth_choices[choice]
            self.kinds += ["width", "activation"] * depth
        self.prev_token = self.space.action_offset(kind) + choice
        self.t += 1

    @property
    def done(self) -> bool:
        return self.t == len(self.kinds)

    def clone(self) -> "_Rollout":
        other = object.__new__(_Rollout)
        other.__dict__.update(self.__dict__)
        for name in ("chosen_models", "kinds", "tokens", "hs", "probs"):
            setattr(other, name, list(getattr(self, name)))
        return other


def _categorical(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    if i >= len(probs) or probs[i] == 0:
        i = int(np.flatnonzero(probs > 0)[-1])
    return i


def _spec_from_actions(space: SearchSpace, actions: list[int]) -> FusionSpec:
    n = space.n_select
    models = tuple(actions[:n])
    depth = space.depth_choices[actions[n]]
    rest = actions[n + 1:]
    widths = tuple(space.width_choices[a] for a in rest[0::2])
    acts = tuple(space.activation_choices[a] for a in rest[1::2])
    return FusionSpec(models, depth, widths, acts)


def _actions_from_spec(space: SearchSpace, spec: FusionSpec) -> list[int]:
    if len(spec.selected_models) != space.n_select:
        raise ControllerError(f"spec selects {len(spec.selected_models)} models, space needs {space.n_select}")
    try:
        actions = list(spec.selected_models)
        if any(not 0 <= a < space.pool_size for a in actions):
            raise ValueError("model index")
        actions.append(space.depth_choices.index(spec.depth))
        for w, a in zip(spec.widths, spec.activations):
            actions += [space.width_choices.index(w), space.activation_choices.index(a)]
    except ValueError as exc:
        raise ControllerError(f"spec {spec} is not realizable in the search space ({exc})") from None
    return actions


def sample_episode(params: ControllerParams, space: SearchSpace, seed: int,
                   pin: int | None = None) -> EpisodeTrace:
    """Sample one structure; deterministic in ``seed``.

    ``pin`` forces the first model choice to that pool index.
    """
    _check_params(params, space)
    rng = np.random.default_rng(seed)
    roll = _Rollout(params, space, pin)
    actions, logps = [], []
    while not roll.done:
        probs = roll.distribution()
        a = _categorical(probs, rng.random())
        roll.commit(a)
        actions.append(a)
        logps.append(float(np.log(probs[a])))
    return EpisodeTrace(_spec_from_actions(space, actions), actions, logps)


def sample_many(params: ControllerParams, space: SearchSpace, n: int, seed: int,
                pin: int | None = None) -> list[FusionSpec]:
    """Draw ``n`` structures from a single RNG stream.

    Step distributions are memoised by action prefix; exact, because the
    policy is a deterministic function of the prefix.
    """
    _check_params(params, space)
    rng = np.random.default_rng(seed)
    root = _Rollout(params, space, pin)
    root.distribution()
    cache: dict[tuple, _Rollout] = {(): root}
    out = []
    for _ in range(n):
        node, prefix = root, ()
        while not node.done:
            a = _categorical(node._pending[1], rng.random())
            prefix = prefix + (a,)
            child = cache.get(prefix)
            if child is None:
                child = node.clone()
                child.commit(a)
                if not child.done:
                    child.distribution()
                cache[prefix] = child
            node = child
        out.append(_spec_from_actions(space, list(prefix)))
    return out


def _replay(params: ControllerParams, space: SearchSpace, actions, pin=None) -> _Rollout:
    roll = _Rollout(params, space, pin)
    for a in actions:
        if roll.done:
            raise ControllerError("action sequence longer than the structure it encodes")
        probs = roll.distribution()
        if not 0 <= a < len(probs):
            raise ControllerError(f"action {a} out of range at step {roll.t}")
        roll.commit(a)
    if not roll.done:
        raise ControllerError("action sequence ends before the structure is complete")
    return roll


def episode_logprob(params: ControllerParams, space: SearchSpace, spec: FusionSpec,
                    pin: int | None = None) -> float:
    """log-probability of emitting ``spec`` in exactly this model order."""
    _check_params(params, space)
    actions = _actions_from_spec(space, spec)
    roll = _replay(params, space, actions, pin)
    return float(sum(np.log(p[a]) for p, a in zip(roll.probs, actions)))


def logprob_gradient(params: ControllerParams, space: SearchSpace, actions,
                     coefs, pin: int | None = None, out: ControllerParams | None = None):
    """Accumulate ``sum_t coefs[t] * grad log pi(a_t | a_<t)`` into ``out``."""
    roll = _replay(params, space, actions, pin)
    g = params.zeros_like() if out is None else out
    dh_next = np.zeros(params.config.hidden_size)
    for t in range(len(actions) - 1, -1, -1):
        probs = roll.probs[t]
        h = roll.hs[t + 1]
        h_prev = roll.hs[t]
        dlogits = -coefs[t] * probs
        dlogits[actions[t]] += coefs[t]
        g.dec_w[t] += np.outer(dlogits, h)
        g.dec_b[t] += dlogits
        dh = params.dec_w[t].T @ dlogits + dh_next
        da = dh * (1.0 - h * h)
        x = params.embed[roll.tokens[t]]
        g.w_ih += np.outer(da, x)
        g.w_hh += np.outer(da, h_prev)
        g.b_h += da
        g.embed[roll.tokens[t]] += params.w_ih.T @ da
        dh_next = params.w_hh.T @ da
    return g


def policy_gradient(params: ControllerParams, space: SearchSpace, traces, baseline: float,
                    pin: int | None = None) -> ControllerParams:
    """Monte Carlo estimate (1/m) sum_k sum_t gamma^(T-t) grad log pi (R_k - b)."""
    gamma = params.config.gamma
    g = params.zeros_like()
    m = len(traces)
    for tr in traces:
        adv = tr.reward - baseline
        T = len(tr.actions)
        coefs = [gamma ** (T - t) * adv / m for t in range(1, T + 1)]
        logprob_gradient(params, space, tr.actions, coefs, pin, out=g)
    return g


def reinforce_update(params: ControllerParams, space: SearchSpace, batch,
                     pin: int | None = None) -> ControllerParams:
    """One ascent step on the batch, then the moving-average baseline update."""
    if not batch:
        raise ControllerError("empty batch")
    if any(tr.reward is None for tr in batch):
        raise ControllerError("every trace needs a reward")
    mean_r = float(np.mean([tr.reward for tr in batch]))
    b = mean_r if params.baseline is None else params.baseline
    g = policy_gradient(params, space, batch, b, pin)
    if not all(np.all(np.isfinite(a)) for a in g.arrays()):
        raise ControllerError("non-finite policy gradient")
    new = params.copy()
    lr = params.config.learning_rate
    for p, d in zip(new.arrays(), g.arrays()):
        p += lr * d
    beta = params.config.baseline_decay
    new.baseline = beta * b + (1 - beta) * mean_r
    new.step = params.step + 1
    return new
