import numpy as np
import pytest

from fairfuse.data import Attribute, AttributeSchema, Dataset, LabeledSample, ModelEntry, ModelPool


def make_dataset(rng, n, num_classes, group_counts, unknown=None):
    """Random dataset; ``group_counts[k]`` groups for attribute k."""
    attrs = tuple(
        Attribute(f"a{k}", tuple(f"g{k}_{j}" for j in range(c)),
                  None if unknown is None else f"g{k}_{unknown}")
        for k, c in enumerate(group_counts)
    )
    schema = AttributeSchema(attrs)
    samples = tuple(
        LabeledSample(f"s{i:04d}", int(rng.integers(num_classes)),
                      {a.name: int(rng.integers(len(a.groups))) for a in attrs})
        for i in range(n)
    )
    return Dataset(schema, num_classes, samples)


def make_pool(rng, n, num_classes, n_models, skill=0.6, labels=None):
    """Random probability pool; with ``labels`` each model is right about ``skill`` of the time."""
    entries = []
    for j in range(n_models):
        p = rng.dirichlet(np.ones(num_classes), size=n)
        if labels is not None:
            boost = rng.random(n) < skill
            p[boost, labels[boost]] += 2.0
            p /= p.sum(axis=1, keepdims=True)
        entries.append(ModelEntry(f"m{j}", p))
    return ModelPool(tuple(entries))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def three_model_config(num_samples=600):
    """Small three-model scenario with two attributes, for search tests."""
    from fairfuse.synthetic import SynthAttribute, SynthModel, SyntheticConfig

    age = SynthAttribute("age", ("young", "old"))
    site = SynthAttribute("site", ("head", "hand"))

    def acc(a_young, a_old, s_head, s_hand):
        return {"age": {"young": a_young, "old": a_old}, "site": {"head": s_head, "hand": s_hand}}

    return SyntheticConfig(
        num_classes=3,
        num_samples=num_samples,
        attributes=(age, site),
        models=(
            SynthModel("alpha", acc(0.85, 0.65, 0.84, 0.66)),
            SynthModel("beta", acc(0.84, 0.70, 0.86, 0.68)),
            SynthModel("gamma", acc(0.80, 0.72, 0.80, 0.72)),
        ),
        complementarity=0.25,
        unprivileged={"age": ("old",), "site": ("hand",)},
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
