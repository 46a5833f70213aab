import numpy as np
import pytest

from conftest import make_pool
from fairfuse.data import ModelEntry, ModelPool
from fairfuse.fusion import (
    MlpParams,
    MlpSpec,
    TrainConfig,
    TrainingDiverged,
    forward,
    forward_batch,
    fused_predict,
    fused_predict_many,
    gradient,
    gradient_arrays,
    init_mlp,
    loss,
    loss_arrays,
    train,
    train_arrays,
)
from fairfuse.proxy import ProxySample

ACTS = ("relu", "tanh", "sigmoid")


def test_init_shapes_and_determinism():
    spec = MlpSpec((4,), ("relu",), 6, 3)
    p = init_mlp(spec, 7)
    assert [w.shape for w in p.weights] == [(4, 6), (3, 4)]
    assert [b.shape for b in p.biases] == [(4,), (3,)]
    q = init_mlp(spec, 7)
    assert all(np.array_equal(a, b) for a, b in zip(p.flat(), q.flat()))
    assert all(np.all(b == 0) for b in p.biases)


def test_init_is_glorot_uniform():
    spec = MlpSpec((100,), ("tanh",), 100, 2)
    draws = init_mlp(spec, 0).weights[0].ravel()
    assert draws.size == 10_000
    limit = np.sqrt(6 / 200)
    assert np.abs(draws).max() <= limit
    se = limit / np.sqrt(3) / np.sqrt(draws.size)
    assert abs(draws.mean()) < 3 * se


def test_forward_examples():
    spec = MlpSpec((3,), ("tanh",), 4, 5)
    zero = MlpParams([np.zeros(s) for s in spec.shapes], [np.zeros(s[0]) for s in spec.shapes])
    np.testing.assert_allclose(forward(zero, spec, [0.3, 0.1, 0.5, 0.1]), np.full(5, 0.2))

    spec = MlpSpec((2,), ("relu",), 2, 2)
    eye = MlpParams([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    np.testing.assert_allclose(forward(eye, spec, [1, 0]), [0.7311, 0.2689], atol=1e-4)
    with pytest.raises(ValueError):
        forward(eye, spec, [1, 0, 0])


def test_output_is_a_distribution(rng):
    spec = MlpSpec((7, 5), ("sigmoid", "relu"), 6, 4)
    p = init_mlp(spec, 1)
    P = forward_batch(p, spec, rng.normal(scale=3, size=(1000, 6)))
    assert P.min() >= 0
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_loss_examples():
    spec = MlpSpec((2,), ("relu",), 2, 2)
    zero = MlpParams([np.zeros(s) for s in spec.shapes], [np.zeros(s[0]) for s in spec.shapes])
    one = [ProxySample("s", np.array([0.5, 0.5]), np.array([1.0, 0.0]), 2.0)]
    assert loss(zero, spec, one) == pytest.approx(0.5)

    X = np.array([[0.2, 0.8], [0.9, 0.1]])
    Y = np.eye(2)[[1, 0]]
    p = init_mlp(spec, 3)
    w = np.array([1.0, 3.0])
    assert loss_arrays(p, spec, X, Y, 2 * w) == pytest.approx(2 * loss_arrays(p, spec, X, Y, w))


def test_perfect_fit_has_zero_loss():
    spec = MlpSpec((1,), ("relu",), 2, 2)
    # saturated output equal to the target up to rounding
    p = MlpParams([np.zeros((1, 2)), np.zeros((2, 1))], [np.zeros(1), np.array([800.0, 0.0])])
    assert loss_arrays(p, spec, np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]), np.ones(1)) == 0.0


def numeric_gradient(params, spec, X, Y, w, h=1e-5):
    out = []
    for arrs in (params.weights, params.biases):
        for a in arrs:
            g = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                up = loss_arrays(params, spec, X, Y, w)
                a[idx] = old - h
                down = loss_arrays(params, spec, X, Y, w)
                a[idx] = old
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    return np.concatenate([g.ravel() for g in out])


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)


def random_case(rng):
    depth = int(rng.integers(1, 4))
    spec = MlpSpec(
        tuple(int(x) for x in rng.integers(1, 9, size=depth)),
        tuple(ACTS[int(i)] for i in rng.integers(0, 3, size=depth)),
        int(rng.integers(2, 4)) * 3,
        3,
    )
    n = int(rng.integers(1, 12))
    X = rng.dirichlet(np.ones(3), size=(n, spec.input_width // 3)).reshape(n, -1)
    Y = np.eye(3)[rng.integers(3, size=n)]
    w = rng.uniform(0, 2, size=n)
    return spec, init_mlp(spec, int(rng.integers(1 << 30))), X, Y, w


def flat_grad(g):
    return np.concatenate([a.ravel() for a in (*g.weights, *g.biases)])


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec, params, X, Y, w = random_case(rng)
    _, g = gradient_arrays(params, spec, X, Y, w)
    num = numeric_gradient(params, spec, X, Y, w)
    assert relative_error(flat_grad(g), num).max() < 1e-4


def test_zero_weight_samples_have_no_gradient(rng):
    spec, params, X, Y, w = random_case(rng)
    _, g = gradient_arrays(params, spec, X, Y, np.zeros(len(w)))
    assert np.all(flat_grad(g) == 0)
    batch = [ProxySample("a", X[0], Y[0], 0.0)]
    assert np.all(flat_grad(gradient(params, spec, batch)) == 0)


def test_gradient_vanishes_at_a_finite_minimum():
    # both inputs carry mixed labels, so the optimum output is finite
    X = np.array([[1.0, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]])
    Y = np.eye(2)[[0, 0, 1, 1, 1, 0]]
    spec = MlpSpec((4,), ("tanh",), 2, 2)
    p = train_arrays(spec, X, Y, np.ones(6), TrainConfig(1.0, 2000, 6, 0))
    _, g = gradient_arrays(p, spec, X, Y, np.ones(6))
    assert np.linalg.norm(flat_grad(g)) < 1e-6
    np.testing.assert_allclose(forward(p, spec, [1, 0]), [2 / 3, 1 / 3], atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_training_does_not_increase_loss(seed):
    rng = np.random.default_rng(seed)
    spec, _, X, Y, w = random_case(rng)
    cfg = TrainConfig(0.05, 50, 4, seed)
    before = loss_arrays(init_mlp(spec, seed), spec, X, Y, w)
    after = loss_arrays(train_arrays(spec, X, Y, w, cfg), spec, X, Y, w)
    assert after <= before


def test_xor_is_learnt():
    X = np.array([[0.0, 0], [0, 1], [1, 0], [1, 1]])
    Y = np.eye(2)[[0, 1, 1, 0]]
    spec = MlpSpec((8,), ("tanh",), 2, 2)
    solved = 0
    for seed in range(10):
        p = train_arrays(spec, X, Y, np.ones(4), TrainConfig(0.5, 200, 32, seed))
        solved += loss_arrays(p, spec, X, Y, np.ones(4)) < 0.05
    assert solved >= 8


def test_training_is_deterministic(rng):
    spec, _, X, Y, w = random_case(rng)
    proxy = [ProxySample(str(i), X[i], Y[i], float(w[i])) for i in range(len(w))]
    a = train(spec, proxy, TrainConfig(0.05, 20, 3, 9))
    b = train(spec, proxy, TrainConfig(0.05, 20, 3, 9))
    assert np.array_equal(a.flat(), b.flat())


def test_divergence_raises():
    spec = MlpSpec((4,), ("relu",), 2, 2)
    X = np.array([[0.3, 0.7], [0.9, 0.1]])
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="training diverged at epoch 0"):
        train_arrays(spec, X, np.eye(2)[[0, 1]], np.ones(2), TrainConfig(1e308, 5, 1, 0))


def test_params_json_round_trip(rng):
    spec, params, *_ = random_case(rng)
    back = MlpParams.from_json(params.to_json())
    assert np.array_equal(back.flat(), params.flat())


def fixed_pool():
    a = np.array([[0.1, 0.2, 0.7], [0.8, 0.1, 0.1]])
    b = np.array([[0.2, 0.1, 0.7], [0.1, 0.8, 0.1]])
    return ModelPool((ModelEntry("a", a), ModelEntry("b", b)))


def test_fused_predict_examples():
    pool = fixed_pool()
    spec = MlpSpec((2,), ("relu",), 6, 3)
    # head that always says class 1
    params = MlpParams([np.zeros((2, 6)), np.zeros((3, 2))], [np.zeros(2), np.log([0.1, 0.8, 0.1])])
    assert fused_predict(pool, [0, 1], params, spec, 0) == 2  # consensus bypasses the head
    assert fused_predict(pool, [0, 1], params, spec, 1) == 1  # disagreement goes to the head
    single = MlpSpec((2,), ("relu",), 3, 3)
    p1 = MlpParams([np.zeros((2, 3)), np.zeros((3, 2))], [np.zeros(2), np.log([0.1, 0.1, 0.8])])
    assert [fused_predict(pool, [1], p1, single, i) for i in (0, 1)] == [2, 1]


@pytest.mark.parametrize("seed", range(5))
def test_consensus_preserved(seed):
    rng = np.random.default_rng(seed)
    n, m = 300, 4
    labels = rng.integers(m, size=n)
    pool = make_pool(rng, n, m, 3, skill=0.7, labels=labels)
    spec = MlpSpec((5,), ("sigmoid",), 3 * m, m)
    params = init_mlp(spec, seed)
    params.biases[-1][:] = rng.normal(scale=50, size=m)
    pred = fused_predict_many(pool, [0, 1, 2], params, spec, np.arange(n))
    votes = np.stack([pool[j].predictions for j in range(3)], axis=1)
    agree = np.all(votes == votes[:, :1], axis=1)
    assert agree.any()
    assert np.array_equal(pred[agree], votes[agree, 0])
