import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lagsgd.errors import StructureError
from lagsgd.layered import LayeredVector
from lagsgd.models import (
    DatasetSpec,
    LogisticModel,
    MlpModel,
    QuadraticModel,
    SyntheticDataset,
    make_model,
    second_moment_estimate,
)


def finite_difference_gradient(model, params, batch, h=1e-6):
    """Central differences on the loss, one coordinate at a time."""
    base = params.data
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] += h
        up = model.loss(LayeredVector(params.shape, bumped), batch)
        bumped[i] -= 2 * h
        down = model.loss(LayeredVector(params.shape, bumped), batch)
        grad[i] = (up - down) / (2 * h)
    return grad


def gradcheck_error(model, params, batch):
    analytic = model.gradient(params, batch).data
    fd = finite_difference_gradient(model, params, batch)
    scale = max(1.0, float(np.max(np.abs(fd))))
    return float(np.max(np.abs(analytic - fd))) / scale


def make_batch(rng, n, f, classes):
    return rng.standard_normal((n, f)), rng.integers(0, classes, size=n)


# --- quadratic -------------------------------------------------------------------


def test_quadratic_zero_at_target():
    m = QuadraticModel(12, seed=0)
    params = LayeredVector(m.shape, m.target.copy())
    batch = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    assert m.loss(params, batch) == 0.0
    assert_allclose(m.gradient(params, batch).data, np.zeros(12), atol=1e-14)


def test_quadratic_gradient_formula():
    m = QuadraticModel(6, (3, 3), seed=1)
    rng = np.random.default_rng(2)
    w = rng.standard_normal(6)
    params = LayeredVector(m.shape, w)
    batch = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    assert_allclose(m.gradient(params, batch).data, m.matrix @ (w - m.target), rtol=1e-12)


def test_quadratic_smoothness_is_top_eigenvalue():
    m = QuadraticModel(20, seed=3)
    eigs = np.linalg.eigvalsh(m.matrix)
    assert_allclose(m.smoothness, eigs[-1], rtol=1e-12)
    assert eigs[0] > 0.05  # SPD with the configured spectrum range


def test_quadratic_from_matrix():
    a = np.diag([1.0, 2.0, 3.0])
    m = QuadraticModel.from_matrix(a, np.zeros(3))
    params = LayeredVector(m.shape, np.array([1.0, 1.0, 1.0]))
    batch = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    assert m.loss(params, batch) == 3.0
    assert_array_equal(m.gradient(params, batch).data, [1.0, 2.0, 3.0])


# --- logistic --------------------------------------------------------------------


def test_logistic_uniform_prediction_loss():
    m = LogisticModel(feature_dim=5, classes=2)
    params = LayeredVector.zeros(m.shape)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((64, 5))
    y = np.array([0, 1] * 32)
    assert_allclose(m.loss(params, (x, y)), np.log(2.0), rtol=1e-12)


def test_logistic_shape_mismatch():
    m = LogisticModel(feature_dim=5, classes=2)
    wrong = LayeredVector.zeros(LogisticModel(feature_dim=4, classes=2).shape)
    with pytest.raises(StructureError):
        m.loss(wrong, make_batch(np.random.default_rng(0), 4, 5, 2))


# --- mlp -------------------------------------------------------------------------


def test_mlp_loss_decreases_after_one_step():
    m = MlpModel((8, 6, 3))
    rng = np.random.default_rng(5)
    params = m.init_params(rng)
    batch = make_batch(rng, 32, 8, 3)
    before, grad = m.loss_and_gradient(params, batch)
    stepped = LayeredVector(m.shape, params.data - 0.1 * grad.data)
    assert m.loss(stepped, batch) < before


def test_mlp_layer_layout():
    combined = MlpModel((64, 16, 4))
    assert [ls.dim for ls in combined.shape] == [1040, 68]
    split = MlpModel((64, 16, 4), split_bias=True)
    assert [ls.dim for ls in split.shape] == [1024, 16, 64, 4]
    assert combined.dim == split.dim == 1108


def test_mlp_layouts_agree_numerically():
    rng = np.random.default_rng(77)
    combined = MlpModel((5, 4, 3))
    split = MlpModel((5, 4, 3), split_bias=True)
    params = combined.init_params(np.random.default_rng(78))
    batch = make_batch(rng, 16, 5, 3)
    # Regroup the combined vector into the split layout: W1, b1, W2, b2.
    seg1, seg2 = params.layer_slice(1), params.layer_slice(2)
    split_params = LayeredVector(
        split.shape, np.concatenate([seg1[:20], seg1[20:], seg2[:12], seg2[12:]])
    )
    assert combined.loss(params, batch) == split.loss(split_params, batch)
    g_combined = combined.gradient(params, batch).data
    g_split = split.gradient(split_params, batch).data
    assert_array_equal(g_combined, g_split)


# --- gradient correctness ----------------------------------------------------------


@pytest.mark.parametrize("kind", ["quadratic", "logistic-regression", "mlp"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(6)
    for trial in range(10):
        if kind == "quadratic":
            m = QuadraticModel(9, (4, 5), seed=trial)
            batch = (np.zeros((2, 1)), np.zeros(2, dtype=np.int64))
        elif kind == "logistic-regression":
            m = LogisticModel(feature_dim=6, classes=3)
            batch = make_batch(rng, 24, 6, 3)
        else:
            m = MlpModel((5, 4, 3))
            batch = make_batch(rng, 24, 5, 3)
        params = m.init_params(rng)
        assert gradcheck_error(m, params, batch) <= 1e-5


def test_full_gradient_is_shard_average():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 100, 6, 3, seed=7))
    m = LogisticModel(feature_dim=6, classes=3)
    params = m.init_params(np.random.default_rng(8))
    workers = 4
    full = m.gradient(params, ds.full_batch()).data
    acc = np.zeros_like(full)
    for p in range(1, workers + 1):
        idx = ds.shard_indices(p, workers)
        acc += idx.size * m.gradient(params, ds.batch(idx)).data
    assert_allclose(acc / ds.samples, full, rtol=1e-12, atol=1e-15)


def test_determinism_same_seed_same_values():
    spec = DatasetSpec("synthetic-linear-regression", 50, 4, 2, seed=9)
    a, b = SyntheticDataset(spec), SyntheticDataset(spec)
    assert_array_equal(a.features, b.features)
    assert_array_equal(a.labels, b.labels)
    m1 = QuadraticModel(8, seed=11)
    m2 = QuadraticModel(8, seed=11)
    assert_array_equal(m1.matrix, m2.matrix)
    assert_array_equal(m1.target, m2.target)


# --- datasets ----------------------------------------------------------------------


def test_dataset_sharding():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 10, 3, 2, seed=0))
    assert_array_equal(ds.shard_indices(1, 3), [0, 3, 6, 9])
    assert_array_equal(ds.shard_indices(2, 3), [1, 4, 7])
    assert_array_equal(ds.shard_indices(3, 3), [2, 5, 8])
    joined = np.sort(np.concatenate([ds.shard_indices(p, 3) for p in range(1, 4)]))
    assert_array_equal(joined, np.arange(10))


def test_dataset_labels_balanced():
    for kind in ("synthetic-gaussian-classification", "synthetic-linear-regression"):
        ds = SyntheticDataset(DatasetSpec(kind, 120, 5, 4, seed=1))
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.min() >= 25 and counts.max() <= 35


def test_dataset_kind_validated():
    with pytest.raises(ValueError):
        DatasetSpec("mystery", 10, 3, 2, seed=0)


# --- second moment -----------------------------------------------------------------


def test_second_moment_zero_at_quadratic_minimum():
    m = QuadraticModel(10, seed=12)
    at_min = LayeredVector(m.shape, m.target.copy())
    assert second_moment_estimate(m, [at_min], None, workers=2, draws=3) == 0.0


def test_second_moment_decreases_with_batch_size():
    # Bigger batches shrink the gradient noise, so the estimated second
    # moment of the worker-averaged gradient cannot grow.
    ds = SyntheticDataset(DatasetSpec("synthetic-linear-regression", 2000, 8, 2, seed=13))
    m = LogisticModel(feature_dim=8, classes=2)
    params = LayeredVector.zeros(m.shape)
    estimates = [
        second_moment_estimate(m, [params], ds, workers=2, batch_size=bs, draws=300, seed=14)
        for bs in (2, 8, 32, 128)
    ]
    assert all(a >= b for a, b in zip(estimates, estimates[1:]))


def test_second_moment_matches_direct_monte_carlo():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 400, 5, 2, seed=15))
    m = LogisticModel(feature_dim=5, classes=2)
    params = LayeredVector.zeros(m.shape)
    workers, bs, draws = 3, 8, 2000
    est = second_moment_estimate(m, [params], ds, workers=workers, batch_size=bs, draws=draws, seed=16)

    # Independent Monte-Carlo of the same expectation with its own stream.
    rng = np.random.default_rng(99)
    shards = [ds.shard_indices(p, workers) for p in range(1, workers + 1)]
    acc = 0.0
    for _ in range(draws):
        total = np.zeros(m.dim)
        for shard in shards:
            batch = ds.batch(rng.choice(shard, size=bs, replace=False))
            total += m.gradient(params, batch).data
        mean = total / workers
        acc += float(mean @ mean)
    oracle = acc / draws
    assert_allclose(est, oracle, rtol=0.02)


def test_make_model_rejects_unknown_kind():
    with pytest.raises(ValueError):
        make_model("perceptron")
