import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lagsgd.errors import DivergenceError
from lagsgd.layered import LayeredVector, concat
from lagsgd.models import DatasetSpec, LogisticModel, QuadraticModel, SyntheticDataset
from lagsgd.sparsify import CompressionPolicy, decompress, top_k
from lagsgd.training import (
    StepSizeSchedule,
    TrainerConfig,
    auxiliary_step,
    dense_step,
    lags_step,
    slgs_step,
    train,
)


def quad_batch():
    return np.zeros((1, 1)), np.zeros(1, dtype=np.int64)


def make_config(algorithm, model, ratio=1.0, **kwargs):
    defaults = dict(
        workers=kwargs.pop("workers", 2),
        policy=CompressionPolicy.uniform(ratio, model.shape),
        schedule=kwargs.pop("schedule", StepSizeSchedule("constant", 0.05)),
        iterations=kwargs.pop("iterations", 40),
        seed=kwargs.pop("seed", 0),
    )
    return TrainerConfig(algorithm=algorithm, **defaults, **kwargs)


# --- schedules ---------------------------------------------------------------------


def test_schedule_kinds():
    assert StepSizeSchedule("constant", 0.3).alpha(17, 100) == 0.3
    assert_allclose(StepSizeSchedule("inv-sqrt-T", 2.0).alpha(5, 400), 0.1)
    assert_allclose(StepSizeSchedule("diminishing", 1.0).alpha(4, 100), 0.2)
    with pytest.raises(ValueError):
        StepSizeSchedule("linear", 1.0)
    with pytest.raises(ValueError):
        StepSizeSchedule("constant", 0.0)


# --- dense step --------------------------------------------------------------------


def test_dense_step_zero_alpha_is_identity():
    v = concat([[1.0, 2.0], [3.0]])
    grads = [concat([[5.0, 5.0], [5.0]])]
    assert_array_equal(dense_step(v, grads, 0.0).data, v.data)


def test_dense_identical_workers_match_single():
    v = concat([[1.0, -2.0, 0.5]])
    g = concat([[0.3, 0.7, -0.1]])
    one = dense_step(v, [g], 0.1)
    many = dense_step(v, [g.copy() for _ in range(3)], 0.1)
    assert_allclose(many.data, one.data, rtol=1e-15)


def test_dense_quadratic_strictly_decreases():
    m = QuadraticModel(16, seed=20)
    alpha = 1.0 / m.smoothness
    params = m.init_params(np.random.default_rng(21))
    losses = [m.loss(params, quad_batch())]
    for _ in range(200):
        params = dense_step(params, [m.gradient(params, quad_batch())], alpha)
        losses.append(m.loss(params, quad_batch()))
    for before, after in zip(losses, losses[1:]):
        if before < 1e-20:
            break
        assert after < before


def test_dense_rejects_non_finite_gradient():
    v = concat([[1.0, 2.0]])
    bad = concat([[np.nan, 0.0]])
    with pytest.raises(DivergenceError):
        dense_step(v, [bad], 0.1)


# --- slgs step ---------------------------------------------------------------------


def test_slgs_full_k_matches_dense():
    rng = np.random.default_rng(22)
    v = concat([rng.standard_normal(5), rng.standard_normal(3)])
    grads = [concat([rng.standard_normal(5), rng.standard_normal(3)]) for _ in range(2)]
    residuals = [LayeredVector.zeros_like(v) for _ in range(2)]
    sparse = slgs_step(v, grads, 0.2, v.dim, residuals)
    dense = dense_step(v, grads, 0.2)
    assert_array_equal(sparse.data, dense.data)
    for res in residuals:
        assert_array_equal(res.data, np.zeros(v.dim))


def test_slgs_residual_identity_per_worker():
    rng = np.random.default_rng(23)
    v = concat([rng.standard_normal(6)])
    grads = [concat([rng.standard_normal(6)]) for _ in range(3)]
    residuals = [LayeredVector.zeros_like(v) for _ in range(3)]
    alpha = 0.3
    slgs_step(v, grads, alpha, 2, residuals)
    for g, res in zip(grads, residuals):
        acc = alpha * g.data  # residuals started at zero
        chunk = top_k(acc, 2)
        assert_array_equal(res.data + decompress(chunk), acc)


def test_slgs_two_iteration_hand_trace():
    # Diagonal quadratic, single worker, k = 2 of 4, constant step 0.1.
    # Walked by hand: selections pick the two largest accumulated entries,
    # the remainder carries over, and the parameters follow.
    m = QuadraticModel.from_matrix(np.diag([1.0, 2.0, 3.0, 4.0]), np.zeros(4))
    v = LayeredVector(m.shape, np.ones(4))
    residuals = [LayeredVector.zeros_like(v)]
    alpha = 0.1

    g1 = m.gradient(v, quad_batch())  # [1, 2, 3, 4]
    v = slgs_step(v, [g1], alpha, 2, residuals)
    assert_allclose(v.data, [1.0, 1.0, 0.7, 0.6], rtol=1e-12)
    assert_allclose(residuals[0].data, [0.1, 0.2, 0.0, 0.0], atol=1e-15)

    g2 = m.gradient(v, quad_batch())  # [1, 2, 2.1, 2.4]
    v = slgs_step(v, [g2], alpha, 2, residuals)
    assert_allclose(v.data, [1.0, 0.6, 0.7, 0.36], rtol=1e-12)
    assert_allclose(residuals[0].data, [0.2, 0.0, 0.21, 0.0], rtol=1e-12, atol=1e-15)


# --- lags step ---------------------------------------------------------------------


def test_lags_all_ratio_one_matches_dense():
    rng = np.random.default_rng(24)
    v = concat([rng.standard_normal(4), rng.standard_normal(6)])
    grads = [concat([rng.standard_normal(4), rng.standard_normal(6)]) for _ in range(2)]
    residuals = [LayeredVector.zeros_like(v) for _ in range(2)]
    counts = {1: 4, 2: 6}
    sparse = lags_step(v, grads, 0.15, counts, residuals)
    dense = dense_step(v, grads, 0.15)
    assert_array_equal(sparse.data, dense.data)


def test_lags_single_layer_matches_slgs():
    rng = np.random.default_rng(25)
    v = concat([rng.standard_normal(9)])
    grads = [concat([rng.standard_normal(9)]) for _ in range(3)]
    res_a = [LayeredVector.zeros_like(v) for _ in range(3)]
    res_b = [LayeredVector.zeros_like(v) for _ in range(3)]
    a = lags_step(v, grads, 0.2, {1: 3}, res_a)
    b = slgs_step(v, grads, 0.2, 3, res_b)
    assert_array_equal(a.data, b.data)
    for ra, rb in zip(res_a, res_b):
        assert_array_equal(ra.data, rb.data)


def test_lags_hand_trace_two_workers_two_layers():
    # Fixed gradients, alpha = 1, v0 = 0, k = 1 per 2-wide layer.
    # Worker 1 keeps layer-1 entry 1 (value 2) and layer-2 entry 0 (value 3);
    # worker 2 keeps layer-1 entry 0 (value 2) and layer-2 entry 1 (value 1).
    v = concat([[0.0, 0.0], [0.0, 0.0]])
    g1 = concat([[1.0, 2.0], [3.0, 1.0]])
    g2 = concat([[2.0, -1.0], [0.0, 1.0]])
    residuals = [LayeredVector.zeros_like(v) for _ in range(2)]
    out = lags_step(v, [g1, g2], 1.0, {1: 1, 2: 1}, residuals)
    assert_array_equal(out.data, [-1.0, -1.0, -1.5, -0.5])
    assert_array_equal(residuals[0].data, [1.0, 0.0, 0.0, 1.0])
    assert_array_equal(residuals[1].data, [0.0, -1.0, 0.0, 0.0])

    # Shadow-sequence identity after the step: v - x equals the mean residual.
    x = auxiliary_step(v.copy(), [g1, g2], 1.0)
    mean_res = (residuals[0].data + residuals[1].data) / 2
    assert_array_equal(out.data - x.data, mean_res)


def test_lags_residuals_recomputable():
    rng = np.random.default_rng(26)
    v = concat([rng.standard_normal(8), rng.standard_normal(5)])
    grads = [concat([rng.standard_normal(8), rng.standard_normal(5)]) for _ in range(2)]
    residuals = [LayeredVector.zeros_like(v) for _ in range(2)]
    counts = {1: 3, 2: 2}
    alpha = 0.4
    lags_step(v, grads, alpha, counts, residuals)
    for g, res in zip(grads, residuals):
        for lid, k in counts.items():
            acc = alpha * g.layer_slice(lid)
            expected = acc - decompress(top_k(acc, k))
            assert_array_equal(res.layer_slice(lid), expected)


# --- auxiliary sequence --------------------------------------------------------------


def test_auxiliary_matches_dense_updates():
    rng = np.random.default_rng(27)
    v = concat([rng.standard_normal(7)])
    grads = [concat([rng.standard_normal(7)]) for _ in range(4)]
    assert_array_equal(auxiliary_step(v, grads, 0.3).data, dense_step(v, grads, 0.3).data)


# --- full runs ----------------------------------------------------------------------


def test_train_dense_shadow_equals_params():
    m = QuadraticModel(10, (5, 5), seed=28)
    run = train(make_config("dense", m, iterations=30), m)
    assert all(r.v_x_gap == 0.0 for r in run.records)
    assert all(r.resid_dev == 0.0 for r in run.records)


def test_train_same_seed_bit_identical():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 200, 6, 2, seed=29))
    m = LogisticModel(feature_dim=6, classes=2)
    cfg = make_config("lags", m, ratio=5.0, workers=4, iterations=60, seed=30)
    a = train(cfg, m, ds)
    b = train(cfg, m, ds)
    assert a.losses().tolist() == b.losses().tolist()
    assert_array_equal(a.final_params.data, b.final_params.data)


def test_train_lags_lossless_degenerates_to_dense():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 200, 6, 2, seed=31))
    m = LogisticModel(feature_dim=6, classes=2)
    dense_run = train(make_config("dense", m, workers=4, iterations=50, seed=32), m, ds)
    lags_run = train(make_config("lags", m, ratio=1.0, workers=4, iterations=50, seed=32), m, ds)
    assert dense_run.losses().tolist() == lags_run.losses().tolist()
    assert_array_equal(dense_run.final_params.data, lags_run.final_params.data)


def test_train_residual_identity_all_algorithms():
    ds = SyntheticDataset(DatasetSpec("synthetic-linear-regression", 240, 5, 2, seed=33))
    m = LogisticModel(feature_dim=5, classes=2)
    for algorithm, ratio in (("dense", 1.0), ("slgs", 4.0), ("lags", 4.0)):
        run = train(make_config(algorithm, m, ratio=ratio, workers=3, iterations=80, seed=34), m, ds)
        assert run.max_resid_dev() <= 1e-9


def test_train_quadratic_reaches_tolerance():
    # theta / sqrt(T) with theta = 0.5 stays well inside the stable range
    # (2 / largest eigenvalue) for the configured spectrum, so a direct run
    # must land close to the optimum.
    m = QuadraticModel(64, seed=35)
    cfg = make_config(
        "dense", m, workers=1, iterations=5000, seed=36,
        schedule=StepSizeSchedule("inv-sqrt-T", 0.5),
    )
    run = train(cfg, m)
    assert run.final_loss <= 1e-3


def test_train_monotone_in_compression():
    # Step scale picked so the lightly compressed arms converge to numeric
    # zero while heavy compression visibly lags: at a fixed budget, larger
    # ratios finish with at-least-as-large loss. In mid-transient regimes
    # with small steps the ordering can invert slightly (error feedback on
    # a full-batch quadratic behaves like greedy coordinate selection), so
    # the comparison carries a small absolute tolerance.
    m = QuadraticModel(64, (32, 32), seed=37)
    finals = []
    for ratio in (1.0, 10.0, 100.0):
        cfg = make_config(
            "lags", m, ratio=ratio, workers=1, iterations=2000, seed=38,
            schedule=StepSizeSchedule("inv-sqrt-T", 3.0),
        )
        finals.append(train(cfg, m).final_loss)
    assert finals[0] <= finals[1] + 1e-10
    assert finals[1] <= finals[2] + 1e-10
    # Heavy compression is not just within tolerance, it is clearly behind.
    assert finals[2] > 100 * finals[0]


def test_train_divergence_aborts_with_records():
    m = QuadraticModel(8, seed=39)
    cfg = make_config(
        "dense", m, workers=1, iterations=500, seed=40,
        schedule=StepSizeSchedule("constant", 10.0),  # far beyond 2 / eig_max
        loss_log_every=1,
    )
    run = train(cfg, m)
    assert run.diverged
    assert run.completed_iterations < 500
    assert all(np.isfinite(r.loss) for r in run.records)


def test_train_delta_logged_for_lags_only():
    ds = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 120, 4, 2, seed=41))
    m = LogisticModel(feature_dim=4, classes=2)
    lags_run = train(
        make_config("lags", m, ratio=4.0, workers=2, iterations=20, seed=42, delta_log_every=5), m, ds
    )
    dense_run = train(
        make_config("dense", m, workers=2, iterations=20, seed=42, delta_log_every=5), m, ds
    )
    assert any(r.delta is not None for r in lags_run.records)
    assert all(r.delta is None for r in dense_run.records)


def test_config_validation():
    m = QuadraticModel(4, seed=0)
    with pytest.raises(ValueError):
        make_config("dense", m, ratio=2.0)
    with pytest.raises(ValueError):
        TrainerConfig(
            algorithm="slgs",
            workers=1,
            policy=CompressionPolicy({1: 2.0, 2: 4.0}, 4.0),
            schedule=StepSizeSchedule("constant", 0.1),
            iterations=1,
            seed=0,
        )
    with pytest.raises(ValueError):
        make_config("sgd", m)
