"""Synchronous multi-worker training algorithms on simulated workers.

Three algorithms share one loop:

* ``dense``: every worker contributes its full scaled gradient.
* ``slgs``: each worker adds its residual to the scaled gradient, selects
  the top-k entries of the whole stacked vector once per iteration, and
  keeps the unsent remainder as the next residual.
* ``lags``: the same error-feedback selection applied per layer, visiting
  layers in backpropagation order with a per-layer selection count.

All gradients are evaluated at the iteration-start parameters, so the
numerics are those of a fully synchronous step; overlap only changes
timing, which the perf module prices separately. Worker sums always run
in worker order and scale each gradient before summing, which makes a
lossless (all ratios 1) sparsified run reproduce the dense trace bit for
bit.

A dense shadow sequence updated with the uncompressed averaged gradients
runs alongside the sparsified iterates; the gap between the two equals the
worker-mean residual, which the trainer logs as a per-iteration identity
deviation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError, StructureError
from .layered import LayeredVector, same_layout
from .models import Model, PLACEHOLDER_BATCH, SyntheticDataset
from .sparsify import CompressionPolicy, decompress, top_k

ALGORITHMS = ("dense", "slgs", "lags")
SCHEDULE_KINDS = ("constant", "inv-sqrt-T", "diminishing")


@dataclass(frozen=True)
class StepSizeSchedule:
    """Step size as a function of the 1-based iteration index.

    constant:   theta
    inv-sqrt-T: theta / sqrt(T), constant across the run but scaled by the
                iteration budget (the schedule the rate bound assumes)
    diminishing: theta / (1 + t)
    """

    kind: str
    theta: float

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.theta <= 0:
            raise ValueError("theta must be positive")

    def alpha(self, t: int, total: int) -> float:
        if self.kind == "constant":
            return self.theta
        if self.kind == "inv-sqrt-T":
            return self.theta / np.sqrt(total)
        return self.theta / (1.0 + t)

    def alphas(self, total: int, start: int = 0) -> np.ndarray:
        """Step sizes for t = start..total inclusive."""
        return np.array([self.alpha(t, total) for t in range(start, total + 1)])


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str
    workers: int
    policy: CompressionPolicy
    schedule: StepSizeSchedule
    iterations: int
    seed: int
    batch_size: int = 32
    loss_log_every: int = 10
    delta_log_every: int = 0
    track_aux: bool = True
    track_full_grad: bool = False
    divergence_limit: float = 1e12

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.workers < 1 or self.iterations < 1 or self.batch_size < 1:
            raise ValueError("workers, iterations, and batch_size must be >= 1")
        if self.loss_log_every < 1:
            raise ValueError("loss_log_every must be >= 1")
        if self.algorithm == "dense":
            bad = [l for l, c in self.policy.per_layer_ratio.items() if c != 1]
            if bad:
                raise ValueError(f"dense runs require all ratios 1; layers {bad} differ")
        if self.algorithm == "slgs":
            ratios = set(self.policy.per_layer_ratio.values())
            if len(ratios) > 1:
                raise ValueError("slgs applies one ratio to the stacked vector; use a uniform policy")


@dataclass
class WorkerState:
    """Residual memory plus the data-shard sampler for one worker."""

    worker_id: int
    residual: LayeredVector
    sampler: "ShardSampler | None"


class ShardSampler:
    """Without-replacement batches from one worker's shard, reshuffled per epoch."""

    def __init__(self, shard: np.ndarray, batch_size: int, rng: np.random.Generator):
        if shard.size == 0:
            raise StructureError("worker shard is empty; reduce the worker count")
        self.shard = shard
        self.batch_size = min(batch_size, shard.size)
        self.rng = rng
        self._order = rng.permutation(shard.size)
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        if self._cursor + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.shard.size)
            self._cursor = 0
        picked = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.shard[picked]


@dataclass
class IterationRecord:
    t: int
    loss: float
    v_x_gap: float | None = None
    resid_dev: float | None = None
    residual_norms: list[float] | None = None
    delta: list[float | None] | None = None
    grad_norm_sq: float | None = None
    sim_time: float | None = None


@dataclass
class TrainRun:
    config: TrainerConfig
    records: list[IterationRecord]
    final_params: LayeredVector
    final_residuals: list[LayeredVector]
    aux_params: LayeredVector | None
    initial_loss: float | None
    final_loss: float | None
    diverged: bool
    completed_iterations: int
    grad_norm_sq_mean: float | None = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def max_resid_dev(self) -> float | None:
        devs = [r.resid_dev for r in self.records if r.resid_dev is not None]
        return max(devs) if devs else None


# --- single steps -------------------------------------------------------------


def _check_grads(v: LayeredVector, grads: Sequence[LayeredVector], t: int | None = None):
    for p, g in enumerate(grads, start=1):
        if not same_layout(v, g):
            raise StructureError(f"worker {p} gradient layout differs from params")
        if not np.all(np.isfinite(g.data)):
            raise DivergenceError(f"worker {p} produced a non-finite gradient", iteration=t)


def _scaled_mean(grads: Sequence[LayeredVector], alpha: float) -> np.ndarray:
    """(1/P) sum_p alpha * g_p, accumulated in worker order.

    Scaling before the sum matches how the sparsified steps build their
    update, keeping the lossless degeneracy bit-exact.
    """
    total = alpha * grads[0].data
    for g in grads[1:]:
        total = total + alpha * g.data
    return total / len(grads)


def dense_step(v: LayeredVector, grads: Sequence[LayeredVector], alpha: float,
               t: int | None = None) -> LayeredVector:
    """v - alpha * mean gradient; residuals are untouched by dense training."""
    _check_grads(v, grads, t)
    return LayeredVector(v.shape, v.data - _scaled_mean(grads, alpha))


def auxiliary_step(x: LayeredVector, grads: Sequence[LayeredVector], alpha: float) -> LayeredVector:
    """Advance the dense shadow sequence with the same cached gradients."""
    _check_grads(x, grads)
    return LayeredVector(x.shape, x.data - _scaled_mean(grads, alpha))


def slgs_step(
    v: LayeredVector,
    grads: Sequence[LayeredVector],
    alpha: float,
    global_k: int,
    residuals: Sequence[LayeredVector],
    t: int | None = None,
) -> LayeredVector:
    """One stacked-vector selection per worker with error feedback.

    Mutates each worker's residual in place to hold the unsent remainder.
    """
    _check_grads(v, grads, t)
    if not 1 <= global_k <= v.dim:
        raise ValueError(f"global_k={global_k} outside 1..{v.dim}")
    total = np.zeros(v.dim)
    for g, res in zip(grads, residuals):
        acc = res.data + alpha * g.data
        sent = decompress(top_k(acc, global_k))
        res.data[:] = acc - sent
        total += sent
    return LayeredVector(v.shape, v.data - total / len(grads))


def lags_step(
    v: LayeredVector,
    grads: Sequence[LayeredVector],
    alpha: float,
    counts: dict[int, int],
    residuals: Sequence[LayeredVector],
    t: int | None = None,
) -> LayeredVector:
    """Per-layer selection with error feedback, visiting layers L..1.

    ``counts`` maps layer_id to that layer's selection budget. Gradients
    were all evaluated at the iteration-start parameters, so layer order
    does not change the result, only the communication schedule.
    """
    _check_grads(v, grads, t)
    new_data = v.data.copy()
    out = LayeredVector(v.shape, new_data)
    workers = len(grads)
    for ls in reversed(v.shape):
        lid = ls.layer_id
        k = counts[lid]
        total = np.zeros(ls.dim)
        for g, res in zip(grads, residuals):
            acc = res.layer_slice(lid) + alpha * g.layer_slice(lid)
            sent = decompress(top_k(acc, k, layer_id=lid))
            res.layer_slice(lid)[:] = acc - sent
            total += sent
        out.layer_slice(lid)[:] = v.layer_slice(lid) - total / workers
    return out


# --- full loop ----------------------------------------------------------------


def train(config: TrainerConfig, model: Model, dataset: SyntheticDataset | None = None) -> TrainRun:
    """Run the configured algorithm for the full iteration budget.

    Deterministic given (config, model, dataset): worker shards, batch
    order, and the parameter init all derive from config.seed. Aborts with
    the records collected so far if the loss leaves the finite range.
    """
    if dataset is None and model.kind != "quadratic":
        raise StructureError(f"{model.kind} training needs a dataset; only the quadratic is data-independent")
    counts = config.policy.selection_counts(model.shape)
    global_k = None
    if config.algorithm == "slgs":
        ratio = next(iter(config.policy.per_layer_ratio.values()))
        global_k = max(1, int(model.dim // ratio))

    init_rng = np.random.default_rng([config.seed, 0x1A17])
    v = model.init_params(init_rng)
    x = v.copy() if config.track_aux else None

    workers = []
    for p in range(1, config.workers + 1):
        sampler = None
        if dataset is not None:
            sampler = ShardSampler(
                dataset.shard_indices(p, config.workers),
                config.batch_size,
                np.random.default_rng([config.seed, 0xBA7C, p]),
            )
        workers.append(WorkerState(p, LayeredVector.zeros_like(v), sampler))

    full_batch = dataset.full_batch() if dataset is not None else PLACEHOLDER_BATCH
    initial_loss = model.loss(v, full_batch)

    records: list[IterationRecord] = []
    diverged = False
    completed = 0
    grad_sq_sum = 0.0

    for t in range(1, config.iterations + 1):
        alpha = config.schedule.alpha(t, config.iterations)
        if dataset is not None:
            batches = [dataset.batch(w.sampler.next_indices()) for w in workers]
        else:
            batches = [PLACEHOLDER_BATCH] * config.workers

        pairs = [model.loss_and_gradient(v, b) for b in batches]
        batch_loss = float(np.mean([p[0] for p in pairs]))
        grads = [p[1] for p in pairs]

        if not np.isfinite(batch_loss) or abs(batch_loss) > config.divergence_limit:
            diverged = True
            break

        grad_norm_sq = None
        if config.track_full_grad:
            g_full = model.gradient(v, full_batch)
            grad_norm_sq = float(g_full.data @ g_full.data)
            grad_sq_sum += grad_norm_sq

        log_loss = t % config.loss_log_every == 0 or t == 1 or t == config.iterations
        log_delta = (
            config.delta_log_every > 0
            and config.algorithm == "lags"
            and t % config.delta_log_every == 0
        )

        delta = None
        if log_delta:
            # Imported lazily: analysis depends on this module's types.
            from .analysis import topk_aggregation_ratio

            accs = [w.residual.data + alpha * g.data for w, g in zip(workers, grads)]
            acc_vecs = [LayeredVector(v.shape, a) for a in accs]
            delta = [
                topk_aggregation_ratio(
                    [a.layer_slice(ls.layer_id) for a in acc_vecs], counts[ls.layer_id]
                )
                for ls in v.shape
            ]

        residuals = [w.residual for w in workers]
        try:
            if config.algorithm == "dense":
                v = dense_step(v, grads, alpha, t)
            elif config.algorithm == "slgs":
                v = slgs_step(v, grads, alpha, global_k, residuals, t)
            else:
                v = lags_step(v, grads, alpha, counts, residuals, t)
            if x is not None:
                x = auxiliary_step(x, grads, alpha)
        except DivergenceError:
            diverged = True
            break
        completed = t

        if log_loss or log_delta:
            rec = IterationRecord(t=t, loss=batch_loss, delta=delta, grad_norm_sq=grad_norm_sq)
            if x is not None:
                gap = v.data - x.data
                rec.v_x_gap = float(np.sqrt(gap @ gap))
                mean_res = residuals[0].data.copy()
                for r in residuals[1:]:
                    mean_res += r.data
                mean_res /= config.workers
                rec.resid_dev = float(np.max(np.abs(gap - mean_res)))
                mean_vec = LayeredVector(v.shape, mean_res)
                rec.residual_norms = [
                    float(np.sqrt(mean_vec.layer_norm_sq(ls.layer_id))) for ls in v.shape
                ]
            records.append(rec)

    final_loss = model.loss(v, full_batch) if np.all(np.isfinite(v.data)) else None
    return TrainRun(
        config=config,
        records=records,
        final_params=v,
        final_residuals=[w.residual for w in workers],
        aux_params=x,
        initial_loss=initial_loss,
        final_loss=final_loss,
        diverged=diverged,
        completed_iterations=completed,
        grad_norm_sq_mean=(grad_sq_sum / completed) if (config.track_full_grad and completed) else None,
    )
