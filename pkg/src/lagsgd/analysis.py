"""Numeric checkers for the convergence theory behind sparsified training.

These functions instrument runs rather than prove anything: they evaluate
the aggregation-quality ratio that certifies the analytical assumption,
the layer-wise selection bound, the drift bound between sparsified and
dense iterates, the step-size condition, and the closed-form rate bound.
All are pure and bit-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import StructureError
from .layered import LayeredVector
from .sparsify import CompressionPolicy, decompress, top_k
from .training import IterationRecord, StepSizeSchedule, TrainRun


def topk_aggregation_ratio(local_vectors: Sequence[np.ndarray], k: int) -> float | None:
    """Residual of summed per-worker top-k picks over the random-selection expectation.

    Numerator: || sum_p x^p - sum_p reconstruct(top_k(x^p, k)) ||^2.
    Denominator: (1 - k/d) || sum_p x^p ||^2, the exact expectation of the
    residual left by a uniformly random k-selection on the aggregate. The
    random draw is replaced by its expectation so the ratio is deterministic
    and the check conservative. Values <= 1 mean local top-k selection beat
    random selection on this input; with a single worker that always holds.

    Returns None when the denominator vanishes (zero aggregate or k = d),
    where the comparison is vacuous.
    """
    if not local_vectors:
        raise StructureError("need at least one worker vector")
    arrays = [np.asarray(x, dtype=np.float64) for x in local_vectors]
    d = arrays[0].size
    for x in arrays[1:]:
        if x.size != d:
            raise StructureError("worker vectors must share one dimension")
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    total = arrays[0].copy()
    for x in arrays[1:]:
        total += x
    denom = (1.0 - k / d) * float(total @ total)
    if denom == 0.0:
        return None
    agg = np.zeros(d)
    for x in arrays:
        agg += decompress(top_k(x, k))
    diff = total - agg
    return float(diff @ diff) / denom


@dataclass(frozen=True)
class LayerwiseBoundCheck:
    lhs: float
    rhs: float
    max_ratio: float
    holds: bool


def layerwise_topk_bound_check(
    vectors: Sequence[LayeredVector], policy: CompressionPolicy
) -> LayerwiseBoundCheck:
    """Check the aggregated layer-wise selection error against its norm bound.

    lhs is the squared norm of (aggregate minus the concatenated per-layer
    sums of local top-k picks); rhs is (1 - 1/c_max) times the squared
    aggregate norm, with c_max the realized maximum of dim/k over layers.
    The inequality is guaranteed for a single worker; for several workers
    it holds whenever the aggregation-quality ratio is <= 1 on every layer,
    so this reports rather than asserts.
    """
    if not vectors:
        raise StructureError("need at least one worker vector")
    shape = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != shape:
            raise StructureError("worker vectors must share one layout")
    counts = policy.selection_counts(shape)
    max_ratio = policy.effective_max_ratio(shape)
    total = vectors[0].data.copy()
    for v in vectors[1:]:
        total += v.data
    selected = np.zeros(total.size)
    sel_vec = LayeredVector(shape, selected)
    for ls in shape:
        seg = sel_vec.layer_slice(ls.layer_id)
        for v in vectors:
            seg += decompress(top_k(v.layer_slice(ls.layer_id), counts[ls.layer_id]))
    diff = total - selected
    lhs = float(diff @ diff)
    rhs = (1.0 - 1.0 / max_ratio) * float(total @ total)
    return LayerwiseBoundCheck(lhs, rhs, max_ratio, lhs <= rhs + 1e-12 * rhs)


# --- drift and rate bounds ------------------------------------------------------


def contraction_factor(max_ratio: float, eta: float) -> float:
    """(1 - 1/c_max)(1 + eta); the per-step factor in the drift recursion."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if max_ratio < 1:
        raise ValueError("max_ratio must be >= 1")
    return (1.0 - 1.0 / max_ratio) * (1.0 + eta)


def drift_bound_series(
    step_sizes: Sequence[float],
    max_ratio: float,
    eta: float,
    second_moment: float,
) -> tuple[np.ndarray, bool]:
    """Bound on the squared gap to the dense shadow after 1..n steps.

    ``step_sizes`` is the ordered sequence of steps actually applied; entry
    t-1 of the result bounds the drift after t steps, with the most recent
    step carrying one geometric factor and older steps one more each.
    Returns the series and a flag set when the geometric factor is >= 1,
    in which case the series still evaluates but grows without limit.
    """
    tau = contraction_factor(max_ratio, eta)
    steps = np.asarray(step_sizes, dtype=np.float64)
    if np.any(steps <= 0):
        raise ValueError("step sizes must be positive")
    out = np.zeros(steps.size)
    running = 0.0
    for t in range(1, steps.size + 1):
        running = tau * (steps[t - 1] ** 2 * second_moment + running)
        out[t - 1] = running / eta
    return out, tau >= 1.0


def drift_bound(
    step_sizes: Sequence[float], max_ratio: float, eta: float, second_moment: float, t: int
) -> tuple[float, bool]:
    """Drift bound after t >= 1 steps of the given schedule."""
    if t < 1:
        raise ValueError("t must be >= 1")
    series, diverging = drift_bound_series(list(step_sizes)[:t], max_ratio, eta, second_moment)
    return float(series[-1]), diverging


def constant_alpha_drift_limit(alpha: float, max_ratio: float, eta: float, second_moment: float) -> float:
    """Closed form of the drift bound limit for a constant step size."""
    tau = contraction_factor(max_ratio, eta)
    if tau >= 1:
        return math.inf
    return alpha * alpha * second_moment * tau / ((1.0 - tau) * eta)


@dataclass(frozen=True)
class StepsizeConditionResult:
    max_value: float
    at_iteration: int
    tau: float
    bounded: bool


def stepsize_condition(
    schedule: StepSizeSchedule, max_ratio: float, eta: float, horizon: int
) -> StepsizeConditionResult:
    """Largest value over t <= horizon of sum_i tau^i alpha_{t-i}^2 / alpha_t.

    The convergence guarantee needs this bounded by some constant; for a
    constant step size the running value converges to alpha * tau / (1 - tau)
    whenever tau < 1. Evaluated by recursion, so large horizons stay cheap.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    tau = contraction_factor(max_ratio, eta)
    alphas = schedule.alphas(horizon)
    if np.any(alphas <= 0):
        raise ValueError("step sizes must be positive")
    running = 0.0
    best = 0.0
    best_t = 1
    for t in range(1, horizon + 1):
        running = tau * (alphas[t - 1] ** 2 + running)
        value = running / alphas[t]
        if value > best:
            best = value
            best_t = t
    return StepsizeConditionResult(best, best_t, tau, tau < 1.0)


def constant_alpha_condition_limit(alpha: float, max_ratio: float, eta: float) -> float:
    """Limit of the step-size condition value for a constant step size."""
    tau = contraction_factor(max_ratio, eta)
    if tau >= 1:
        return math.inf
    return alpha * tau / (1.0 - tau)


@dataclass(frozen=True)
class BoundParams:
    """Constants feeding the closed-form rate bound.

    ``eta`` defaults to 1/max_ratio, the choice under which the geometric
    factor is 1 - 1/max_ratio^2 < 1. ``optimality_gap`` is the loss at the
    start minus the optimal loss: exact for the quadratic model, a lower
    bound of zero elsewhere.
    """

    smoothness: float
    second_moment: float
    max_ratio: float
    step_scale: float
    optimality_gap: float
    eta: float | None = None

    def __post_init__(self):
        if min(self.smoothness, self.second_moment, self.step_scale) <= 0:
            raise ValueError("smoothness, second_moment, and step_scale must be positive")
        if self.max_ratio < 1:
            raise ValueError("max_ratio must be >= 1")
        if self.optimality_gap < 0:
            raise ValueError("optimality_gap must be >= 0")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")

    @property
    def eta_value(self) -> float:
        return self.eta if self.eta is not None else 1.0 / self.max_ratio

    @property
    def tau(self) -> float:
        return contraction_factor(self.max_ratio, self.eta_value)


def convergence_rate_bound(params: BoundParams, horizon: int) -> float:
    """Closed-form bound on the average squared gradient norm.

    [4 gap / theta + 2 theta C M^2] / sqrt(T)
        + 4 C^2 M^2 (c_max^3 - c_max) theta^2 / T

    for the theta / sqrt(T) schedule. The second term vanishes for dense
    training (c_max = 1) and grows polynomially with the compression ratio,
    which is the sense in which heavier compression slows convergence.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    c = params.max_ratio
    theta = params.step_scale
    sqrt_t = math.sqrt(horizon)
    first = (4.0 * params.optimality_gap / theta + 2.0 * theta * params.smoothness * params.second_moment) / sqrt_t
    second = (
        4.0
        * params.smoothness**2
        * params.second_moment
        * (c**3 - c)
        * theta**2
        / horizon
    )
    return first + second


# --- run-level reports ----------------------------------------------------------


@dataclass
class AssumptionTrace:
    """Aggregation-quality ratios collected over a run, one cell per (t, layer)."""

    cells: list[tuple[int, int, float | None]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[IterationRecord]) -> "AssumptionTrace":
        trace = cls()
        for rec in records:
            if rec.delta is None:
                continue
            for layer_pos, value in enumerate(rec.delta, start=1):
                trace.cells.append((rec.t, layer_pos, value))
        return trace

    @classmethod
    def from_run(cls, run: TrainRun) -> "AssumptionTrace":
        return cls.from_records(run.records)

    @property
    def defined_cells(self) -> int:
        return sum(1 for _, _, v in self.cells if v is not None)

    @property
    def violations(self) -> int:
        return sum(1 for _, _, v in self.cells if v is not None and v > 1.0)

    @property
    def violation_fraction(self) -> float:
        defined = self.defined_cells
        return self.violations / defined if defined else 0.0

    def max_value(self) -> float | None:
        vals = [v for _, _, v in self.cells if v is not None]
        return max(vals) if vals else None


@dataclass(frozen=True)
class DriftComparison:
    t: int
    measured: float
    bound: float
    ok: bool


def compare_drift_bound(run: TrainRun, params: BoundParams) -> list[DriftComparison]:
    """Measured squared gap to the shadow iterates vs the drift bound.

    Expectation bounds can be beaten by a single sample path only in the
    stochastic case; with deterministic full-batch gradients and a single
    worker the comparison is exact, which is how the tests use it.
    """
    cfg = run.config
    steps = cfg.schedule.alphas(cfg.iterations, start=1)
    series, _ = drift_bound_series(steps, params.max_ratio, params.eta_value, params.second_moment)
    out = []
    for rec in run.records:
        if rec.v_x_gap is None or rec.t < 1:
            continue
        measured = rec.v_x_gap**2
        bound = float(series[rec.t - 1])
        out.append(DriftComparison(rec.t, measured, bound, measured <= bound * (1 + 1e-9) + 1e-15))
    return out


@dataclass(frozen=True)
class RateCheckEntry:
    t: int
    running_average: float


@dataclass
class RateCheckReport:
    entries: list[RateCheckEntry]
    measured_mean: float | None
    bound: float | None
    within_bound: bool | None
    loglog_slope: float | None

    def to_dict(self) -> dict:
        return {
            "measured_mean": self.measured_mean,
            "bound": self.bound,
            "within_bound": self.within_bound,
            "loglog_slope": self.loglog_slope,
            "checkpoints": [(e.t, e.running_average) for e in self.entries],
        }


def empirical_rate_check(run: TrainRun, params: BoundParams | None = None) -> RateCheckReport:
    """Compare the run's average squared gradient norm with the rate bound.

    Needs per-iteration full-gradient norms (track_full_grad). The log-log
    slope of the running average across checkpoints is reported as a trend;
    a negative slope means the average is still falling. Empty runs yield
    an empty report.
    """
    entries: list[RateCheckEntry] = []
    total = 0.0
    count = 0
    for rec in run.records:
        if rec.grad_norm_sq is None:
            continue
        # Records may be sparser than iterations; the trainer keeps the
        # exact mean separately, these entries only trace the trend.
        total += rec.grad_norm_sq
        count += 1
        entries.append(RateCheckEntry(rec.t, total / count))
    measured = run.grad_norm_sq_mean
    bound = None
    within = None
    if params is not None and run.completed_iterations >= 1:
        bound = convergence_rate_bound(params, run.completed_iterations)
        if measured is not None:
            within = measured <= bound
    slope = None
    if len(entries) >= 2:
        ts = np.log([e.t for e in entries])
        ys = np.log([max(e.running_average, 1e-300) for e in entries])
        slope = float(np.polyfit(ts, ys, 1)[0])
    return RateCheckReport(entries, measured, bound, within, slope)
