"""Timing models: communication cost, pipeline scheduling, speedup bound.

Communication follows a latency-bandwidth model scaled by a collective
multiplier (ring style P - 1 by default). The pipeline scheduler is a
two-resource discrete-event simulation: backward computes (plus any
sender-side compression overhead) occupy a serial compute resource in
backpropagation order L..1, and each layer's message occupies a serial
network channel in release order. Absolute times are synthetic; only the
relationships between schedules are meaningful.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ScenarioError
from .layered import LayerShape
from .sparsify import CompressionPolicy, INDEX_BYTES, VALUE_BYTES_F64

SPARSE_ENTRY_BYTES = INDEX_BYTES + VALUE_BYTES_F64  # index u32 + value f64
DENSE_VALUE_BYTES = 8

DEFAULT_RATIO_GRID = (1, 2, 5, 10, 25, 50, 100, 250, 500, 1000)


def ring_multiplier(workers: int) -> float:
    return float(workers - 1)


def constant_multiplier(value: float) -> Callable[[int], float]:
    def factor(_workers: int) -> float:
        return value

    return factor


@dataclass(frozen=True)
class NetworkModel:
    """Seconds per message (latency) and per byte (inverse bandwidth)."""

    latency: float
    inv_bandwidth: float
    multiplier: Callable[[int], float] | None = None

    def __post_init__(self):
        if self.latency < 0 or self.inv_bandwidth < 0:
            raise ValueError("latency and inv_bandwidth must be non-negative")

    def factor(self, workers: int) -> float:
        m = ring_multiplier if self.multiplier is None else self.multiplier
        return m(workers)

    def message_time(self, nbytes: float, workers: int) -> float:
        return self.factor(workers) * (self.latency + self.inv_bandwidth * nbytes)


def comm_time(dim: int, ratio: float, network: NetworkModel, workers: int) -> float:
    """Aggregation time for one layer's sparse message at the given ratio.

    Message payload is max(1, floor(dim / ratio)) index-value pairs, so the
    time is monotone non-increasing in the ratio.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    entries = max(1, int(dim // ratio))
    return network.message_time(entries * SPARSE_ENTRY_BYTES, workers)


def dense_comm_time(dim: int, network: NetworkModel, workers: int) -> float:
    """Aggregation time for one layer's uncompressed values."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return network.message_time(dim * DENSE_VALUE_BYTES, workers)


@dataclass(frozen=True)
class PipelineScenario:
    """Per-layer costs plus the network and compression settings for one iteration."""

    layer_dims: tuple[int, ...]
    backward_times: tuple[float, ...]
    forward_time: float
    spar_times: tuple[float, ...]
    network: NetworkModel
    policy: CompressionPolicy
    workers: int

    def __post_init__(self):
        L = len(self.layer_dims)
        if L == 0:
            raise ValueError("scenario needs at least one layer")
        if len(self.backward_times) != L or len(self.spar_times) != L:
            raise ValueError("backward_times and spar_times must match layer_dims in length")
        if any(t <= 0 for t in self.backward_times):
            raise ValueError("backward times must be positive")
        if self.forward_time < 0 or any(t < 0 for t in self.spar_times):
            raise ValueError("forward and sparsification times must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def shape(self) -> tuple[LayerShape, ...]:
        return tuple(LayerShape(i, d) for i, d in enumerate(self.layer_dims, start=1))

    def comm_times(self) -> tuple[float, ...]:
        return tuple(
            comm_time(d, self.policy.ratio_for(i), self.network, self.workers)
            for i, d in enumerate(self.layer_dims, start=1)
        )

    def dense_comm_times(self) -> tuple[float, ...]:
        return tuple(dense_comm_time(d, self.network, self.workers) for d in self.layer_dims)

    @property
    def backward_total(self) -> float:
        return float(sum(self.backward_times))

    @property
    def spar_total(self) -> float:
        return float(sum(self.spar_times))

    @property
    def comm_total(self) -> float:
        return float(sum(self.comm_times()))


@dataclass(frozen=True)
class TimelineEvent:
    name: str
    resource: str
    start: float
    end: float


@dataclass(frozen=True)
class ScheduleResult:
    makespan: float
    events: tuple[TimelineEvent, ...]


def _schedule_from_times(
    mode: str,
    forward_time: float,
    backward_times: Sequence[float],
    spar_times: Sequence[float],
    comm_times: Sequence[float],
) -> ScheduleResult:
    L = len(backward_times)
    events: list[TimelineEvent] = []
    if mode == "no-overlap":
        # Everything serialized: forward, backward L..1, then per-layer
        # sparsify + communicate in the same order.
        t = forward_time
        events.append(TimelineEvent("forward", "compute", 0.0, t))
        for l in range(L, 0, -1):
            events.append(TimelineEvent(f"backward-{l}", "compute", t, t + backward_times[l - 1]))
            t += backward_times[l - 1]
        for l in range(L, 0, -1):
            if spar_times[l - 1] > 0:
                events.append(TimelineEvent(f"sparsify-{l}", "compute", t, t + spar_times[l - 1]))
                t += spar_times[l - 1]
            events.append(TimelineEvent(f"comm-{l}", "network", t, t + comm_times[l - 1]))
            t += comm_times[l - 1]
        return ScheduleResult(t, tuple(events))
    if mode != "pipelined":
        raise ValueError(f"unknown schedule mode {mode!r}")
    # Compute resource runs backward-L, sparsify-L, backward-(L-1), ... and
    # each layer's message is released to the serial network channel as soon
    # as its sparsification is done. The next forward pass trails the last
    # arrival.
    t = 0.0
    releases: list[tuple[int, float]] = []
    for l in range(L, 0, -1):
        events.append(TimelineEvent(f"backward-{l}", "compute", t, t + backward_times[l - 1]))
        t += backward_times[l - 1]
        if spar_times[l - 1] > 0:
            events.append(TimelineEvent(f"sparsify-{l}", "compute", t, t + spar_times[l - 1]))
            t += spar_times[l - 1]
        releases.append((l, t))
    net_free = 0.0
    for l, release in releases:
        start = max(net_free, release)
        end = start + comm_times[l - 1]
        events.append(TimelineEvent(f"comm-{l}", "network", start, end))
        net_free = end
    events.append(TimelineEvent("forward", "compute", net_free, net_free + forward_time))
    return ScheduleResult(net_free + forward_time, tuple(events))


def schedule(scenario: PipelineScenario, mode: str) -> ScheduleResult:
    """Makespan and event timeline for one iteration under the given mode."""
    return _schedule_from_times(
        mode,
        scenario.forward_time,
        scenario.backward_times,
        scenario.spar_times,
        scenario.comm_times(),
    )


def max_pipeline_speedup(t_f: float, t_b: float, t_c: float) -> float:
    """Ideal overlap speedup: hide min(t_b, t_c) entirely.

    (t_f + t_b + t_c) / (t_f + t_b + t_c - min(t_b, t_c)); assumes the
    compression overhead is negligible next to the compute it rides on.
    """
    if t_b <= 0 or t_c <= 0:
        raise ValueError("t_b and t_c must be positive")
    if t_f < 0:
        raise ValueError("t_f must be non-negative")
    total = t_f + t_b + t_c
    return total / (total - min(t_b, t_c))


def pipelined_lower_bound(scenario: PipelineScenario) -> float:
    """No schedule can beat the busier of the two serial resources."""
    comms = scenario.comm_times()
    first_release = scenario.backward_times[-1] + scenario.spar_times[-1]
    compute_chain = scenario.backward_total + scenario.spar_total
    return scenario.forward_time + max(compute_chain, first_release + sum(comms))


def select_ratios(
    scenario: PipelineScenario,
    ratio_cap: float,
    ratio_grid: Sequence[float] = DEFAULT_RATIO_GRID,
) -> CompressionPolicy:
    """Smallest grid ratio per layer whose message hides behind compute.

    Layer l's message overlaps the backward compute of the next layer in
    backpropagation order (layer l - 1); the last-computed layer has
    nothing after it, so it budgets against its own compute time. Layers
    whose constraint no grid ratio satisfies get the cap.
    """
    if ratio_cap < 1:
        raise ValueError("ratio_cap must be >= 1")
    grid = sorted(float(c) for c in ratio_grid)
    if not grid:
        raise ValueError("ratio grid must be non-empty")
    if grid[0] < 1:
        raise ValueError("ratios must be >= 1")
    ratios: dict[int, float] = {}
    for l in range(1, scenario.num_layers + 1):
        budget = scenario.backward_times[l - 2] if l >= 2 else scenario.backward_times[0]
        chosen = None
        for c in grid:
            cost = comm_time(scenario.layer_dims[l - 1], c, scenario.network, scenario.workers)
            if cost + scenario.spar_times[l - 1] <= budget:
                chosen = c
                break
        ratios[l] = min(chosen if chosen is not None else ratio_cap, ratio_cap)
    return CompressionPolicy(ratios, ratio_cap)


def iteration_time(scenario: PipelineScenario, algorithm: str) -> ScheduleResult:
    """Per-iteration schedule for one training algorithm.

    dense pipelines full-size messages with no compression overhead; slgs
    compresses but must wait for the whole backward pass, so nothing
    overlaps; lags pipelines the compressed per-layer messages.
    """
    if algorithm == "dense":
        return _schedule_from_times(
            "pipelined",
            scenario.forward_time,
            scenario.backward_times,
            [0.0] * scenario.num_layers,
            scenario.dense_comm_times(),
        )
    if algorithm == "slgs":
        return schedule(scenario, "no-overlap")
    if algorithm == "lags":
        return schedule(scenario, "pipelined")
    raise ValueError(f"unknown algorithm {algorithm!r}")


def write_timeline_csv(events: Sequence[TimelineEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event", "resource", "start", "end"])
        for ev in events:
            writer.writerow([ev.name, ev.resource, repr(ev.start), repr(ev.end)])


# --- scenario files -------------------------------------------------------------
#
# Flat key = value lines, '#' comments. Lists are whitespace separated.
# Keys: workers, latency, inv_bandwidth, multiplier ("ring" or a number),
# forward_time, layer_dims, backward_times, spar_times (optional, default 0),
# ratios ("adaptive", one number, or one per layer), ratio_grid (optional),
# ratio_cap.


@dataclass(frozen=True)
class ScenarioFile:
    scenario: PipelineScenario
    ratio_grid: tuple[float, ...]
    ratio_cap: float
    adaptive: bool


def _parse_floats(raw: str, line: int, count: int | None = None) -> list[float]:
    try:
        vals = [float(tok) for tok in raw.split()]
    except ValueError as exc:
        raise ScenarioError(f"expected numbers, got {raw!r}", line) from exc
    if count is not None and len(vals) != count:
        raise ScenarioError(f"expected {count} values, got {len(vals)}", line)
    return vals


def load_scenario(path) -> ScenarioFile:
    entries: dict[str, tuple[str, int]] = {}
    try:
        text_lines = open(path).read().splitlines()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    for lineno, raw in enumerate(text_lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ScenarioError(f"expected 'key = value', got {text!r}", lineno)
        key, value = (part.strip() for part in text.split("=", 1))
        if key in entries:
            raise ScenarioError(f"duplicate key {key!r}", lineno)
        entries[key] = (value, lineno)

    def need(key: str) -> tuple[str, int]:
        if key not in entries:
            raise ScenarioError(f"missing required key {key!r}")
        return entries.pop(key)

    dims_raw, dims_line = need("layer_dims")
    try:
        layer_dims = tuple(int(tok) for tok in dims_raw.split())
    except ValueError as exc:
        raise ScenarioError(f"expected integers, got {dims_raw!r}", dims_line) from exc
    L = len(layer_dims)

    workers_raw, workers_line = need("workers")
    try:
        workers = int(workers_raw)
    except ValueError as exc:
        raise ScenarioError(f"expected an integer, got {workers_raw!r}", workers_line) from exc

    latency = _parse_floats(*need("latency"), count=1)[0]
    inv_bw = _parse_floats(*need("inv_bandwidth"), count=1)[0]
    forward = _parse_floats(*need("forward_time"), count=1)[0]
    backward = tuple(_parse_floats(*need("backward_times"), count=L))
    if "spar_times" in entries:
        spar = tuple(_parse_floats(*entries.pop("spar_times"), count=L))
    else:
        spar = tuple(0.0 for _ in range(L))

    multiplier = None
    if "multiplier" in entries:
        mult_raw, mult_line = entries.pop("multiplier")
        if mult_raw != "ring":
            multiplier = constant_multiplier(_parse_floats(mult_raw, mult_line, count=1)[0])
    network = NetworkModel(latency, inv_bw, multiplier)

    cap = _parse_floats(*need("ratio_cap"), count=1)[0]
    if "ratio_grid" in entries:
        grid = tuple(_parse_floats(*entries.pop("ratio_grid")))
    else:
        grid = tuple(float(c) for c in DEFAULT_RATIO_GRID)

    ratios_raw, ratios_line = need("ratios")
    adaptive = ratios_raw.strip() == "adaptive"
    if adaptive:
        probe = PipelineScenario(
            layer_dims, backward, forward, spar, network,
            CompressionPolicy({i: 1.0 for i in range(1, L + 1)}, cap), workers,
        )
        policy = select_ratios(probe, cap, grid)
    else:
        vals = _parse_floats(ratios_raw, ratios_line)
        if len(vals) == 1:
            vals = vals * L
        if len(vals) != L:
            raise ScenarioError(f"expected 1 or {L} ratios, got {len(vals)}", ratios_line)
        policy = CompressionPolicy({i: v for i, v in enumerate(vals, start=1)}, cap)

    if entries:
        unknown = ", ".join(sorted(entries))
        line = min(line for _, line in entries.values())
        raise ScenarioError(f"unknown keys: {unknown}", line)

    scenario = PipelineScenario(layer_dims, backward, forward, spar, network, policy, workers)
    return ScenarioFile(scenario, grid, cap, adaptive)


@dataclass(frozen=True)
class PerfReport:
    no_overlap_makespan: float
    pipelined_makespan: float
    realized_speedup: float
    speedup_bound: float
    speedup_bound_with_overhead: float
    ratios: dict[int, float]
    timeline: tuple[TimelineEvent, ...]

    def summary_lines(self) -> list[str]:
        lines = [
            f"no-overlap makespan:   {self.no_overlap_makespan:.6g} s",
            f"pipelined makespan:    {self.pipelined_makespan:.6g} s",
            f"realized speedup:      {self.realized_speedup:.4f}",
            f"ideal speedup bound:   {self.speedup_bound:.4f}",
            f"bound incl. overhead:  {self.speedup_bound_with_overhead:.4f}",
            "per-layer ratios:      "
            + " ".join(f"{l}:{c:g}" for l, c in sorted(self.ratios.items())),
        ]
        return lines


def analyze_scenario(scenario: PipelineScenario) -> PerfReport:
    no = schedule(scenario, "no-overlap")
    pipe = schedule(scenario, "pipelined")
    t_b, t_c = scenario.backward_total, scenario.comm_total
    bound = max_pipeline_speedup(scenario.forward_time, t_b, t_c)
    bound_oh = max_pipeline_speedup(scenario.forward_time, t_b + scenario.spar_total, t_c)
    return PerfReport(
        no_overlap_makespan=no.makespan,
        pipelined_makespan=pipe.makespan,
        realized_speedup=no.makespan / pipe.makespan,
        speedup_bound=bound,
        speedup_bound_with_overhead=bound_oh,
        ratios=dict(scenario.policy.per_layer_ratio),
        timeline=pipe.events,
    )
