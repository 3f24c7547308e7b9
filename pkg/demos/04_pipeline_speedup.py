"""Pricing one training iteration: overlap, adaptive ratios, speedup bound.

A synthetic three-layer scenario on a slow network. The serialized
schedule pays for every message after backprop; the pipelined schedule
hides messages behind the remaining backward computes. The ideal bound
caps the ratio of the two by hiding min(compute, communication) entirely.
"""

from lagsgd import NetworkModel, PipelineScenario, comm_time, max_pipeline_speedup, schedule, select_ratios
from lagsgd.sparsify import CompressionPolicy

dims = (262144, 16384, 4096)
network = NetworkModel(latency=10e-6, inv_bandwidth=2e-9)
probe = PipelineScenario(
    layer_dims=dims,
    backward_times=(0.004, 0.002, 0.001),
    forward_time=0.002,
    spar_times=(2e-4, 1e-4, 1e-4),
    network=network,
    policy=CompressionPolicy({1: 1.0, 2: 1.0, 3: 1.0}, 1000.0),
    workers=4,
)

policy = select_ratios(probe, ratio_cap=1000)
print("adaptive ratios per layer:", {l: f"{c:g}" for l, c in sorted(policy.per_layer_ratio.items())})
for lid, dim in enumerate(dims, start=1):
    t = comm_time(dim, policy.ratio_for(lid), network, 4)
    print(f"  layer {lid}: {dim:>7} elems at c={policy.ratio_for(lid):g} -> {t * 1e3:.3f} ms per message")

scenario = PipelineScenario(
    layer_dims=dims,
    backward_times=probe.backward_times,
    forward_time=probe.forward_time,
    spar_times=probe.spar_times,
    network=network,
    policy=policy,
    workers=4,
)
serial = schedule(scenario, "no-overlap")
overlapped = schedule(scenario, "pipelined")
bound = max_pipeline_speedup(scenario.forward_time, scenario.backward_total, scenario.comm_total)
print(f"\nserialized makespan: {serial.makespan * 1e3:.3f} ms")
print(f"pipelined makespan:  {overlapped.makespan * 1e3:.3f} ms")
print(f"realized speedup:    {serial.makespan / overlapped.makespan:.3f}  (ideal bound {bound:.3f})")

print("\npipelined timeline:")
for event in overlapped.events:
    print(f"  {event.name:<12} {event.resource:<8} {event.start * 1e3:8.3f} -> {event.end * 1e3:8.3f} ms")
