"""The aggregation-quality ratio: certified empirically, broken adversarially.

During layer-wise training, each logged iteration and layer gets a ratio
comparing the residual of summed local top-k picks with what a uniformly
random selection would leave in expectation. Values at or below one mean
the magnitude-based selection is doing its job across workers; the theory
leans on that. A hand-built cancellation example shows the ratio can
exceed one, which is why it is measured rather than assumed.
"""

import numpy as np

from lagsgd import AssumptionTrace, CompressionPolicy, StepSizeSchedule, TrainerConfig, topk_aggregation_ratio, train
from lagsgd.models import DatasetSpec, MlpModel, SyntheticDataset

dataset = SyntheticDataset(DatasetSpec("synthetic-gaussian-classification", 4096, 64, 4, seed=123))
model = MlpModel((64, 16, 4))

cfg = TrainerConfig(
    algorithm="lags",
    workers=8,
    policy=CompressionPolicy.uniform(10.0, model.shape),
    schedule=StepSizeSchedule("inv-sqrt-T", 1.0),
    iterations=800,
    seed=42,
    delta_log_every=1,
    loss_log_every=50,
)
run = train(cfg, model, dataset)
trace = AssumptionTrace.from_run(run)
print(f"8-worker MLP run, {trace.defined_cells} (iteration, layer) cells measured")
print(f"violations (> 1): {trace.violations} -> fraction {trace.violation_fraction:.4f}")
print(f"largest observed ratio: {trace.max_value():.3f}")

print("\nadversarial two-worker input:")
value = topk_aggregation_ratio([np.array([1.0, 0.0]), np.array([-1.0, 0.5])], 1)
print("  worker picks cancel exactly; ratio =", value)
