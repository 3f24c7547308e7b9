"""Numeric bound checkers against a measured run.

On a full-batch quadratic with one worker the theory's quantities are all
computable exactly: the smoothness constant is the top eigenvalue, the
optimal loss is zero, and the gradient second moment comes straight off
the trace. The drift of the compressed iterates away from their dense
shadow must then sit under the geometric bound at every step, and the
closed-form rate bound must dominate the measured average squared
gradient norm.
"""

from lagsgd import (
    BoundParams,
    CompressionPolicy,
    StepSizeSchedule,
    TrainerConfig,
    compare_drift_bound,
    convergence_rate_bound,
    empirical_rate_check,
    stepsize_condition,
    train,
)
from lagsgd.models import QuadraticModel

model = QuadraticModel(32, (16, 16), seed=3)
policy = CompressionPolicy.uniform(8.0, model.shape)
theta = 0.02
cfg = TrainerConfig(
    "lags", 1, policy, StepSizeSchedule("constant", theta), 600,
    seed=4, loss_log_every=1, track_full_grad=True,
)
run = train(cfg, model)

second_moment = max(r.grad_norm_sq for r in run.records)
params = BoundParams(
    smoothness=model.smoothness,
    second_moment=second_moment,
    max_ratio=policy.effective_max_ratio(model.shape),
    step_scale=theta,
    optimality_gap=run.initial_loss,
)
print(f"smoothness C = {params.smoothness:.4f}, M^2 = {second_moment:.4f}, "
      f"max ratio = {params.max_ratio:g}, tau = {params.tau:.4f}")

rows = compare_drift_bound(run, params)
worst = max(r.measured / r.bound for r in rows if r.bound > 0)
print(f"\ndrift vs bound over {len(rows)} iterations: all under bound = {all(r.ok for r in rows)}, "
      f"tightest margin measured/bound = {worst:.3f}")

condition = stepsize_condition(cfg.schedule, params.max_ratio, params.eta_value, cfg.iterations)
print(f"step-size condition: max value {condition.max_value:.6f}, bounded = {condition.bounded}")

dense_cfg = TrainerConfig(
    "dense", 1, CompressionPolicy.uniform(1.0, model.shape),
    StepSizeSchedule("inv-sqrt-T", 0.5), 1000, seed=4,
    loss_log_every=20, track_full_grad=True,
)
dense_run = train(dense_cfg, model)
m2 = max(r.grad_norm_sq for r in dense_run.records)
dense_params = BoundParams(model.smoothness, m2, 1.0, 0.5, dense_run.initial_loss)
report = empirical_rate_check(dense_run, dense_params)
print(f"\ndense rate check at T=1000: measured {report.measured_mean:.4f} <= bound {report.bound:.4f} "
      f"-> {report.within_bound}; trend slope {report.loglog_slope:.2f}")

print("\nrate bound growth with the compression ratio (all else fixed):")
for ratio in (1.0, 2.0, 10.0, 100.0):
    p = BoundParams(model.smoothness, m2, ratio, 0.5, dense_run.initial_loss)
    print(f"  c_max={ratio:>5g}: bound {convergence_rate_bound(p, 1000):.4f}")
