"""Layer-wise adaptive gradient sparsification on simulated data-parallel workers.

The package splits into:

* :mod:`lagsgd.layered` - layer-partitioned dense vectors and snapshots,
* :mod:`lagsgd.sparsify` - top-k / rand-k / sampled selection, chunk wire
  format, and tensor fusion,
* :mod:`lagsgd.models` - small models with hand-written gradients plus
  synthetic datasets,
* :mod:`lagsgd.training` - dense, single-selection, and layer-wise
  error-feedback training over simulated workers,
* :mod:`lagsgd.perf` - communication cost model, pipeline scheduler,
  speedup bound, and adaptive ratio selection,
* :mod:`lagsgd.analysis` - numeric checkers for the convergence theory,
* :mod:`lagsgd.experiment` / :mod:`lagsgd.cli` - the experiment harness.
"""

from .layered import LayerShape, LayeredVector, axpy, concat, load_snapshot, save_snapshot
from .models import (
    DatasetSpec,
    LogisticModel,
    MlpModel,
    Model,
    QuadraticModel,
    SyntheticDataset,
    make_model,
    second_moment_estimate,
)
from .sparsify import (
    CompressionPolicy,
    FusionBuffer,
    FusionMessage,
    SparseChunk,
    decode_chunk,
    decode_message,
    decompress,
    encode_chunk,
    encode_message,
    fusion_flush,
    rand_k,
    sampled_top_k,
    top_k,
)
from .training import (
    IterationRecord,
    StepSizeSchedule,
    TrainRun,
    TrainerConfig,
    WorkerState,
    auxiliary_step,
    dense_step,
    lags_step,
    slgs_step,
    train,
)
from .perf import (
    NetworkModel,
    PipelineScenario,
    comm_time,
    dense_comm_time,
    load_scenario,
    max_pipeline_speedup,
    schedule,
    select_ratios,
)
from .analysis import (
    AssumptionTrace,
    BoundParams,
    compare_drift_bound,
    constant_alpha_condition_limit,
    convergence_rate_bound,
    drift_bound,
    drift_bound_series,
    empirical_rate_check,
    layerwise_topk_bound_check,
    stepsize_condition,
    topk_aggregation_ratio,
)
from .experiment import load_experiment, run_experiment, verify_run

__version__ = "0.1.0"
