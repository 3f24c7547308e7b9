"""Experiment harness: declarative configs in, deterministic artifacts out.

A config is an INI-style file with sections ``[experiment]``, ``[model]``,
``[dataset]`` (omit for the data-independent quadratic), ``[schedule]``,
one ``[arm:<name>]`` per algorithm arm, and optionally ``[perf]`` pointing
at a scenario file. All arms share the model, dataset, seed, and schedule,
so cross-arm comparisons are paired.

Each arm writes ``metrics.jsonl`` (one record per logged iteration),
``checkpoint.bin`` (final parameters), and ``analysis.json``; the run
directory gains ``summary.txt``, ``resolved.json`` (the fully resolved
settings), a copy of the config, and ``manifest.json`` holding timestamps
and content hashes. Only the manifest carries non-reproducible content.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import platform
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import perf as perf_mod
from .errors import ConfigError, IntegrityError
from .layered import load_snapshot, save_snapshot
from .models import PLACEHOLDER_BATCH, DatasetSpec, Model, SyntheticDataset, make_model
from .sparsify import CompressionPolicy
from .training import ALGORITHMS, IterationRecord, StepSizeSchedule, TrainRun, TrainerConfig, train
from .analysis import AssumptionTrace

log = logging.getLogger("lagsgd.experiment")

RESIDUAL_IDENTITY_TOL = 1e-9


@dataclass(frozen=True)
class ArmSpec:
    name: str
    algorithm: str
    ratio: float | None = None
    ratios: tuple[float, ...] | None = None
    cap: float | None = None


@dataclass
class ExperimentSpec:
    seed: int
    iterations: int
    workers: int
    model_kind: str
    model_kwargs: dict
    arms: list[ArmSpec]
    schedule: StepSizeSchedule
    name: str = "experiment"
    out_dir: str | None = None
    batch_size: int = 32
    loss_log_every: int = 10
    delta_log_every: int = 50
    track_aux: bool = True
    track_full_grad: bool = False
    dataset: DatasetSpec | None = None
    perf_scenario: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "iterations": self.iterations,
            "workers": self.workers,
            "batch_size": self.batch_size,
            "loss_log_every": self.loss_log_every,
            "delta_log_every": self.delta_log_every,
            "track_aux": self.track_aux,
            "track_full_grad": self.track_full_grad,
            "model": {"kind": self.model_kind, **self.model_kwargs},
            "dataset": None
            if self.dataset is None
            else {
                "kind": self.dataset.kind,
                "samples": self.dataset.samples,
                "feature_dim": self.dataset.feature_dim,
                "classes": self.dataset.classes,
                "seed": self.dataset.seed,
            },
            "schedule": {"kind": self.schedule.kind, "theta": self.schedule.theta},
            "arms": [
                {
                    "name": a.name,
                    "algorithm": a.algorithm,
                    "ratio": a.ratio,
                    "ratios": list(a.ratios) if a.ratios is not None else None,
                    "cap": a.cap,
                }
                for a in self.arms
            ],
            "perf_scenario": self.perf_scenario,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentSpec":
        model = dict(payload["model"])
        kind = model.pop("kind")
        ds = payload.get("dataset")
        dataset = None
        if ds is not None:
            dataset = DatasetSpec(ds["kind"], ds["samples"], ds["feature_dim"], ds["classes"], ds["seed"])
        arms = [
            ArmSpec(
                a["name"],
                a["algorithm"],
                a.get("ratio"),
                tuple(a["ratios"]) if a.get("ratios") else None,
                a.get("cap"),
            )
            for a in payload["arms"]
        ]
        sched = payload["schedule"]
        return cls(
            seed=payload["seed"],
            iterations=payload["iterations"],
            workers=payload["workers"],
            model_kind=kind,
            model_kwargs=model,
            arms=arms,
            schedule=StepSizeSchedule(sched["kind"], sched["theta"]),
            name=payload.get("name", "experiment"),
            out_dir=payload.get("out_dir"),
            batch_size=payload.get("batch_size", 32),
            loss_log_every=payload.get("loss_log_every", 10),
            delta_log_every=payload.get("delta_log_every", 50),
            track_aux=payload.get("track_aux", True),
            track_full_grad=payload.get("track_full_grad", False),
            dataset=dataset,
            perf_scenario=payload.get("perf_scenario"),
        )


# --- config parsing -------------------------------------------------------------


class _Section:
    """Typed access to one config section with error messages naming keys."""

    def __init__(self, name: str, values: dict[str, str]):
        self.name = name
        self.values = dict(values)

    def take(self, key: str, required: bool = False) -> str | None:
        if key not in self.values:
            if required:
                raise ConfigError(f"missing key {self.name}.{key}", keys=[f"{self.name}.{key}"])
            return None
        return self.values.pop(key)

    def take_int(self, key: str, default: int | None = None, required: bool = False) -> int | None:
        raw = self.take(key, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.name}.{key}: expected an integer, got {raw!r}", keys=[f"{self.name}.{key}"]) from exc

    def take_float(self, key: str, default: float | None = None, required: bool = False) -> float | None:
        raw = self.take(key, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.name}.{key}: expected a number, got {raw!r}", keys=[f"{self.name}.{key}"]) from exc

    def take_bool(self, key: str, default: bool) -> bool:
        raw = self.take(key)
        if raw is None:
            return default
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{self.name}.{key}: expected a boolean, got {raw!r}", keys=[f"{self.name}.{key}"])

    def finish(self):
        if self.values:
            keys = [f"{self.name}.{k}" for k in sorted(self.values)]
            raise ConfigError(f"unknown keys: {', '.join(keys)}", keys=keys)


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    sections = {name: _Section(name, dict(parser.items(name))) for name in parser.sections()}

    for required in ("experiment", "model", "schedule"):
        if required not in sections:
            raise ConfigError(f"missing required section [{required}]", keys=[required])

    exp = sections.pop("experiment")
    seed = exp.take_int("seed", required=True)
    iterations = exp.take_int("iterations", required=True)
    workers = exp.take_int("workers", required=True)
    name = exp.take("name") or "experiment"
    out_dir = exp.take("out")
    batch_size = exp.take_int("batch_size", 32)
    loss_log_every = exp.take_int("loss_log_every", 10)
    delta_log_every = exp.take_int("delta_log_every", 50)
    track_aux = exp.take_bool("track_aux", True)
    track_full_grad = exp.take_bool("track_full_grad", False)
    exp.finish()

    model_sec = sections.pop("model")
    model_kind = model_sec.take("kind", required=True)
    model_kwargs: dict = {}
    if model_kind == "quadratic":
        model_kwargs["dim"] = model_sec.take_int("dim", required=True)
        raw_layers = model_sec.take("layer_dims")
        if raw_layers:
            model_kwargs["layer_dims"] = [int(tok) for tok in raw_layers.split()]
    elif model_kind == "logistic-regression":
        model_kwargs["feature_dim"] = model_sec.take_int("feature_dim", required=True)
        model_kwargs["classes"] = model_sec.take_int("classes", required=True)
        split = model_sec.take("split_bias")
        if split is not None:
            model_kwargs["split_bias"] = split.strip().lower() in ("true", "yes", "1", "on")
    elif model_kind == "mlp":
        raw_widths = model_sec.take("widths", required=True)
        model_kwargs["widths"] = [int(tok) for tok in raw_widths.split()]
        split = model_sec.take("split_bias")
        if split is not None:
            model_kwargs["split_bias"] = split.strip().lower() in ("true", "yes", "1", "on")
    else:
        raise ConfigError(f"model.kind: unknown kind {model_kind!r}", keys=["model.kind"])
    model_sec.finish()

    dataset = None
    if "dataset" in sections:
        ds = sections.pop("dataset")
        dataset = DatasetSpec(
            kind=ds.take("kind", required=True),
            samples=ds.take_int("samples", required=True),
            feature_dim=ds.take_int("feature_dim", required=True),
            classes=ds.take_int("classes", required=True),
            seed=ds.take_int("seed", required=True),
        )
        ds.finish()
    elif model_kind != "quadratic":
        raise ConfigError("missing required section [dataset] (only quadratic runs may omit it)", keys=["dataset"])

    sched = sections.pop("schedule")
    schedule = StepSizeSchedule(sched.take("kind", required=True), sched.take_float("theta", required=True))
    sched.finish()

    perf_scenario = None
    if "perf" in sections:
        perf_sec = sections.pop("perf")
        perf_scenario = perf_sec.take("scenario", required=True)
        perf_sec.finish()

    arms = []
    for sec_name in list(sections):
        if not sec_name.startswith("arm:"):
            raise ConfigError(f"unknown section [{sec_name}]", keys=[sec_name])
        arm_sec = sections.pop(sec_name)
        arm_name = sec_name.split(":", 1)[1]
        algorithm = arm_sec.take("algorithm", required=True)
        if algorithm not in ALGORITHMS:
            raise ConfigError(
                f"{sec_name}.algorithm: unknown algorithm {algorithm!r}", keys=[f"{sec_name}.algorithm"]
            )
        ratio = arm_sec.take_float("ratio")
        raw_ratios = arm_sec.take("ratios")
        ratios = tuple(float(tok) for tok in raw_ratios.split()) if raw_ratios else None
        cap = arm_sec.take_float("cap")
        arm_sec.finish()
        arms.append(ArmSpec(arm_name, algorithm, ratio, ratios, cap))
    if not arms:
        raise ConfigError("config defines no [arm:<name>] sections", keys=["arm"])

    return ExperimentSpec(
        seed=seed,
        iterations=iterations,
        workers=workers,
        model_kind=model_kind,
        model_kwargs=model_kwargs,
        arms=arms,
        schedule=schedule,
        name=name,
        out_dir=out_dir,
        batch_size=batch_size,
        loss_log_every=loss_log_every,
        delta_log_every=delta_log_every,
        track_aux=track_aux,
        track_full_grad=track_full_grad,
        dataset=dataset,
        perf_scenario=perf_scenario,
    )


def build_model(spec: ExperimentSpec) -> Model:
    kwargs = dict(spec.model_kwargs)
    if spec.model_kind == "quadratic":
        if "layer_dims" in kwargs:
            kwargs["layer_dims"] = tuple(kwargs["layer_dims"])
        kwargs.setdefault("seed", spec.seed)
    if spec.model_kind == "mlp":
        kwargs["widths"] = tuple(kwargs["widths"])
    return make_model(spec.model_kind, **kwargs)


def arm_policy(arm: ArmSpec, model: Model) -> CompressionPolicy:
    shape = model.shape
    if arm.algorithm == "dense":
        return CompressionPolicy.uniform(1.0, shape)
    if arm.ratios is not None:
        if len(arm.ratios) != len(shape):
            raise ConfigError(
                f"arm:{arm.name}.ratios: expected {len(shape)} values, got {len(arm.ratios)}",
                keys=[f"arm:{arm.name}.ratios"],
            )
        ratios = {ls.layer_id: r for ls, r in zip(shape, arm.ratios)}
        cap = arm.cap if arm.cap is not None else max(arm.ratios)
        return CompressionPolicy(ratios, cap)
    if arm.ratio is None:
        raise ConfigError(
            f"arm:{arm.name}: sparsified arms need 'ratio' or 'ratios'", keys=[f"arm:{arm.name}.ratio"]
        )
    return CompressionPolicy.uniform(arm.ratio, shape, arm.cap)


# --- serialization ---------------------------------------------------------------


def _json_safe(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def record_to_dict(rec: IterationRecord) -> dict:
    out: dict = {"t": rec.t, "loss": _json_safe(rec.loss)}
    if rec.v_x_gap is not None:
        out["v_x_gap"] = _json_safe(rec.v_x_gap)
    if rec.resid_dev is not None:
        out["resid_dev"] = _json_safe(rec.resid_dev)
    if rec.residual_norms is not None:
        out["residual_norms"] = [_json_safe(v) for v in rec.residual_norms]
    if rec.delta is not None and any(v is not None for v in rec.delta):
        out["delta"] = [None if v is None else _json_safe(v) for v in rec.delta]
    if rec.grad_norm_sq is not None:
        out["grad_norm_sq"] = _json_safe(rec.grad_norm_sq)
    if rec.sim_time is not None:
        out["sim_time"] = rec.sim_time
    return out


def record_from_dict(payload: dict) -> IterationRecord:
    return IterationRecord(
        t=payload["t"],
        loss=payload["loss"],
        v_x_gap=payload.get("v_x_gap"),
        resid_dev=payload.get("resid_dev"),
        residual_norms=payload.get("residual_norms"),
        delta=payload.get("delta"),
        grad_norm_sq=payload.get("grad_norm_sq"),
        sim_time=payload.get("sim_time"),
    )


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, separators=(",", ":"), allow_nan=False)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- running ---------------------------------------------------------------------


@dataclass
class ArmResult:
    name: str
    run: TrainRun
    analysis: dict
    sim_time: float | None = None


@dataclass
class ExperimentResult:
    out_dir: Path
    arms: list[ArmResult]
    exit_code: int
    failures: list[str] = field(default_factory=list)


def _arm_analysis(arm: ArmSpec, run: TrainRun, sim_time: float | None) -> dict:
    trace = AssumptionTrace.from_run(run)
    max_dev = run.max_resid_dev()
    payload = {
        "algorithm": arm.algorithm,
        "iterations": run.config.iterations,
        "completed": run.completed_iterations,
        "diverged": run.diverged,
        "initial_loss": _json_safe(run.initial_loss),
        "final_loss": _json_safe(run.final_loss),
        "max_resid_dev": _json_safe(max_dev) if max_dev is not None else None,
        "delta_defined_cells": trace.defined_cells,
        "delta_violations": trace.violations,
        "delta_violation_fraction": trace.violation_fraction if trace.cells else None,
        "grad_norm_sq_mean": _json_safe(run.grad_norm_sq_mean) if run.grad_norm_sq_mean is not None else None,
        "sim_iteration_time": sim_time,
    }
    return payload


def run_experiment(
    config_path,
    out_override: str | None = None,
    seed_override: int | None = None,
) -> ExperimentResult:
    """Execute every arm of the config and write the artifact tree.

    Exit code 0 when every arm finished and every hard invariant held,
    nonzero otherwise.
    """
    config_path = Path(config_path)
    spec = load_experiment(config_path)
    if seed_override is not None:
        # The dataset keeps its own seed; only run-level randomness follows
        # the override, so overridden runs stay paired on the same data.
        spec.seed = seed_override
    out_dir = Path(out_override or spec.out_dir or f"runs/{spec.name}")
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(spec)
    dataset = SyntheticDataset(spec.dataset) if spec.dataset is not None else None

    scenario_file = None
    if spec.perf_scenario is not None:
        scenario_path = Path(spec.perf_scenario)
        if not scenario_path.is_absolute():
            scenario_path = config_path.parent / scenario_path
        scenario_file = perf_mod.load_scenario(scenario_path)

    failures: list[str] = []
    arm_results: list[ArmResult] = []
    written: list[Path] = []

    for arm in spec.arms:
        policy = arm_policy(arm, model)
        cfg = TrainerConfig(
            algorithm=arm.algorithm,
            workers=spec.workers,
            policy=policy,
            schedule=spec.schedule,
            iterations=spec.iterations,
            seed=spec.seed,
            batch_size=spec.batch_size,
            loss_log_every=spec.loss_log_every,
            delta_log_every=spec.delta_log_every,
            track_aux=spec.track_aux,
            track_full_grad=spec.track_full_grad,
        )
        log.info("running arm %s (%s) for %d iterations", arm.name, arm.algorithm, spec.iterations)
        run = train(cfg, model, dataset)

        sim_time = None
        if scenario_file is not None:
            sim_time = perf_mod.iteration_time(scenario_file.scenario, arm.algorithm).makespan
            for rec in run.records:
                rec.sim_time = sim_time

        if run.diverged:
            failures.append(f"arm {arm.name}: diverged at iteration {run.completed_iterations + 1}")
        max_dev = run.max_resid_dev()
        if max_dev is not None and max_dev > RESIDUAL_IDENTITY_TOL:
            failures.append(f"arm {arm.name}: residual identity deviation {max_dev:.3e} exceeds {RESIDUAL_IDENTITY_TOL}")

        arm_dir = out_dir / arm.name
        arm_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = arm_dir / "metrics.jsonl"
        with open(metrics_path, "w") as fh:
            for rec in run.records:
                fh.write(_dump_json(record_to_dict(rec)) + "\n")
        checkpoint_path = arm_dir / "checkpoint.bin"
        save_snapshot(run.final_params, checkpoint_path)
        analysis_payload = _arm_analysis(arm, run, sim_time)
        analysis_path = arm_dir / "analysis.json"
        analysis_path.write_text(_dump_json(analysis_payload) + "\n")
        written.extend([metrics_path, checkpoint_path, analysis_path])
        arm_results.append(ArmResult(arm.name, run, analysis_payload, sim_time))

    # Cross-arm summary.
    lines = [f"experiment: {spec.name}", f"seed: {spec.seed}", ""]
    header = f"{'arm':<16}{'algorithm':<10}{'final_loss':>14}{'delta>1 frac':>14}{'max_resid_dev':>16}{'sim_time':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for ar in arm_results:
        a = ar.analysis
        frac = a["delta_violation_fraction"]
        lines.append(
            f"{ar.name:<16}{a['algorithm']:<10}"
            f"{a['final_loss'] if a['final_loss'] is not None else float('nan'):>14.6g}"
            f"{frac if frac is not None else float('nan'):>14.4g}"
            f"{a['max_resid_dev'] if a['max_resid_dev'] is not None else float('nan'):>16.3e}"
            f"{ar.sim_time if ar.sim_time is not None else float('nan'):>12.4g}"
        )
    if failures:
        lines.append("")
        lines.extend(f"FAIL: {msg}" for msg in failures)
    summary_path = out_dir / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    written.append(summary_path)

    resolved_path = out_dir / "resolved.json"
    resolved_path.write_text(_dump_json(spec.to_dict()) + "\n")
    written.append(resolved_path)

    config_copy = out_dir / "config.ini"
    if config_path.resolve() != config_copy.resolve():
        shutil.copyfile(config_path, config_copy)
    written.append(config_copy)

    if scenario_file is not None:
        timeline_path = out_dir / "timeline.csv"
        perf_mod.write_timeline_csv(perf_mod.schedule(scenario_file.scenario, "pipelined").events, timeline_path)
        written.append(timeline_path)

    manifest = {
        "created": datetime.now(timezone.utc).isoformat(),
        "host": platform.node(),
        "sha256": {str(p.relative_to(out_dir)): _sha256(p) for p in written},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    return ExperimentResult(out_dir, arm_results, exit_code=1 if failures else 0, failures=failures)


# --- verification -----------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass" | "fail" | "n/a"
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def summary_lines(self) -> list[str]:
        return [f"{c.status.upper():<5} {c.name}" + (f" ({c.detail})" if c.detail else "") for c in self.checks]


def verify_run(run_dir) -> VerifyReport:
    """Re-check a stored run directory: integrity, identities, degeneracy."""
    run_dir = Path(run_dir)
    checks: list[CheckResult] = []

    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"{manifest_path}: missing manifest")
    manifest = json.loads(manifest_path.read_text())
    for rel, expected in sorted(manifest.get("sha256", {}).items()):
        target = run_dir / rel
        if not target.exists():
            checks.append(CheckResult(f"integrity {rel}", "fail", "missing file"))
            continue
        actual = _sha256(target)
        if actual != expected:
            checks.append(CheckResult(f"integrity {rel}", "fail", "sha256 mismatch"))
        else:
            checks.append(CheckResult(f"integrity {rel}", "pass"))
    if any(c.status == "fail" for c in checks):
        return VerifyReport(checks)

    spec = ExperimentSpec.from_dict(json.loads((run_dir / "resolved.json").read_text()))
    model = build_model(spec)
    dataset = SyntheticDataset(spec.dataset) if spec.dataset is not None else None
    full_batch = dataset.full_batch() if dataset is not None else None

    loss_traces: dict[str, list[float]] = {}

    for arm in spec.arms:
        arm_dir = run_dir / arm.name
        analysis = json.loads((arm_dir / "analysis.json").read_text())
        records = [record_from_dict(json.loads(line)) for line in (arm_dir / "metrics.jsonl").read_text().splitlines()]
        loss_traces[arm.name] = [r.loss for r in records]

        params = load_snapshot(arm_dir / "checkpoint.bin")
        recomputed = model.loss(params, full_batch if full_batch is not None else PLACEHOLDER_BATCH)
        stored = analysis["final_loss"]
        if stored is None or recomputed != stored:
            checks.append(
                CheckResult(
                    f"{arm.name}: checkpoint loss",
                    "fail",
                    f"recomputed {recomputed!r} vs stored {stored!r}",
                )
            )
        else:
            checks.append(CheckResult(f"{arm.name}: checkpoint loss", "pass"))

        devs = [r.resid_dev for r in records if r.resid_dev is not None]
        if devs:
            worst = max(devs)
            status = "pass" if worst <= RESIDUAL_IDENTITY_TOL else "fail"
            checks.append(CheckResult(f"{arm.name}: residual identity", status, f"max dev {worst:.3e}"))
        else:
            checks.append(CheckResult(f"{arm.name}: residual identity", "n/a", "no shadow-sequence logs"))

        trace = AssumptionTrace.from_records(records)
        if arm.algorithm != "lags" or not trace.cells:
            checks.append(CheckResult(f"{arm.name}: selection-quality stats", "n/a", "no per-layer ratios logged"))
        else:
            ok = (
                trace.defined_cells == analysis["delta_defined_cells"]
                and trace.violations == analysis["delta_violations"]
            )
            checks.append(
                CheckResult(
                    f"{arm.name}: selection-quality stats",
                    "pass" if ok else "fail",
                    f"violations {trace.violations}/{trace.defined_cells}",
                )
            )

    dense_arms = [a.name for a in spec.arms if a.algorithm == "dense"]
    lossless_arms = [
        a.name
        for a in spec.arms
        if a.algorithm == "lags" and ((a.ratio == 1 and a.ratios is None) or (a.ratios is not None and set(a.ratios) == {1.0}))
    ]
    if dense_arms and lossless_arms:
        base = loss_traces[dense_arms[0]]
        for name in lossless_arms:
            same = loss_traces[name] == base
            checks.append(
                CheckResult(
                    f"degeneracy {dense_arms[0]} == {name}",
                    "pass" if same else "fail",
                    "loss traces compared elementwise",
                )
            )
    return VerifyReport(checks)
