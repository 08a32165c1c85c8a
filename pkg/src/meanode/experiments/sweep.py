"""Sweeps over one axis with repetitions, the CSV records and rate fits."""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from meanode.config import INTEGER_AXES, Axis, Scaling, SweepSpec, TrainConfig, settings
from meanode.errors import DivergenceError, FitError
from meanode.experiments.fitting import RateFit, RatePoint, fit_rate, loglog_slope
from meanode.experiments.metrics import measure_forward_error, measure_laziness, output_fluctuation
from meanode.limit.reference import ReferenceModel, build_reference
from meanode.resnet import forward_pass, make_dataset, train
from meanode.shared import write_csv, write_json
from meanode.tensor import FloatArray, SeedPath, SeedTag

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "axis",
    "value",
    "repetition",
    "k",
    "error_rms",
    "error_max_layer",
    "fluct_std",
    "laziness",
    "diverged",
    "seed",
    "runtime_s",
)


@dataclass
class ExperimentRecord:
    axis: str
    value: float
    repetition: int
    k: int
    seed: int
    error_rms: float | None = None
    error_max_layer: float | None = None
    fluct_std: float | None = None
    laziness: float | None = None
    diverged: bool = False
    runtime_s: float | None = None
    per_input: tuple[float, ...] = ()
    resolved: bool = True

    def csv_row(self, record_runtime: bool = False) -> list[Any]:
        value: Any = int(self.value) if self.axis in INTEGER_AXES else self.value
        runtime = self.runtime_s if record_runtime else None
        return [
            self.axis, value, self.repetition, self.k, self.error_rms, self.error_max_layer,
            self.fluct_std, self.laziness, self.diverged, self.seed, runtime,
        ]  # fmt: skip


@dataclass
class SweepResult:
    spec: SweepSpec
    records: list[ExperimentRecord]
    reference_size: tuple[int, int] | None = None
    fit: RateFit | None = None
    fit_error: str | None = None
    under_resolved: list[dict[str, float]] = field(default_factory=list)
    loss_logs: dict[tuple[float, int], FloatArray] = field(default_factory=dict)

    def summary(self, metric: str = "error_rms") -> list[dict[str, float]]:
        """Mean and std over repetitions per (value, k), diverged runs excluded."""
        groups: dict[tuple[float, int], list[float]] = defaultdict(list)
        for rec in self.records:
            v = getattr(rec, metric)
            if not rec.diverged and v is not None:
                groups[(rec.value, rec.k)].append(v)
        rows = []
        for (value, k), vals in sorted(groups.items()):
            arr = np.asarray(vals)
            rows.append(
                {
                    "value": value,
                    "k": k,
                    "mean": float(arr.mean()),
                    "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    "count": int(arr.size),
                }
            )
        return rows

    def loglog_slopes(self, metric: str = "error_rms") -> list[dict[str, Any]]:
        """Empirical log-log slope of the per-value mean against the axis, per k.

        Diverged and under-resolved points are left out, as in the fit. The
        slope is None when fewer than two positive means remain.
        """
        groups: dict[int, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
        for rec in self.records:
            v = getattr(rec, metric)
            if rec.resolved and not rec.diverged and v is not None:
                groups[rec.k][rec.value].append(v)
        slopes = []
        for k, by_value in sorted(groups.items()):
            xs = sorted(by_value)
            ys = [float(np.mean(by_value[x])) for x in xs]
            try:
                slope: float | None = loglog_slope(xs, ys)
            except FitError:
                slope = None
            slopes.append({"k": k, "metric": metric, "slope": slope, "n_points": len(xs)})
        return slopes

    def write_csv(self, path: str | Path, record_runtime: bool | None = None) -> Path:
        runtime = settings.record_runtime if record_runtime is None else record_runtime
        return write_records_csv(path, self.records, runtime)

    def sidecar(self) -> dict[str, Any]:
        fit = None
        if self.fit is not None:
            fit = {
                "model": self.fit.model,
                "formula": self.fit.formula,
                "coefficients": list(self.fit.coefficients),
                "residual": self.fit.residual,
                "r_squared": self.fit.r_squared,
                "n_points": self.fit.n_points,
            }
        return {
            "spec": self.spec.model_dump(mode="json"),
            "reference_size": self.reference_size,
            "fit": fit,
            "fit_error": self.fit_error,
            "under_resolved": self.under_resolved,
            "diverged": [
                {"value": r.value, "repetition": r.repetition, "k": r.k}
                for r in self.records
                if r.diverged
            ],
            "summary": self.summary(),
            "loglog_slope": self.loglog_slopes(),
        }

    def write_sidecar(self, path: str | Path) -> Path:
        path = Path(path)
        write_json(path, self.sidecar())
        return path


def write_records_csv(
    path: str | Path, records: list[ExperimentRecord], record_runtime: bool = False
) -> Path:
    rows = (rec.csv_row(record_runtime) for rec in records)
    return write_csv(Path(path), CSV_COLUMNS, rows)


def balanced_config(base: TrainConfig, alpha_v: float, eta0: float = 1.0) -> TrainConfig:
    """Absorb alpha into the output scale: sigma_u = sqrt(D), sigma_v = alpha*sqrt(D).

    LRs are eta_u = eta0*D*min(1, alpha^-2) and eta_v = eta0*D; the model's
    own alpha is set to 1.
    """
    D = base.D
    damping = 1.0 if alpha_v <= 1 else alpha_v**-2
    return base.with_updates(
        alpha=1.0,
        sigma_u=math.sqrt(D),
        sigma_v=alpha_v * math.sqrt(D),
        eta_u=eta0 * D * damping,
        eta_v=eta0 * D,
    )


def apply_axis(
    base: TrainConfig, axis: Axis, value: float, scaling: Scaling = "fixed"
) -> TrainConfig:
    """The base config with one axis set to value."""
    if scaling == "balanced" and axis == "alpha":
        return balanced_config(base, value, eta0=base.eta_v / base.D)
    if scaling == "balanced" and axis == "D":
        alpha_v = base.sigma_v / math.sqrt(base.D)
        resized = base.with_updates(D=int(value))
        return balanced_config(resized, alpha_v, eta0=base.eta_v / base.D)
    if axis in INTEGER_AXES:
        return base.with_updates(**{axis: int(value)})
    return base.with_updates(**{axis: float(value)})


def rate_alpha(config: TrainConfig, axis: Axis, value: float, scaling: Scaling) -> float:
    """The effective alpha of a sweep point (the axis value under balanced scaling)."""
    if scaling == "balanced" and axis == "alpha":
        return value
    if scaling == "balanced":
        return config.sigma_v / math.sqrt(config.D)
    return config.alpha


def repetition_seed(master: int, repetition: int) -> int:
    return SeedPath(master).child(SeedTag.REPETITION, repetition).derive_seed()


def _reference_key(config: TrainConfig) -> str:
    return config.with_updates(L=1, M=1, snapshots=None).model_dump_json()


@dataclass(frozen=True)
class _Job:
    index: int
    value: float
    repetition: int
    config: TrainConfig
    reference_key: str | None
    resolved: bool


@dataclass
class _Outcome:
    index: int
    records: list[ExperimentRecord]
    outputs: dict[int, FloatArray]
    losses: FloatArray | None = None


_WORKER_REFERENCES: dict[str, ReferenceModel] = {}


def _init_worker(references: dict[str, ReferenceModel]) -> None:
    _WORKER_REFERENCES.clear()
    _WORKER_REFERENCES.update(references)


def _run_job(job: _Job, axis: Axis, iterations: tuple[int, ...]) -> _Outcome:
    config = job.config.with_updates(snapshots=iterations)
    start = time.perf_counter()
    base = {"axis": axis, "value": job.value, "repetition": job.repetition, "seed": config.seed}
    try:
        run = train(config, make_dataset(config))
    except DivergenceError as e:
        logger.warning("%s=%s rep %s diverged: %s", axis, job.value, job.repetition, e)
        records = [ExperimentRecord(k=k, diverged=True, **base) for k in iterations]
        return _Outcome(job.index, records, {})

    ref = _WORKER_REFERENCES.get(job.reference_key) if job.reference_key else None
    records, outputs = [], {}
    for k in iterations:
        rec = ExperimentRecord(k=k, resolved=job.resolved, **base)
        if ref is not None:
            err = measure_forward_error(run, ref, k)
            rec.error_rms = err.rms
            rec.error_max_layer = err.max_layer
            rec.per_input = tuple(float(e) for e in err.per_input)
        if config.block == "mlp":
            rec.laziness = measure_laziness(run, k)
        outputs[k] = forward_pass(run.net_at(k), run.dataset.inputs, config.alpha).outputs
        records.append(rec)
    elapsed = time.perf_counter() - start
    for rec in records:
        rec.runtime_s = elapsed
    logger.debug("%s=%s rep %s done in %.2fs", axis, job.value, job.repetition, elapsed)
    return _Outcome(job.index, records, outputs, run.losses)


def _fit_points(result: SweepResult, configs: dict[float, TrainConfig]) -> list[RatePoint]:
    spec = result.spec
    metric = {"depth_width": "error_rms", "fluctuation": "fluct_std", "laziness": "laziness"}[
        spec.fit or "depth_width"
    ]
    last_k = spec.iterations[-1]
    values: dict[float, list[float]] = defaultdict(list)
    for rec in result.records:
        y = getattr(rec, metric)
        if rec.k == last_k and not rec.diverged and rec.resolved and y is not None:
            values[rec.value].append(y)
    points = []
    for value, ys in sorted(values.items()):
        cfg = configs[value]
        alpha = rate_alpha(cfg, spec.axis, value, spec.scaling)
        points.append(RatePoint(float(np.mean(ys)), cfg.L, cfg.M, cfg.D, alpha))
    return points


def run_sweep(
    spec: SweepSpec,
    workers: int | None = None,
    fast: bool = False,
    references: dict[str, ReferenceModel] | None = None,
) -> SweepResult:
    """Train every (value, repetition) pair and measure it.

    References are built once per distinct configuration apart from (L, M)
    and shared read-only by the workers. Points whose size is too close to
    the reference's are measured but flagged and left out of the fit.
    """
    n_workers = settings.workers if workers is None else workers
    iterations = spec.iterations
    configs = {v: apply_axis(spec.base, spec.axis, v, spec.scaling) for v in spec.values}

    ref_size: tuple[int, int] | None = None
    refs: dict[str, ReferenceModel] = dict(references or {})
    if spec.measure_error:
        default_L, default_M = settings.reference_size(fast)
        ref_size = (spec.reference_depth or default_L, spec.reference_width or default_M)
        for cfg in configs.values():
            key = _reference_key(cfg)
            if key not in refs:
                refs[key] = build_reference(
                    cfg, make_dataset(cfg), *ref_size, field_iterations=iterations
                ).without_parameters()

    result = SweepResult(spec, [], reference_size=ref_size)
    jobs = []
    for value, cfg in configs.items():
        resolved = True
        key = None
        if spec.measure_error:
            key = _reference_key(cfg)
            resolved = refs[key].resolves(cfg.L, cfg.M)
            if not resolved:
                logger.warning(
                    "Reference %sx%s under-resolves %s=%s (L=%s, M=%s); excluded from fits",
                    *ref_size, spec.axis, value, cfg.L, cfg.M,
                )  # fmt: skip
                result.under_resolved.append({"value": value, "L": cfg.L, "M": cfg.M})
        for r in range(spec.repetitions):
            seeded = cfg.with_updates(seed=repetition_seed(spec.base.seed, r))
            jobs.append(_Job(len(jobs), value, r, seeded, key, resolved))

    logger.info(
        "Sweeping %s over %s values x %s repetitions with %s worker(s)",
        spec.axis, len(spec.values), spec.repetitions, n_workers,
    )  # fmt: skip
    outcomes: list[_Outcome | None] = [None] * len(jobs)
    if n_workers <= 1:
        _init_worker(refs)
        for job in jobs:
            outcomes[job.index] = _run_job(job, spec.axis, iterations)
    else:
        with ProcessPoolExecutor(
            max_workers=n_workers, initializer=_init_worker, initargs=(refs,)
        ) as executor:
            futures = [executor.submit(_run_job, job, spec.axis, iterations) for job in jobs]
            for done, future in enumerate(as_completed(futures), start=1):
                outcome = future.result()
                outcomes[outcome.index] = outcome
                logger.debug("Progress: %s/%s runs", done, len(jobs))

    grouped: dict[tuple[float, int], list[FloatArray]] = defaultdict(list)
    for outcome in outcomes:
        assert outcome is not None
        result.records.extend(outcome.records)
        job = jobs[outcome.index]
        if outcome.losses is not None:
            result.loss_logs[(job.value, job.repetition)] = outcome.losses
        for job_k, out in outcome.outputs.items():
            grouped[(job.value, job_k)].append(out)
    for rec in result.records:
        outs = grouped.get((rec.value, rec.k), [])
        if not rec.diverged and len(outs) >= 2:
            rec.fluct_std = output_fluctuation(outs)

    if spec.fit is not None:
        try:
            result.fit = fit_rate(_fit_points(result, configs), spec.fit)
            logger.info(
                "Fit %s: coefficients=%s R^2=%.4f",
                spec.fit, result.fit.coefficients, result.fit.r_squared,
            )  # fmt: skip
        except FitError as e:
            result.fit_error = str(e)
            logger.warning("Rate fit skipped: %s", e)
    return result
