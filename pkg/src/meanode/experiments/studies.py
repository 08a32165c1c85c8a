"""Multi-run studies behind the phase, couple and lazy commands."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from meanode.config import TrainConfig, settings
from meanode.experiments.metrics import (
    measure_laziness,
    measure_param_error,
    measure_semicomplete_gap,
)
from meanode.experiments.sweep import repetition_seed
from meanode.limit.lazy import lazy_forward, train_lazy
from meanode.limit.reference import build_reference
from meanode.limit.tracers import run_tracers
from meanode.resnet import forward_pass, make_dataset, train
from meanode.shared import write_csv, write_json
from meanode.tensor import batch_rms

logger = logging.getLogger(__name__)


@dataclass
class StudyResult:
    name: str
    columns: tuple[str, ...]
    rows: list[list[Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> list[Any]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        return [
            write_csv(out / f"{self.name}.csv", self.columns, self.rows),
            _write_meta(out / f"{self.name}.json", self.meta),
        ]


def _write_meta(path: Path, meta: dict[str, Any]) -> Path:
    write_json(path, meta)
    return path


def run_phase(
    base: TrainConfig,
    ratios: Sequence[float] = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0),
    repetitions: int = 3,
) -> StudyResult:
    """sigma_v sweep at fixed LRs, sigma_v = ratio * sqrt(D).

    Each run is paired with the sigma_v = 0 run drawn from the same seed, so
    both share their input weights. Reported per run: the gap to that
    baseline at K, the input-weight displacement after one step and at K.
    """
    result = StudyResult(
        "phase",
        ("sigma_v_ratio", "repetition", "gap", "laziness_first", "laziness_K", "seed"),
        meta={"base": base.model_dump(mode="json"), "ratios": list(ratios)},
    )
    dataset = make_dataset(base)
    for r in range(repetitions):
        seed = repetition_seed(base.seed, r)
        snapshots = tuple(sorted({min(1, base.K), base.K}))
        cfg = base.with_updates(seed=seed, snapshots=snapshots)
        baseline = train(cfg.with_updates(sigma_v=0.0), dataset)
        for ratio in ratios:
            run = train(cfg.with_updates(sigma_v=ratio * math.sqrt(base.D)), dataset)
            result.rows.append(
                [
                    ratio,
                    r,
                    measure_semicomplete_gap(run, baseline, base.K),
                    measure_laziness(run, snapshots[0]),
                    measure_laziness(run, base.K),
                    seed,
                ]
            )
        logger.info("Phase repetition %s/%s done", r + 1, repetitions)
    return result


def run_couple(
    base: TrainConfig,
    depths: Sequence[int] = (32, 128),
    repetitions: int = 10,
    reference_size: tuple[int, int] | None = None,
) -> StudyResult:
    """Tracer-vs-network parameter error per depth, repetition and iteration."""
    L_ref, M_ref = reference_size or settings.reference_size(fast=True)
    dataset = make_dataset(base)
    ref = build_reference(
        base,
        dataset,
        L_ref,
        M_ref,
        compared=[(L, base.M) for L in depths],
        field_iterations=range(base.K),
    )
    result = StudyResult(
        "couple",
        ("L", "repetition", "k", "param_error_max", "param_error_rms", "seed"),
        meta={
            "base": base.model_dump(mode="json"),
            "reference_size": [L_ref, M_ref],
            "depths": list(depths),
        },
    )
    schedule = tuple(range(base.K + 1))
    for L in depths:
        for r in range(repetitions):
            cfg = base.with_updates(L=L, seed=repetition_seed(base.seed, r), snapshots=schedule)
            run = train(cfg, dataset)
            for k, tracers in run_tracers(cfg, ref, dataset).items():
                err = measure_param_error(run, tracers, k)
                result.rows.append([L, r, k, err.max, err.rms, cfg.seed])
        logger.info("Coupling at L=%s done", L)
    return result


def run_lazy(
    base: TrainConfig,
    alphas: Sequence[float] = (2.0, 4.0, 8.0, 16.0),
    repetitions: int = 3,
) -> StudyResult:
    """Finite nets at growing alpha against the tangent model from the same Z0.

    Reported per run: the parameter displacement ||Z_K - Z_0|| (max over units
    and RMS), the tangent error max ||alpha (Z_K - Z_0) - zeta_K|| and the
    output distance to the tangent model on the training inputs.
    """
    result = StudyResult(
        "lazy",
        (
            "alpha",
            "repetition",
            "displacement_max",
            "displacement_rms",
            "tangent_error",
            "output_distance",
            "seed",
        ),
        meta={"base": base.model_dump(mode="json"), "alphas": list(alphas)},
    )
    dataset = make_dataset(base)
    for r in range(repetitions):
        cfg = base.with_updates(seed=repetition_seed(base.seed, r))
        lazy = train_lazy(cfg, dataset)
        zeta = lazy.zetas[cfg.K]
        lazy_out = lazy_forward(lazy.params_at(cfg.K), dataset.inputs).outputs
        for alpha in alphas:
            run = train(cfg.with_updates(alpha=alpha), dataset)
            delta = run.final.params - run.net_at(0).params
            norms = np.linalg.norm(delta, axis=-1)
            out = forward_pass(run.final, dataset.inputs, alpha).outputs
            result.rows.append(
                [
                    alpha,
                    r,
                    float(norms.max()),
                    float(np.sqrt(np.mean(norms**2))),
                    float(np.linalg.norm(alpha * delta - zeta, axis=-1).max()),
                    float(batch_rms(out - lazy_out).mean()),
                    cfg.seed,
                ]
            )
        logger.info("Lazy repetition %s/%s done", r + 1, repetitions)
    return result
