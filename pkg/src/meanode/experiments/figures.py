"""Desk-scale reproductions of the depth/width and alpha figures.

Every figure yields a data table (``<tag>.csv``), a JSON sidecar and a plot
whose CSV twin holds exactly the plotted points.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from meanode.config import FigureOverrides, SweepSpec, TrainConfig, default_config, settings
from meanode.errors import ConfigError, FitError
from meanode.experiments.fitting import RateFit, RatePoint, fit_rate
from meanode.experiments.plots import PlotSpec, Series, emit_plot
from meanode.experiments.sweep import CSV_COLUMNS, SweepResult, run_sweep
from meanode.limit.reference import build_reference
from meanode.resnet import ForwardTrace, NetParams, forward_pass, make_dataset, train
from meanode.shared import write_csv, write_json
from meanode.tensor import FloatArray, SeedPath, SeedTag, gaussian_sample

logger = logging.getLogger(__name__)

FIGURES = ("1", "2a", "2b", "3a", "3b", "4a", "4b", "4c")


@dataclass
class FigureData:
    tag: str
    columns: tuple[str, ...]
    rows: list[list[Any]]
    plot: PlotSpec
    meta: dict[str, Any] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        name = f"figure_{self.tag}"
        paths = [write_csv(out / f"{name}.csv", self.columns, self.rows)]
        write_json(out / f"{name}.json", self.meta)
        paths.append(out / f"{name}.json")
        paths += emit_plot(out, name, self.plot)
        return paths


@dataclass(frozen=True)
class FigureContext:
    overrides: FigureOverrides = field(default_factory=FigureOverrides)
    fast: bool = False
    workers: int | None = None
    seed: int | None = None

    def config(self, **defaults: Any) -> TrainConfig:
        changes = {**defaults, **self.overrides.base}
        if self.seed is not None:
            changes["seed"] = self.seed
        return default_config(**changes)

    def values(self, default: tuple[float, ...]) -> tuple[float, ...]:
        return self.overrides.values or default

    def dims(self, default: tuple[int, ...]) -> tuple[int, ...]:
        return self.overrides.dims or default

    def repetitions(self, default: int) -> int:
        return self.overrides.repetitions or default

    def reference_size(self) -> tuple[int, int]:
        L_ref, M_ref = settings.reference_size(self.fast)
        return (
            self.overrides.reference_depth or L_ref,
            self.overrides.reference_width or M_ref,
        )


def projection_vector(seed: int, D: int) -> FloatArray:
    """A seeded unit vector in R^D."""
    g = gaussian_sample(SeedPath(seed).child(SeedTag.PROJECTION), D, 1.0)
    return g / np.linalg.norm(g)


def _project(states: FloatArray, direction: FloatArray) -> FloatArray:
    """<e, h^l> of the first token of the first input, for every layer."""
    return states[:, 0, :, 0] @ direction


def figure_1(ctx: FigureContext) -> FigureData:
    base = ctx.config()
    depths = [int(v) for v in ctx.values((4.0, 16.0, 64.0))]
    L_ref, M_ref = ctx.reference_size()
    dataset = make_dataset(base)
    ref = build_reference(
        base, dataset, L_ref, M_ref,
        compared=[(L, base.M) for L in depths], field_iterations=(base.K,),
    )  # fmt: skip
    direction = projection_vector(base.seed, base.D)
    rows: list[list[Any]] = []
    plot = PlotSpec(
        f"Forward pass after K={base.K} steps (1D projection, input 0)",
        "depth s", "projection",
    )  # fmt: skip
    for L in depths:
        run = train(base.with_updates(L=L), dataset)
        trace = forward_pass(run.final, dataset.inputs[:1], base.alpha)
        s = np.arange(L + 1) / L
        proj = _project(trace.states, direction)
        rows += [[f"L={L}", L, si, pi] for si, pi in zip(s, proj, strict=True)]
        plot.series.append(Series(f"L={L}", s.tolist(), proj.tolist(), style="points"))
    ref_proj = _project(ref.fields_at(base.K).forward, direction)
    s_ref = ref.grid
    rows += [["limit", L_ref, si, pi] for si, pi in zip(s_ref, ref_proj, strict=True)]
    plot.series.append(Series("limit", s_ref.tolist(), ref_proj.tolist()))
    meta = {
        "config": base.model_dump(mode="json"),
        "depths": depths,
        "reference_size": [L_ref, M_ref],
        "projection": direction.tolist(),
        "input_index": 0,
    }
    return FigureData("1", ("series", "L", "s", "projection"), rows, plot, meta)


def _sweep_figure(tag: str, result: SweepResult, xlabel: str) -> FigureData:
    plot = PlotSpec(
        f"Output error after k={result.spec.iterations[-1]} steps", xlabel, "RMS error",
        logx=True, logy=True,
    )  # fmt: skip
    summary = [row for row in result.summary() if row["k"] == result.spec.iterations[-1]]
    xs = [row["value"] for row in summary]
    plot.series.append(Series("measured", xs, [row["mean"] for row in summary], "points"))
    if result.fit is not None and xs:
        base = result.spec.base
        points = [
            RatePoint(0.0, L=int(x) if result.spec.axis == "L" else base.L,
                      M=int(x) if result.spec.axis == "M" else base.M)
            for x in xs
        ]  # fmt: skip
        a, b = result.fit.coefficients
        plot.series.append(
            Series(f"{a:.3g}/L + {b:.3g}/sqrt(LM)", xs, result.fit.predict(points).tolist())
        )
    rows = [rec.csv_row(settings.record_runtime) for rec in result.records]
    return FigureData(tag, CSV_COLUMNS, rows, plot, result.sidecar())


def figure_2a(ctx: FigureContext) -> FigureData:
    spec = SweepSpec(
        axis="L",
        values=ctx.values((8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0)),
        base=ctx.config(M=1),
        repetitions=ctx.repetitions(10),
        fit="depth_width",
        reference_depth=ctx.reference_size()[0],
        reference_width=ctx.reference_size()[1],
    )
    return _sweep_figure("2a", run_sweep(spec, ctx.workers, ctx.fast), "depth L")


def figure_2b(ctx: FigureContext) -> FigureData:
    spec = SweepSpec(
        axis="M",
        values=ctx.values((1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)),
        base=ctx.config(L=256),
        repetitions=ctx.repetitions(10),
        fit="depth_width",
        reference_depth=ctx.reference_size()[0],
        reference_width=ctx.reference_size()[1],
    )
    return _sweep_figure("2b", run_sweep(spec, ctx.workers, ctx.fast), "hidden width M")


def figure_3a(ctx: FigureContext) -> FigureData:
    base = ctx.config()
    L_ref, M_ref = ctx.reference_size()
    ref = build_reference(base, make_dataset(base), L_ref, M_ref)
    losses = ref.result.losses
    ks = list(range(len(losses)))
    plot = PlotSpec("Training loss of the limit model", "GD step k", "loss", logy=True)
    plot.series.append(Series(f"reference {L_ref}x{M_ref}", ks, losses.tolist()))
    rows = [[k, loss] for k, loss in zip(ks, losses, strict=True)]
    meta = {"config": ref.config.model_dump(mode="json"), "reference_size": [L_ref, M_ref]}
    return FigureData("3a", ("k", "loss"), rows, plot, meta)


def figure_3b(ctx: FigureContext) -> FigureData:
    """Trajectories of the first unit's input weights, tied across layers at init."""
    base = ctx.config(L=64, M=16, tie_first_unit=True)
    history: list[FloatArray] = []

    def record(k: int, net: NetParams, trace: ForwardTrace) -> None:
        history.append(net.params[:, 0, : base.D].copy())

    train(base, make_dataset(base), observer=record)
    traj = np.stack(history)  # (K+1, L, D)
    rows = [
        [l + 1, k, *traj[k, l].tolist()] for l in range(base.L) for k in range(traj.shape[0])
    ]
    pairs = [(a, a + 1) for a in range(0, min(base.D, 6) - 1, 2)]
    plot = PlotSpec(
        "Evolution of the first unit's input weights",
        "coordinate a", "coordinate b",
        panels=len(pairs), panel_titles=tuple(f"(u[{a}], u[{b}])" for a, b in pairs),
        legend=False,
    )  # fmt: skip
    for panel, (a, b) in enumerate(pairs):
        for l in range(base.L):
            shade = l / max(base.L - 1, 1)
            plot.series.append(
                Series(f"layer {l + 1}", traj[:, l, a].tolist(), traj[:, l, b].tolist(),
                       panel=panel, shade=shade)
            )  # fmt: skip
    columns = ("layer", "k", *(f"u{i}" for i in range(base.D)))
    meta = {"config": base.model_dump(mode="json"), "pairs": pairs}
    return FigureData("3b", columns, rows, plot, meta)


def _alpha_sweeps(ctx: FigureContext) -> tuple[dict[int, SweepResult], tuple[int, int]]:
    """One balanced alpha sweep per embedding dimension, measured at k=10 and k=50.

    The alpha figures use no reference, and --fast does not change them.
    """
    if ctx.fast:
        logger.info("--fast has no effect on the alpha figures")
    results = {}
    for D in ctx.dims((8, 32)):
        base = ctx.config(D=D, L=500, M=10, K=50)
        spec = SweepSpec(
            axis="alpha",
            values=ctx.values((0.25, 0.5, 1.0, 2.0, 4.0, 8.0)),
            base=base,
            repetitions=ctx.repetitions(10),
            k=tuple(sorted({min(10, base.K), base.K})),
            scaling="balanced",
            measure_error=False,
        )
        results[D] = run_sweep(spec, ctx.workers)
    first = next(iter(results.values())).spec.base
    return results, (first.L, first.M)


def _in_regime(alpha: float, L: int, M: int, D: int) -> bool:
    return alpha <= math.sqrt(L * M / D)


def _try_fit(points: list[RatePoint], model: Any) -> RateFit | None:
    try:
        return fit_rate(points, model)
    except FitError as e:
        logger.warning("Rate fit skipped: %s", e)
        return None


def _fit_meta(fit: RateFit | None) -> dict[str, Any] | None:
    if fit is None:
        return None
    return {
        "model": fit.model,
        "formula": fit.formula,
        "coefficients": list(fit.coefficients),
        "residual": fit.residual,
        "r_squared": fit.r_squared,
    }


def _per_alpha_means(
    result: SweepResult, metric: str, k: int
) -> dict[float, float]:
    groups: dict[float, list[float]] = defaultdict(list)
    for rec in result.records:
        v = getattr(rec, metric)
        if rec.k == k and not rec.diverged and v is not None:
            groups[rec.value].append(v)
    return {a: float(np.mean(vs)) for a, vs in sorted(groups.items())}


def figure_4a(ctx: FigureContext) -> FigureData:
    results, (L, M) = _alpha_sweeps(ctx)
    plot = PlotSpec(
        "Output fluctuations at k=10", "alpha", "std across repetitions", logx=True, logy=True
    )
    rows: list[list[Any]] = []
    points: list[RatePoint] = []
    for D, result in results.items():
        k = result.spec.iterations[0]
        means = _per_alpha_means(result, "fluct_std", k)
        for alpha, y in means.items():
            rows.append([D, alpha, k, y, _in_regime(alpha, L, M, D)])
            points.append(RatePoint(y, L, M, D, alpha))
        plot.series.append(Series(f"D={D}", list(means), list(means.values()), "points"))
    fit = _try_fit(points, "fluctuation")
    if fit is not None:
        for D in results:
            alphas = sorted({p.alpha for p in points if p.D == D})
            grid = [RatePoint(0.0, L, M, D, a) for a in alphas]
            plot.series.append(Series(f"fit D={D}", alphas, fit.predict(grid).tolist()))
    meta = {"fit": _fit_meta(fit), "L": L, "M": M, "dims": list(results)}
    return FigureData("4a", ("D", "alpha", "k", "fluct_std", "in_regime"), rows, plot, meta)


def figure_4b(ctx: FigureContext) -> FigureData:
    results, (L, M) = _alpha_sweeps(ctx)
    plot = PlotSpec(
        "Input-weight displacement at k=50", "alpha", "||u_k - u_0|| (RMS)",
        logx=True, logy=True,
    )  # fmt: skip
    rows: list[list[Any]] = []
    points: list[RatePoint] = []
    for D, result in results.items():
        k = result.spec.iterations[-1]
        for rec in result.records:
            if rec.k == k:
                rows.append([D, rec.value, rec.repetition, k, rec.laziness,
                             _in_regime(rec.value, L, M, D)])  # fmt: skip
        means = _per_alpha_means(result, "laziness", k)
        points += [RatePoint(y, L, M, D, alpha) for alpha, y in means.items()]
        plot.series.append(Series(f"D={D}", list(means), list(means.values()), "points"))
    fit = _try_fit(points, "laziness")
    if fit is not None:
        alphas = sorted({p.alpha for p in points})
        grid = [RatePoint(0.0, L, M, 1, a) for a in alphas]
        plot.series.append(Series("a*min(1, 1/alpha)", alphas, fit.predict(grid).tolist()))
    meta = {"fit": _fit_meta(fit), "L": L, "M": M, "dims": list(results)}
    columns = ("D", "alpha", "repetition", "k", "laziness", "in_regime")
    return FigureData("4b", columns, rows, plot, meta)


def figure_4c(ctx: FigureContext) -> FigureData:
    results, (L, M) = _alpha_sweeps(ctx)
    plot = PlotSpec("Training loss of every run", "GD step k", "loss", logy=True, legend=False)
    rows: list[list[Any]] = []
    alphas = sorted({a for r in results.values() for a, _ in r.loss_logs})
    for D, result in results.items():
        for (alpha, rep), losses in sorted(result.loss_logs.items()):
            ks = list(range(len(losses)))
            rows += [[D, alpha, rep, k, loss] for k, loss in zip(ks, losses, strict=True)]
            shade = alphas.index(alpha) / max(len(alphas) - 1, 1)
            plot.series.append(
                Series(f"D={D} alpha={alpha} rep={rep}", ks, losses.tolist(), shade=shade)
            )
    meta = {"L": L, "M": M, "dims": list(results), "alphas": alphas}
    return FigureData("4c", ("D", "alpha", "repetition", "k", "loss"), rows, plot, meta)


BUILDERS: dict[str, Callable[[FigureContext], FigureData]] = {
    "1": figure_1,
    "2a": figure_2a,
    "2b": figure_2b,
    "3a": figure_3a,
    "3b": figure_3b,
    "4a": figure_4a,
    "4b": figure_4b,
    "4c": figure_4c,
}


def make_figure(tag: str, ctx: FigureContext | None = None) -> FigureData:
    if tag not in BUILDERS:
        raise ConfigError(f"unknown figure {tag!r}; choose one of {', '.join(FIGURES)}")
    logger.info("Building figure %s", tag)
    return BUILDERS[tag](ctx or FigureContext())
