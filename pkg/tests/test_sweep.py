"""Tests for sweeps, their CSV records and fits."""

import math

import pytest
from pydantic import ValidationError

from meanode.config import SweepSpec, default_config
from meanode.experiments.sweep import (
    CSV_COLUMNS,
    ExperimentRecord,
    SweepResult,
    apply_axis,
    balanced_config,
    repetition_seed,
    run_sweep,
)
from meanode.limit.reference import build_reference
from tests.conftest import tiny_config


def _spec(**changes):
    data = {
        "axis": "L",
        "values": (2, 4),
        "base": tiny_config(L=2, M=1, K=2),
        "repetitions": 2,
        "reference_depth": 16,
        "reference_width": 8,
    }
    data.update(changes)
    return SweepSpec.model_validate(data)


class TestRunSweep:
    """Tests for run_sweep executed in-process."""

    def test_one_record_per_value_repetition_and_k(self):
        """Records cover every value, repetition and comparison iteration."""
        result = run_sweep(_spec(k=(1, 2)), workers=1)

        assert len(result.records) == 2 * 2 * 2
        assert {(r.value, r.repetition, r.k) for r in result.records} == {
            (v, rep, k) for v in (2, 4) for rep in (0, 1) for k in (1, 2)
        }
        assert result.reference_size == (16, 8)

    def test_grid_of_one(self):
        """A single value without a reference still measures laziness."""
        result = run_sweep(_spec(values=(3,), repetitions=1, measure_error=False), workers=1)

        assert len(result.records) == 1
        rec = result.records[0]
        assert rec.error_rms is None
        assert rec.fluct_std is None
        assert rec.laziness is not None
        assert result.fit is None

    def test_metrics_filled(self):
        """Error, fluctuation and per-input columns are filled."""
        result = run_sweep(_spec(), workers=1)

        for rec in result.records:
            assert rec.error_rms > 0.0
            assert rec.error_max_layer > 0.0
            assert rec.fluct_std > 0.0
            assert len(rec.per_input) == 3
            assert rec.resolved

    def test_repetitions_use_derived_seeds(self):
        """Repetition seeds are derived from the master seed."""
        result = run_sweep(_spec(measure_error=False), workers=1)

        seeds = {r.repetition: r.seed for r in result.records}
        assert seeds == {0: repetition_seed(7, 0), 1: repetition_seed(7, 1)}

    def test_csv_is_reproducible(self, tmp_path):
        """Two runs of the same sweep write byte-identical CSVs."""
        first = run_sweep(_spec(), workers=1).write_csv(tmp_path / "a.csv")
        second = run_sweep(_spec(), workers=1).write_csv(tmp_path / "b.csv")

        assert first.read_bytes() == second.read_bytes()
        header = first.read_text().splitlines()[0]
        assert header == ",".join(CSV_COLUMNS)

    def test_runtime_column_is_opt_in(self, tmp_path):
        """runtime_s stays empty unless asked for."""
        result = run_sweep(_spec(measure_error=False, repetitions=1), workers=1)

        plain = result.write_csv(tmp_path / "plain.csv", record_runtime=False)
        timed = result.write_csv(tmp_path / "timed.csv", record_runtime=True)

        assert all(line.endswith(",") for line in plain.read_text().splitlines()[1:])
        assert not any(line.endswith(",") for line in timed.read_text().splitlines()[1:])

    def test_diverged_runs_are_flagged(self, tmp_path):
        """Diverged runs stay in the CSV and the sidecar."""
        base = tiny_config(L=2, M=1, K=1, activation="identity", sigma_u=1e150, sigma_v=1e150)
        result = run_sweep(_spec(base=base, measure_error=False), workers=1)

        assert all(r.diverged for r in result.records)
        assert all(r.laziness is None for r in result.records)
        rows = result.write_csv(tmp_path / "d.csv").read_text().splitlines()[1:]
        assert all(",true," in row for row in rows)
        assert len(result.sidecar()["diverged"]) == 4

    def test_under_resolved_points_are_excluded(self):
        """Points too large for the reference are measured but not fitted."""
        spec = _spec(values=(2, 4, 8), reference_depth=8, reference_width=4, fit="depth_width")

        result = run_sweep(spec, workers=1)

        assert [u["value"] for u in result.under_resolved] == [4, 8]
        assert all(not r.resolved for r in result.records if r.value > 2)
        assert result.fit is None
        assert result.fit_error is not None

    def test_fit(self):
        """Three resolved depths give a depth/width fit."""
        spec = _spec(values=(1, 2, 3), fit="depth_width", reference_depth=64)

        result = run_sweep(spec, workers=1)

        assert result.fit is not None
        assert result.fit.n_points == 3
        sidecar = result.sidecar()
        assert sidecar["fit"]["formula"] == "a/L + b/sqrt(L*M)"
        assert len(sidecar["summary"]) == 3

    def test_shared_references_are_reused(self, mocker):
        """Values sharing everything but L use one reference."""
        build = mocker.patch(
            "meanode.experiments.sweep.build_reference", wraps=build_reference
        )

        run_sweep(_spec(), workers=1)

        assert build.call_count == 1


class TestLogLogSlopes:
    """Tests for the empirical slopes reported next to the fit."""

    @staticmethod
    def _result(records):
        return SweepResult(_spec(), records)

    def test_slope_of_the_mean_per_value(self):
        """Means of 1/L and 3/L over two repetitions fall with slope -1."""
        records = [
            ExperimentRecord("L", v, r, 2, seed=0, error_rms=(1 + 2 * r) / v)
            for v in (2, 4, 8)
            for r in (0, 1)
        ]

        (entry,) = self._result(records).loglog_slopes()

        assert entry["slope"] == pytest.approx(-1.0)
        assert (entry["k"], entry["metric"], entry["n_points"]) == (2, "error_rms", 3)

    def test_excluded_points(self):
        """Under-resolved and diverged runs do not move the slope."""
        records = [ExperimentRecord("L", v, 0, 2, seed=0, error_rms=1 / v) for v in (2, 4, 8)]
        records.append(ExperimentRecord("L", 16, 0, 2, seed=0, error_rms=5.0, resolved=False))
        records.append(ExperimentRecord("L", 32, 0, 2, seed=0, diverged=True))

        (entry,) = self._result(records).loglog_slopes()

        assert entry["slope"] == pytest.approx(-1.0)
        assert entry["n_points"] == 3

    def test_single_value_has_no_slope(self):
        """One value cannot give a slope."""
        records = [ExperimentRecord("L", 2, 0, 2, seed=0, error_rms=0.5)]

        assert self._result(records).loglog_slopes()[0]["slope"] is None

    def test_reported_in_the_sidecar(self):
        """The sidecar holds one slope per comparison iteration."""
        result = run_sweep(_spec(k=(1, 2)), workers=1)

        slopes = result.sidecar()["loglog_slope"]

        assert [s["k"] for s in slopes] == [1, 2]
        assert all(isinstance(s["slope"], float) for s in slopes)


class TestConfigs:
    """Tests for axis application and balanced scaling."""

    def test_integer_axes(self):
        """Integer axes stay integers."""
        config = apply_axis(tiny_config(), "L", 8.0)

        assert config.L == 8
        assert isinstance(config.L, int)

    def test_float_axes(self):
        """Float axes are set as given."""
        assert apply_axis(tiny_config(), "alpha", 2.5).alpha == 2.5

    def test_balanced_scaling(self):
        """alpha moves into sigma_v with damped input rates."""
        config = balanced_config(tiny_config(D=16), 4.0)

        assert config.alpha == 1.0
        assert config.sigma_u == pytest.approx(4.0)
        assert config.sigma_v == pytest.approx(16.0)
        assert config.eta_u == pytest.approx(16.0 / 16.0)
        assert config.eta_v == pytest.approx(16.0)

    def test_balanced_small_alpha(self):
        """Below alpha = 1 the input rate is not damped."""
        config = balanced_config(tiny_config(D=4), 0.5, eta0=2.0)

        assert config.eta_u == pytest.approx(8.0)
        assert config.sigma_v == pytest.approx(0.5 * math.sqrt(4))

    def test_balanced_alpha_axis(self):
        """The balanced alpha axis keeps eta0 = eta_v / D."""
        base = tiny_config(D=4, eta=4.0)

        config = apply_axis(base, "alpha", 2.0, "balanced")

        assert config.sigma_v == pytest.approx(4.0)
        assert config.eta_u == pytest.approx(1.0)


class TestSweepSpec:
    """Validation of sweep documents."""

    def test_values_must_increase(self):
        """Grid values must increase."""
        with pytest.raises(ValidationError, match="increasing"):
            _spec(values=(4, 2))

    def test_integer_axis_values(self):
        """Integer axes need integer values."""
        with pytest.raises(ValidationError):
            _spec(values=(2.5,))

    def test_iterations_within_training(self):
        """Comparison iterations must lie in [0, K]."""
        with pytest.raises(ValidationError):
            _spec(k=(5,))

    def test_default_iteration_is_k(self):
        """Without k the sweep compares at K."""
        assert _spec().iterations == (2,)


def _alpha_means(D, metric, k, values=(1.0, 2.0, 4.0, 8.0), repetitions=10):
    """Per-alpha means of one metric under balanced scaling, L=100, M=4."""
    spec = SweepSpec(
        axis="alpha",
        values=values,
        base=default_config(D=D, L=100, M=4, K=k),
        repetitions=repetitions,
        scaling="balanced",
        measure_error=False,
    )
    return [row["mean"] for row in run_sweep(spec, workers=1).summary(metric)]


@pytest.mark.slow
class TestAlphaLaws:
    """Fluctuation and laziness laws in the output scale, at reduced depth."""

    def test_fluctuations_double_with_alpha(self):
        """Successive alpha doublings scale the fluctuation by 1.6 to 2.4."""
        fluct = _alpha_means(8, "fluct_std", 10)

        ratios = [b / a for a, b in zip(fluct, fluct[1:], strict=False)]

        assert all(1.6 <= r <= 2.4 for r in ratios), ratios

    def test_fluctuations_grow_like_sqrt_d(self):
        """At alpha = 1, D = 32 fluctuates twice as much as D = 8, within a factor 1.5."""
        (small,) = _alpha_means(8, "fluct_std", 10, values=(1.0,))
        (large,) = _alpha_means(32, "fluct_std", 10, values=(1.0,))

        assert 2.0 / 1.5 <= large / small <= 2.0 * 1.5

    def test_laziness_falls_like_inverse_alpha(self):
        """laziness(alpha = 8) / laziness(alpha = 1) lies in [1/16, 1/4]."""
        lazy_1, lazy_8 = _alpha_means(8, "laziness", 50, values=(1.0, 8.0), repetitions=2)

        assert 1 / 16 <= lazy_8 / lazy_1 <= 1 / 4
