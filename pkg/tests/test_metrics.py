"""Tests for error, fluctuation and laziness measurements."""

import math

import numpy as np
import pytest

from meanode.errors import ConfigError
from meanode.experiments.metrics import (
    measure_fluctuation,
    measure_forward_error,
    measure_laziness,
    measure_param_error,
    measure_semicomplete_gap,
    output_fluctuation,
)
from meanode.limit.reference import build_reference, reference_from_run
from meanode.limit.tracers import init_tracers
from meanode.resnet import make_dataset, train
from tests.conftest import tiny_config


class TestForwardError:
    """Tests for measure_forward_error."""

    def test_run_against_itself_is_zero(self, config, dataset):
        """A run compared to its own fields has zero error."""
        run = train(config, dataset)
        ref = reference_from_run(run)

        err = measure_forward_error(run, ref, config.K)

        np.testing.assert_array_equal(err.per_input, 0.0)
        assert err.rms == 0.0
        assert err.max_layer == 0.0

    def test_positive_against_a_reference(self, config, dataset):
        """A finite net differs from a larger reference."""
        run = train(config, dataset)
        ref = build_reference(config, dataset, 16, 8)

        err = measure_forward_error(run, ref, config.K)

        assert err.per_input.shape == (config.n,)
        assert err.rms > 0.0
        assert err.max_layer > 0.0

    def test_different_datasets(self, config, dataset):
        """Run and reference must share the training set."""
        run = train(config, dataset)
        ref = reference_from_run(train(config, make_dataset(config, data_seed=99)))

        with pytest.raises(ConfigError, match="datasets"):
            measure_forward_error(run, ref, config.K)

    def test_explicit_inputs(self, config, dataset):
        """Explicit inputs are measured through the reference's parameters."""
        run = train(config, dataset)
        ref = reference_from_run(run)

        err = measure_forward_error(run, ref, 0, inputs=dataset.inputs[:2])

        assert err.per_input.shape == (2,)
        assert err.rms == 0.0


class TestFluctuation:
    """Tests for output fluctuations across repetitions."""

    def test_two_repetitions(self):
        """With two draws the per-entry std is |a - b| / sqrt(2)."""
        a = np.zeros((1, 2, 1))
        b = np.array([[[1.0], [3.0]]])

        assert output_fluctuation([a, b]) == pytest.approx((1.0 + 3.0) / 2 / math.sqrt(2))

    def test_needs_two_repetitions(self):
        """One repetition has no spread."""
        with pytest.raises(ConfigError):
            output_fluctuation([np.zeros((1, 2, 1))])

    def test_identical_runs(self, config, dataset):
        """Identical runs do not fluctuate."""
        run = train(config, dataset)

        assert measure_fluctuation([run, run], config.K) == 0.0

    def test_independent_runs(self, config, dataset):
        """Different seeds give different outputs."""
        runs = [train(config.with_updates(seed=s), dataset) for s in (1, 2, 3)]

        assert measure_fluctuation(runs, config.K) > 0.0


class TestLaziness:
    """Tests for measure_laziness and the semi-complete gap."""

    def test_zero_at_initialization(self, config, dataset):
        """u has not moved at k = 0 and has by K."""
        run = train(config, dataset)

        assert measure_laziness(run, 0) == 0.0
        assert measure_laziness(run, config.K) > 0.0

    def test_rms_over_units_of_the_unit_norm(self, config, dataset):
        """sqrt(mean_j ||u_k^j - u_0^j||^2) over the L*M input weights."""
        run = train(config, dataset)
        delta = run.net_at(config.K).params[..., : config.D] - run.net_at(0).params[..., : config.D]

        expected = math.sqrt(np.mean([np.linalg.norm(d) ** 2 for d in delta.reshape(-1, config.D)]))

        assert measure_laziness(run, config.K) == pytest.approx(expected, rel=1e-12)

    def test_frozen_input_weights(self, dataset):
        """eta_u = 0 keeps u fixed even though v moves."""
        run = train(tiny_config(eta_u=0.0, eta_v=0.5), dataset)

        assert measure_laziness(run, 3) == 0.0
        assert not np.array_equal(run.final.params, run.net_at(0).params)

    def test_mlp_only(self, dataset):
        """Laziness is defined on perceptron input weights only."""
        run = train(tiny_config(block="matrix_pre"), dataset)

        with pytest.raises(ConfigError):
            measure_laziness(run, 3)

    def test_gap_to_itself(self, config, dataset):
        """A run has no gap to itself."""
        run = train(config, dataset)

        assert measure_semicomplete_gap(run, run, config.K) == 0.0

    def test_gap_to_zero_output_scale(self, config, dataset):
        """At init the gap is the size of the output weights."""
        run = train(config, dataset)
        baseline = train(config.with_updates(sigma_v=0.0), dataset)

        assert measure_semicomplete_gap(run, baseline, 0) > 0.0


class TestParamError:
    """Tests for the tracer parameter error."""

    def test_iteration_mismatch(self, config, dataset):
        """Tracers must sit at the same iteration as the run."""
        run = train(config, dataset)

        with pytest.raises(ConfigError):
            measure_param_error(run, init_tracers(config), 3)
