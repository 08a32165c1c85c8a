"""Tests for the reference model, tracer particles and the lazy model."""

import numpy as np
import pytest

from meanode.config import lazy_config
from meanode.errors import ConfigError, CouplingError
from meanode.experiments.fitting import loglog_slope
from meanode.experiments.metrics import measure_forward_error, measure_param_error
from meanode.experiments.studies import run_lazy
from meanode.limit import (
    build_reference,
    evolve_tracers,
    init_tracers,
    lazy_forward,
    query_limit_fields,
    run_tracers,
    train_lazy,
)
from meanode.limit.lazy import LazyParams, lazy_backward, lazy_gradients, lazy_init, lazy_step
from meanode.limit.reference import LimitFields, reference_config
from meanode.limit.tracers import tracer_distances
from meanode.resnet import init_net, make_dataset, slot_rates, train
from tests.conftest import TANGENT_CASES, central_difference, tiny_config


class TestReference:
    """Tests for the large-ResNet surrogate of the limit model."""

    def test_zero_output_scale_is_identity(self):
        """sigma_v = 0 and K = 0: the limit flow is the identity map."""
        config = tiny_config(sigma_v=0.0, K=0)
        data = make_dataset(config)

        ref = build_reference(config, data, 8, 8)

        fields = ref.fields_at(0)
        np.testing.assert_array_equal(fields.forward[-1], data.inputs)
        assert fields.forward.shape == (9, 3, 4, 1)
        assert fields.backward is not None

    def test_reference_has_its_own_seed(self):
        """The reference keeps the rates but draws from another seed."""
        config = tiny_config()

        ref_config = reference_config(config, 16, 8)

        assert (ref_config.L, ref_config.M) == (16, 8)
        assert ref_config.seed != config.seed
        assert ref_config.eta_u == config.eta_u

    def test_too_small_reference(self):
        """Compared nets must be at least 16 times smaller than the reference."""
        config = tiny_config(L=2, M=1)

        with pytest.raises(ConfigError):
            build_reference(config, None, 4, 4, compared=[(2, 1)])

    def test_missing_iteration(self):
        """Fields are only kept at the requested iterations."""
        config = tiny_config(K=2)
        ref = build_reference(config, None, 8, 4, field_iterations=(0,))

        with pytest.raises(ConfigError):
            ref.fields_at(2)

    def test_query_matches_stored_fields(self):
        """Querying the stored inputs reproduces the stored fields."""
        config = tiny_config(K=1)
        data = make_dataset(config)
        ref = build_reference(config, data, 8, 4)

        w = data.loss_grad(ref.fields_at(1).forward[-1])

        fields = query_limit_fields(ref, 1, data.inputs, w)

        np.testing.assert_allclose(fields.forward, ref.fields_at(1).forward)
        np.testing.assert_allclose(fields.backward, ref.fields_at(1).backward)

    def test_query_needs_parameters(self):
        """New inputs need the reference's parameters."""
        config = tiny_config(K=2)
        data = make_dataset(config)
        ref = build_reference(config, data, 8, 4).without_parameters()

        assert query_limit_fields(ref, 2) is ref.fields_at(2)
        with pytest.raises(ConfigError):
            query_limit_fields(ref, 2, data.inputs)

    def test_layer_at(self):
        """Depth fractions map to the nearest reference layer."""
        fields = LimitFields(np.zeros((9, 1, 2, 1)), None)

        assert fields.layer_at(0.0) == 0
        assert fields.layer_at(0.5) == 4
        assert fields.layer_at(1.0) == 8
        with pytest.raises(ConfigError):
            fields.layer_at(1.5)


class TestTracers:
    """Tests for tracer particles driven by the reference's fields."""

    @pytest.fixture
    def setup(self):
        config = tiny_config(L=2, M=1, K=3)
        data = make_dataset(config)
        ref = build_reference(config, data, 8, 8, field_iterations=range(config.K))
        return config, data, ref

    def test_start_at_the_finite_net(self, setup):
        """Tracers start at the finite net's initialization."""
        config, data, ref = setup

        run = train(config, data)
        tracers = init_tracers(config)

        assert measure_param_error(run, tracers, 0).max == 0.0

    def test_zero_rates_stay_put(self, setup):
        """Zero rates keep every tracer in place."""
        config, data, ref = setup
        frozen = config.with_updates(eta=0.0)

        history = run_tracers(frozen, ref, data)

        np.testing.assert_array_equal(history[3].params, history[0].params)
        assert sorted(history) == [0, 1, 2, 3]

    def test_one_step(self, setup):
        """z <- z - eta/(alpha n) sum_i D2 phi(h(s, x_i), z)^T b(s, x_i)."""
        config, data, ref = setup
        tracers = init_tracers(config)
        fields = ref.fields_at(0)
        rates = slot_rates(tracers.kind, config.D, config)

        stepped = evolve_tracers(tracers, ref, data, config)

        for l in range(config.L):
            idx = fields.layer_at(l / config.L)
            grad = tracers.kind.vjp_params(
                fields.forward[idx], tracers.params[l], fields.backward[idx]
            ).sum(axis=0)
            np.testing.assert_allclose(
                stepped.params[l], tracers.params[l] - rates * grad / (config.alpha * data.n)
            )
        assert stepped.iteration == 1

    def test_distances_shape(self, setup):
        """One distance per layer and unit."""
        config, data, ref = setup

        history = run_tracers(config, ref, data)
        run = train(config.with_updates(snapshots=(0, 1, 2, 3)), data)

        assert tracer_distances(run.net_at(3), history[3]).shape == (2, 1)
        assert measure_param_error(run, history[3]).max > 0.0

    def test_coupling_requires_same_seed(self, setup):
        """Tracers from another seed cannot be coupled."""
        config, data, _ = setup
        run = train(config, data)
        other = init_tracers(config.with_updates(seed=99))

        with pytest.raises(CouplingError):
            measure_param_error(run, other, 0)


class TestLazyModel:
    """Tests for the tangent model linearized at initialization."""

    def test_zero_tangent_is_identity(self, config, dataset):
        """zeta = 0 is the identity map."""
        params = lazy_init(config)

        trace = lazy_forward(params, dataset.inputs)

        np.testing.assert_array_equal(trace.outputs, dataset.inputs)

    def test_shares_initialization_with_finite_net(self, config):
        """The tangent model linearizes around the finite net's Z0."""
        np.testing.assert_array_equal(lazy_init(config).base.params, init_net(config).params)

    def test_uncentered_blocks_rejected(self):
        """relu after the matrix is not odd, so E[phi(x, Z0)] != 0."""
        with pytest.raises(ConfigError):
            lazy_init(tiny_config(block="matrix_post", activation="relu"))

    def test_relu_perceptron_is_accepted(self, dataset):
        """Centered output weights make the 2LP centered for any activation."""
        result = train_lazy(tiny_config(activation="relu", K=20, eta=0.1), dataset)

        assert result.losses[-1] < result.losses[0]

    def test_attention_rejected(self):
        """Attention has no tangent model."""
        config = tiny_config(block="attention", d_k=2)

        with pytest.raises(ConfigError):
            train_lazy(config)

    @pytest.mark.parametrize("case", TANGENT_CASES, ids=lambda c: f"{c[0]}-{c[1]}")
    def test_gradient(self, rng, case):
        """Tangent-model gradients against finite differences."""
        block, activation, _, _ = case
        config = tiny_config(block=block, activation=activation, n=2)
        data = make_dataset(config)
        base = lazy_init(config)
        params = base.replace(rng.standard_normal(base.zeta.shape))

        numeric = central_difference(
            lambda zeta: data.loss(lazy_forward(params.replace(zeta), data.inputs).outputs),
            params.zeta,
        )

        np.testing.assert_allclose(lazy_gradients(params, data), numeric, rtol=1e-5, atol=1e-8)

    def test_backward_is_exact_adjoint(self, config, dataset, rng):
        """b^0 is the input gradient of <w, h^L> for the tangent recursion."""
        base = lazy_init(config)
        params = base.replace(rng.standard_normal(base.zeta.shape))
        x = dataset.inputs[:1]
        w = rng.standard_normal(x.shape)

        b0 = lazy_backward(params, lazy_forward(params, x), w).adjoints[0]
        numeric = central_difference(
            lambda xx: float(np.sum(w * lazy_forward(params, xx).outputs)), x
        )

        np.testing.assert_allclose(b0, numeric, rtol=1e-5, atol=1e-8)

    def test_step_rule(self, config, dataset):
        """zeta <- zeta - L*M*eta*grad."""
        params = lazy_init(config)
        rates = slot_rates(params.base.kind, config.D, config)

        stepped = lazy_step(params, dataset, config)

        np.testing.assert_allclose(
            stepped.zeta, -config.L * config.M * rates * lazy_gradients(params, dataset)
        )

    def test_training_reduces_loss(self, dataset):
        """GD on the tangent model lowers the loss."""
        result = train_lazy(tiny_config(K=20, eta=0.1), dataset)

        assert result.losses[-1] < result.losses[0]
        assert np.all(result.params_at(0).zeta == 0.0)
        with pytest.raises(ConfigError):
            result.params_at(5)

    def test_frozen_rates(self, dataset):
        """Zero rates keep zeta at zero."""
        result = train_lazy(tiny_config(eta=0.0), dataset)

        np.testing.assert_array_equal(result.zetas[3], 0.0)
        assert isinstance(result.params_at(3), LazyParams)


@pytest.mark.slow
class TestConvergenceRates:
    """Finite nets approach the limit at the predicted rates."""

    def test_deterministic_init_converges_like_one_over_depth(self):
        """With zero output weights every unit follows the same path: error ~ 1/L."""
        depths = (8, 16, 32, 64)
        config = tiny_config(block="matrix_pre", sigma_v=0.0, M=1, K=10)
        data = make_dataset(config)
        ref = build_reference(config, data, 1024, 1, compared=[(L, 1) for L in depths])

        errors = [
            measure_forward_error(train(config.with_updates(L=L), data), ref, config.K).rms
            for L in depths
        ]

        assert -1.1 <= loglog_slope(depths, errors) <= -0.9

    def test_lazy_displacement_follows_inverse_alpha(self):
        """alpha * ||Z_K - Z_0|| stays within a factor 2 across alpha in {2, 4, 8, 16}."""
        result = run_lazy(lazy_config(K=20), repetitions=2)

        by_alpha: dict[float, list[float]] = {}
        columns = zip(result.column("alpha"), result.column("displacement_rms"), strict=True)
        for alpha, d in columns:
            by_alpha.setdefault(alpha, []).append(alpha * d)
        scaled = [float(np.mean(v)) for v in by_alpha.values()]

        assert sorted(by_alpha) == [2.0, 4.0, 8.0, 16.0]
        assert max(scaled) / min(scaled) <= 2.0
