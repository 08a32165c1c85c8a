"""Error, fluctuation and laziness measurements on trained runs."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from meanode.blocks import TwoLayerPerceptron
from meanode.errors import ConfigError, CouplingError, ShapeError
from meanode.limit.reference import ReferenceModel, query_limit_fields
from meanode.limit.tracers import TracerSet, tracer_distances
from meanode.resnet import TrainResult, forward_pass
from meanode.tensor import FloatArray, batch_rms


@dataclass(frozen=True)
class ForwardError:
    per_input: FloatArray
    max_layer: float

    @property
    def rms(self) -> float:
        return float(self.per_input.mean())


@dataclass(frozen=True)
class ParamError:
    max: float
    rms: float


def measure_forward_error(
    run: TrainResult, ref: ReferenceModel, k: int, inputs: ArrayLike | None = None
) -> ForwardError:
    """RMS distance between the run's and the reference's forward passes at k.

    ``per_input`` holds rms_norm of the output difference for every input;
    ``max_layer`` is the largest input-averaged error over the layers
    l = 0..L of the run, each matched to the nearest reference layer.
    Without ``inputs`` the training inputs are used.
    """
    net = run.net_at(k)
    if inputs is None:
        if not np.array_equal(run.dataset.inputs, ref.dataset.inputs):
            raise ConfigError("run and reference were trained on different datasets")
        fields = ref.fields_at(k)
        xs = run.dataset.inputs
    else:
        fields = query_limit_fields(ref, k, inputs)
        xs = fields.forward[0]
    trace = forward_pass(net, xs, run.config.alpha)
    if trace.states.shape[1:] != fields.forward.shape[1:]:
        raise ShapeError("run and reference states have different shapes")
    per_input = batch_rms(trace.outputs - fields.forward[-1])
    layer_errors = [
        float(batch_rms(trace.states[l] - fields.forward[fields.layer_at(l / net.L)]).mean())
        for l in range(net.L + 1)
    ]
    return ForwardError(per_input, max(layer_errors))


def measure_param_error(run: TrainResult, tracers: TracerSet, k: int | None = None) -> ParamError:
    """max and RMS over units of ||Z_k^{j,l} - z_k^{(j,l)}||_2."""
    if tracers.seed != run.config.seed:
        raise CouplingError(
            f"tracers were drawn from seed {tracers.seed}, the run from {run.config.seed}"
        )
    if k is None:
        k = tracers.iteration
    elif k != tracers.iteration:
        raise ConfigError(f"tracers are at iteration {tracers.iteration}, not {k}")
    distances = tracer_distances(run.net_at(k), tracers)
    return ParamError(float(distances.max()), float(np.sqrt(np.mean(distances**2))))


def output_fluctuation(outputs: Sequence[FloatArray] | FloatArray) -> float:
    """Per-entry std across repetitions, averaged over entries and inputs.

    ``outputs`` stacks one (n, D, T) output batch per repetition.
    """
    stacked = np.asarray(outputs, dtype=np.float64)
    if stacked.ndim != 4:
        raise ShapeError(f"expected (R, n, D, T) outputs, got {stacked.shape}")
    if stacked.shape[0] < 2:
        raise ConfigError("fluctuations need at least 2 repetitions")
    return float(stacked.std(axis=0, ddof=1).mean())


def measure_fluctuation(runs: Sequence[TrainResult], k: int) -> float:
    """Fluctuation of the outputs on the training inputs at iteration k."""
    if len(runs) < 2:
        raise ConfigError("fluctuations need at least 2 repetitions")
    outputs = [
        forward_pass(run.net_at(k), run.dataset.inputs, run.config.alpha).outputs for run in runs
    ]
    return output_fluctuation(outputs)


def _input_weights(run: TrainResult, k: int) -> tuple[FloatArray, FloatArray]:
    net = run.net_at(k)
    if not isinstance(net.kind, TwoLayerPerceptron):
        raise ConfigError(f"laziness is measured on mlp blocks, not {net.kind.tag}")
    return run.net_at(0).params[..., : net.D], net.params[..., : net.D]


def measure_laziness(run: TrainResult, k: int) -> float:
    """||u_k - u_0||_2 per unit, RMS over all units."""
    u0, uk = _input_weights(run, k)
    return float(np.sqrt(np.mean(np.sum((uk - u0) ** 2, axis=-1))))


def measure_semicomplete_gap(run: TrainResult, baseline: TrainResult, k: int) -> float:
    """max over layers of sqrt(mean_j ||z_j - z0_j||^2 / D) between two runs.

    ``baseline`` is the sigma_v = 0 run sharing the input-weight draws.
    """
    a, b = run.net_at(k), baseline.net_at(k)
    if a.params.shape != b.params.shape:
        raise ShapeError(f"parameter shapes {a.params.shape} and {b.params.shape} differ")
    sq = np.sum((a.params - b.params) ** 2, axis=-1) / a.D
    return float(math.sqrt(sq.mean(axis=1).max()))
