"""Tracer particles: finite-net units evolved under the reference's fields.

Tracer (j, l) starts from the finite net's initial unit (j, l), drawn from the
same seed path, and follows

    z_{k+1} = z_k - (eta / (alpha * n)) * sum_i D2 phi(h(s, x_i), z_k)^T b(s, x_i)

with s = (l-1)/L and (h, b) read from the reference at iteration k. Tracers
never feed back into the reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from meanode.blocks import Block
from meanode.config import TrainConfig
from meanode.errors import ConfigError, ShapeError
from meanode.limit.reference import ReferenceModel
from meanode.resnet import Dataset, NetParams, init_net, slot_rates
from meanode.tensor import FloatArray, ensure_finite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TracerSet:
    kind: Block
    D: int
    seed: int
    iteration: int
    params: FloatArray  # (L, M, p), laid out like the finite net

    @property
    def L(self) -> int:
        return self.params.shape[0]

    @property
    def M(self) -> int:
        return self.params.shape[1]

    def as_net(self) -> NetParams:
        return NetParams(self.kind, self.D, self.params)


def init_tracers(config: TrainConfig) -> TracerSet:
    net = init_net(config)
    return TracerSet(net.kind, net.D, config.seed, 0, net.params.copy())


def evolve_tracers(
    tracers: TracerSet, ref: ReferenceModel, dataset: Dataset, config: TrainConfig
) -> TracerSet:
    """Advance every tracer by one GD step of the limit dynamics."""
    if tracers.params.shape[:2] != (config.L, config.M) or tracers.D != dataset.D:
        raise ShapeError("tracers do not match the compared configuration")
    fields = ref.fields_at(tracers.iteration)
    if fields.backward is None:
        raise ConfigError(f"reference has no adjoint fields at iteration {tracers.iteration}")
    kind = tracers.kind
    step = slot_rates(kind, tracers.D, config) / (config.alpha * dataset.n)
    params = tracers.params.copy()
    for l in range(tracers.L):
        idx = fields.layer_at(l / tracers.L)
        grads = kind.vjp_params(fields.forward[idx], params[l], fields.backward[idx])
        params[l] -= step * grads.sum(axis=0)
    ensure_finite(params, "tracer parameters", iteration=tracers.iteration)
    return TracerSet(kind, tracers.D, tracers.seed, tracers.iteration + 1, params)


def run_tracers(
    config: TrainConfig, ref: ReferenceModel, dataset: Dataset, K: int | None = None
) -> dict[int, TracerSet]:
    """Tracer sets at iterations 0..K (default: config.K)."""
    steps = config.K if K is None else K
    tracers = init_tracers(config)
    history = {0: tracers}
    for _ in range(steps):
        tracers = evolve_tracers(tracers, ref, dataset, config)
        history[tracers.iteration] = tracers
    logger.debug("Evolved %s tracers for %s steps", config.L * config.M, steps)
    return history


def tracer_distances(net: NetParams, tracers: TracerSet) -> FloatArray:
    """||Z^{j,l} - z^{(j,l)}||_2 for every unit, shape (L, M)."""
    if net.params.shape != tracers.params.shape:
        raise ShapeError(f"net {net.params.shape} and tracers {tracers.params.shape} differ")
    return np.linalg.norm(net.params - tracers.params, axis=-1)
