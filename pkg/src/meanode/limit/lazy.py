"""The lazy (tangent) model: blocks linearized around their initialization.

With frozen units Z0 and tangent displacements zeta, the forward recursion is

    h^l = h^{l-1} + (1 / (L*M)) * sum_j D2 phi(h^{l-1}, Z0^{j,l}) zeta^{j,l}

starting from zeta = 0, i.e. the identity map. The backward pass below is the
exact adjoint of this discrete recursion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from meanode.config import TrainConfig
from meanode.errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from meanode.resnet import (
    BackwardTrace,
    Dataset,
    ForwardTrace,
    NetParams,
    init_net,
    make_dataset,
    slot_rates,
)
from meanode.tensor import FloatArray, as_batch, ensure_finite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LazyParams:
    base: NetParams
    zeta: FloatArray

    def __post_init__(self) -> None:
        if self.zeta.shape != self.base.params.shape:
            raise ShapeError(
                f"tangent shape {self.zeta.shape} != parameter shape {self.base.params.shape}"
            )
        if not self.base.kind.centered:
            raise ConfigError(
                f"{self.base.kind.tag} blocks with this activation are not centered at init; "
                "the tangent model needs E[phi(x, Z0)] = E[D1 phi(x, Z0)] = 0"
            )

    @property
    def scale(self) -> float:
        return 1.0 / (self.base.L * self.base.M)

    def replace(self, zeta: FloatArray) -> LazyParams:
        return LazyParams(self.base, zeta)


def lazy_init(config: TrainConfig) -> LazyParams:
    """Frozen Z0 drawn exactly as the finite net's, with zeta = 0."""
    base = init_net(config)
    return LazyParams(base, np.zeros_like(base.params))


def lazy_forward(params: LazyParams, xs: ArrayLike) -> ForwardTrace:
    h = as_batch(xs)
    base = params.base
    if h.shape[1] != base.D:
        raise ShapeError(f"input dimension {h.shape[1]} does not match D = {base.D}")
    states = np.empty((base.L + 1, *h.shape))
    states[0] = h
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(base.L):
            h = h + params.scale * base.kind.jvp_params(h, base.params[l], params.zeta[l])
            ensure_finite(h, layer=l + 1)
            states[l + 1] = h
    return ForwardTrace(states)


def lazy_backward(params: LazyParams, trace: ForwardTrace, w: ArrayLike) -> BackwardTrace:
    base = params.base
    b = as_batch(w)
    if b.shape != trace.inputs.shape:
        raise ShapeError(f"cotangent shape {b.shape} != state shape {trace.inputs.shape}")
    adjoints = np.empty_like(trace.states)
    adjoints[base.L] = b
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(base.L, 0, -1):
            b = b + params.scale * base.kind.tangent_vjp_state(
                trace.states[l - 1], base.params[l - 1], params.zeta[l - 1], b
            )
            ensure_finite(b, "adjoint", layer=l - 1)
            adjoints[l - 1] = b
    return BackwardTrace(adjoints)


def lazy_gradients(
    params: LazyParams, dataset: Dataset, trace: ForwardTrace | None = None
) -> FloatArray:
    """Gradient of the lazy empirical risk in zeta, shape (L, M, p)."""
    if trace is None:
        trace = lazy_forward(params, dataset.inputs)
    backward = lazy_backward(params, trace, dataset.loss_grad(trace.outputs))
    base = params.base
    grad = np.empty_like(params.zeta)
    for l in range(base.L):
        per_sample = base.kind.vjp_params(trace.states[l], base.params[l], backward.adjoints[l + 1])
        grad[l] = params.scale * per_sample.mean(axis=0)
    return grad


def lazy_step(
    params: LazyParams, dataset: Dataset, config: TrainConfig, trace: ForwardTrace | None = None
) -> LazyParams:
    """zeta <- zeta - L*M*eta * grad, i.e. a step of eta/n on the summed maps."""
    base = params.base
    rates = slot_rates(base.kind, base.D, config)
    grad = lazy_gradients(params, dataset, trace)
    with np.errstate(over="ignore", invalid="ignore"):
        zeta = params.zeta - base.L * base.M * rates * grad
    ensure_finite(zeta, "tangent parameters")
    return params.replace(zeta)


@dataclass
class LazyResult:
    config: TrainConfig
    dataset: Dataset
    base: NetParams
    losses: FloatArray
    zetas: dict[int, FloatArray] = field(default_factory=dict)

    def params_at(self, k: int) -> LazyParams:
        try:
            return LazyParams(self.base, self.zetas[k])
        except KeyError:
            raise ConfigError(f"tangent parameters were not recorded at iteration {k}") from None


def train_lazy(config: TrainConfig, dataset: Dataset | None = None) -> LazyResult:
    """GD on the tangent displacement, recording zeta at the config schedule."""
    if dataset is None:
        dataset = make_dataset(config)
    params = lazy_init(config)
    schedule = set(config.schedule)
    losses = np.empty(config.K + 1)
    zetas: dict[int, FloatArray] = {}
    k = 0
    try:
        for k in range(config.K + 1):
            trace = lazy_forward(params, dataset.inputs)
            losses[k] = dataset.loss(trace.outputs)
            ensure_finite(losses[k : k + 1], "loss")
            if k in schedule:
                zetas[k] = params.zeta
            if k < config.K:
                params = lazy_step(params, dataset, config, trace)
    except NonFiniteError as e:
        logger.warning("Lazy training diverged at iteration %s: %s", k, e)
        raise DivergenceError("lazy training diverged", iteration=k, layer=e.layer) from e
    return LazyResult(config, dataset, params.base, losses, zetas)
