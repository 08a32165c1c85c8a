"""The finite ResNet: forward and backward recursions, gradients and GD.

A network with L layers of M units maps an input h^0 = x to

    h^l = h^{l-1} + (alpha / (L*M)) * sum_j phi(h^{l-1}, z^{j,l}),  l = 1..L

and its adjoint b^L = w, b^{l-1} = b^l + (alpha / (L*M)) * sum_j D1 phi^T b^l.
Layer l is stored at index l-1 of the (L, M, p) parameter array.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from meanode.blocks import Block, block_from_config
from meanode.config import LossName, TrainConfig
from meanode.errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from meanode.tensor import FloatArray, SeedPath, SeedTag, as_batch, ensure_finite, gaussian_sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetParams:
    """Parameters of every unit of a network, shape (L, M, p)."""

    kind: Block
    D: int
    params: FloatArray

    def __post_init__(self) -> None:
        if self.params.ndim != 3 or min(self.params.shape) < 1:
            raise ShapeError(f"network parameters must be (L, M, p), got {self.params.shape}")
        p = self.kind.num_params(self.D)
        if self.params.shape[2] != p:
            raise ShapeError(f"{self.kind.tag} units need p = {p}, got {self.params.shape[2]}")
        ensure_finite(self.params, "parameters")

    @property
    def L(self) -> int:
        return self.params.shape[0]

    @property
    def M(self) -> int:
        return self.params.shape[1]

    @property
    def p(self) -> int:
        return self.params.shape[2]

    def replace(self, params: FloatArray) -> NetParams:
        return NetParams(self.kind, self.D, params)


@dataclass(frozen=True)
class ForwardTrace:
    """States h^0..h^L for a batch of inputs, shape (L+1, n, D, T)."""

    states: FloatArray

    @property
    def inputs(self) -> FloatArray:
        return self.states[0]

    @property
    def outputs(self) -> FloatArray:
        return self.states[-1]


@dataclass(frozen=True)
class BackwardTrace:
    """Adjoints b^0..b^L, shape (L+1, n, D, T); b^L is the output cotangent."""

    adjoints: FloatArray


@dataclass(frozen=True)
class UnitGradients:
    """Per-sample gradients of loss_i in every unit, shape (n, L, M, p).

    ``raw`` is the true gradient; ``rescaled`` multiplies it by L*M/alpha,
    giving the per-sample maps D2 phi(h^{l-1}, z)^T b^l.
    """

    raw: FloatArray
    rescaled: FloatArray


@dataclass(frozen=True)
class Dataset:
    inputs: FloatArray
    targets: FloatArray
    loss_kind: LossName = "mse"

    def __post_init__(self) -> None:
        if self.inputs.ndim != 3 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be (n, D, T) with n >= 1, got {self.inputs.shape}")
        if self.targets.shape != self.inputs.shape:
            raise ShapeError(
                f"targets {self.targets.shape} do not match inputs {self.inputs.shape}"
            )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    def _scale(self) -> float:
        return 1.0 / self.D if self.loss_kind == "mse" else 1.0

    def losses(self, outputs: FloatArray) -> FloatArray:
        """loss_i(h_i) for every sample."""
        diff = outputs - self.targets
        return 0.5 * self._scale() * np.sum(diff**2, axis=(1, 2))

    def loss(self, outputs: FloatArray) -> float:
        """The empirical risk: mean of loss_i over the samples."""
        return float(self.losses(outputs).mean())

    def loss_grad(self, outputs: FloatArray) -> FloatArray:
        """grad loss_i(h_i), one cotangent per sample."""
        return self._scale() * (outputs - self.targets)


def make_dataset(config: TrainConfig, data_seed: int | None = None) -> Dataset:
    """n input/output pairs with iid N(0, 1) entries, independent of each other."""
    root = SeedPath(config.data_seed if data_seed is None else data_seed)
    size = config.D * config.tokens
    shape = (config.D, config.tokens)
    inputs = np.stack(
        [gaussian_sample(root.child(SeedTag.INPUT, i), size, 1.0).reshape(shape)
         for i in range(config.n)]
    )  # fmt: skip
    targets = np.stack(
        [gaussian_sample(root.child(SeedTag.TARGET, i), size, 1.0).reshape(shape)
         for i in range(config.n)]
    )  # fmt: skip
    return Dataset(inputs, targets, config.loss)


def init_net(config: TrainConfig, seed: int | None = None) -> NetParams:
    """Draw every unit from its own seed path (layer l, slot s).

    With ``tie_first_unit`` the first unit of every layer is one shared draw.
    """
    kind = block_from_config(config)
    root = SeedPath(config.seed if seed is None else seed)
    layers = [
        kind.init(root.child(SeedTag.LAYER, l), config.M, config.D, config.sigma_u, config.sigma_v)
        for l in range(config.L)
    ]
    params = np.stack(layers)
    if config.tie_first_unit:
        tied = kind.init(root.child(SeedTag.UNIT, 0), 1, config.D, config.sigma_u, config.sigma_v)
        params[:, 0, :] = tied[0]
    return NetParams(kind, config.D, params)


def residual_scale(alpha: float, net: NetParams) -> float:
    return alpha / (net.L * net.M)


def forward_pass(net: NetParams, xs: ArrayLike, alpha: float) -> ForwardTrace:
    """Run the forward recursion on a batch (or a single state)."""
    h = as_batch(xs)
    if h.shape[1] != net.D:
        raise ShapeError(f"input dimension {h.shape[1]} does not match D = {net.D}")
    scale = residual_scale(alpha, net)
    states = np.empty((net.L + 1, *h.shape))
    states[0] = h
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(net.L):
            h = h + scale * net.kind.layer_apply(h, net.params[l])
            ensure_finite(h, layer=l + 1)
            states[l + 1] = h
    return ForwardTrace(states)


def backward_pass(
    net: NetParams, trace: ForwardTrace, w: ArrayLike, alpha: float
) -> BackwardTrace:
    """Propagate the output cotangent w back to the input."""
    if trace.states.shape[0] != net.L + 1:
        raise ShapeError(f"trace has {trace.states.shape[0] - 1} layers, net has {net.L}")
    b = as_batch(w)
    if b.shape != trace.inputs.shape:
        raise ShapeError(f"cotangent shape {b.shape} != state shape {trace.inputs.shape}")
    scale = residual_scale(alpha, net)
    adjoints = np.empty_like(trace.states)
    adjoints[net.L] = b
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(net.L, 0, -1):
            b = b + scale * net.kind.vjp_state(trace.states[l - 1], net.params[l - 1], b)
            ensure_finite(b, "adjoint", layer=l - 1)
            adjoints[l - 1] = b
    return BackwardTrace(adjoints)


def unit_gradients(
    net: NetParams, trace: ForwardTrace, backward: BackwardTrace, alpha: float
) -> UnitGradients:
    """Per-sample, per-unit gradients from matching forward/backward passes."""
    if backward.adjoints.shape != trace.states.shape or trace.states.shape[0] != net.L + 1:
        raise ShapeError("forward and backward traces do not match the network")
    rescaled = np.stack(
        [
            net.kind.vjp_params(trace.states[l], net.params[l], backward.adjoints[l + 1])
            for l in range(net.L)
        ],
        axis=1,
    )
    return UnitGradients(raw=residual_scale(alpha, net) * rescaled, rescaled=rescaled)


def risk_gradient(
    net: NetParams, dataset: Dataset, alpha: float, trace: ForwardTrace | None = None
) -> FloatArray:
    """Gradient of the empirical risk in every unit, shape (L, M, p)."""
    if trace is None:
        trace = forward_pass(net, dataset.inputs, alpha)
    backward = backward_pass(net, trace, dataset.loss_grad(trace.outputs), alpha)
    scale = residual_scale(alpha, net)
    grad = np.empty_like(net.params)
    for l in range(net.L):
        per_sample = net.kind.vjp_params(trace.states[l], net.params[l], backward.adjoints[l + 1])
        grad[l] = scale * per_sample.mean(axis=0)
    return grad


def slot_rates(kind: Block, D: int, config: TrainConfig) -> FloatArray:
    """eta_u on input-role coordinates, eta_v on output-role ones, shape (p,)."""
    return config.eta_u * kind.role_mask(D, "input") + config.eta_v * kind.role_mask(D, "output")


def step_sizes(net: NetParams, config: TrainConfig) -> FloatArray:
    """L*M*eta/alpha^2 on every parameter coordinate."""
    return net.L * net.M * slot_rates(net.kind, net.D, config) / config.alpha**2


def _check_compatible(net: NetParams, config: TrainConfig, dataset: Dataset) -> None:
    if (net.L, net.M, net.D) != (config.L, config.M, config.D):
        raise ConfigError(
            f"network (L={net.L}, M={net.M}, D={net.D}) does not match the config "
            f"(L={config.L}, M={config.M}, D={config.D})"
        )
    if dataset.D != net.D:
        raise ConfigError(f"dataset dimension {dataset.D} does not match D = {net.D}")


def gd_step(
    net: NetParams, dataset: Dataset, config: TrainConfig, trace: ForwardTrace | None = None
) -> NetParams:
    """One full-batch GD step."""
    _check_compatible(net, config, dataset)
    grad = risk_gradient(net, dataset, config.alpha, trace)
    with np.errstate(over="ignore", invalid="ignore"):
        params = net.params - step_sizes(net, config) * grad
    ensure_finite(params, "parameters")
    return net.replace(params)


Observer = Callable[[int, NetParams, ForwardTrace], None]


@dataclass
class TrainResult:
    config: TrainConfig
    dataset: Dataset
    losses: FloatArray
    snapshots: dict[int, NetParams] = field(default_factory=dict)

    def net_at(self, k: int) -> NetParams:
        try:
            return self.snapshots[k]
        except KeyError:
            raise ConfigError(
                f"iteration {k} was not recorded (snapshots: {sorted(self.snapshots)})"
            ) from None

    @property
    def final(self) -> NetParams:
        return self.snapshots[self.config.K]


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    observer: Observer | None = None,
    net: NetParams | None = None,
) -> TrainResult:
    """Run K GD steps from the seeded initialization.

    Parameters are recorded at ``config.schedule``; the risk is logged at
    every iteration including the initialization. ``observer`` sees every
    iterate together with its forward trace on the training inputs.
    """
    if dataset is None:
        dataset = make_dataset(config)
    if net is None:
        net = init_net(config)
    _check_compatible(net, config, dataset)
    schedule = set(config.schedule)
    losses = np.empty(config.K + 1)
    snapshots: dict[int, NetParams] = {}
    logger.debug(
        "Training %s net D=%s L=%s M=%s alpha=%s for K=%s steps",
        config.block, config.D, config.L, config.M, config.alpha, config.K,
    )  # fmt: skip
    k = 0
    try:
        for k in range(config.K + 1):
            trace = forward_pass(net, dataset.inputs, config.alpha)
            losses[k] = dataset.loss(trace.outputs)
            ensure_finite(losses[k : k + 1], "loss")
            if k in schedule:
                snapshots[k] = net
            if observer is not None:
                observer(k, net, trace)
            if k < config.K:
                net = gd_step(net, dataset, config, trace)
    except NonFiniteError as e:
        logger.warning("Training diverged at iteration %s: %s", k, e)
        raise DivergenceError("training diverged", iteration=k, layer=e.layer) from e
    logger.debug("Final loss %.6g (initial %.6g)", losses[-1], losses[0])
    return TrainResult(config, dataset, losses, snapshots)
