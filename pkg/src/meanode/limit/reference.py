"""A very large ResNet standing in for the Neural Mean ODE.

The reference is trained with the same data, losses, LRs and alpha as the
networks it is compared with. Its forward states h(s, x_i) and adjoints
b(s, x_i) on the training inputs are recorded on the depth grid
s = l / L_ref at chosen iterations; full parameters are kept only at the
config's snapshot schedule, where arbitrary inputs can be queried.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from meanode.config import TrainConfig, settings
from meanode.errors import ConfigError
from meanode.resnet import (
    Dataset,
    ForwardTrace,
    NetParams,
    TrainResult,
    backward_pass,
    forward_pass,
    make_dataset,
    train,
)
from meanode.tensor import FloatArray, SeedPath, SeedTag

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimitFields:
    """Forward states and adjoints on the reference grid, each (L_ref+1, n, D, T)."""

    forward: FloatArray
    backward: FloatArray | None

    @property
    def depth(self) -> int:
        return self.forward.shape[0] - 1

    def layer_at(self, s: float) -> int:
        """Nearest grid layer to depth s in [0, 1]."""
        if not 0.0 <= s <= 1.0:
            raise ConfigError(f"depth {s} outside [0, 1]")
        return int(math.floor(s * self.depth + 0.5))


@dataclass(frozen=True)
class ReferenceModel:
    config: TrainConfig
    result: TrainResult
    fields: dict[int, LimitFields]

    @property
    def dataset(self) -> Dataset:
        return self.result.dataset

    @property
    def L_ref(self) -> int:
        return self.config.L

    @property
    def M_ref(self) -> int:
        return self.config.M

    @property
    def grid(self) -> FloatArray:
        return np.arange(self.L_ref + 1) / self.L_ref

    def fields_at(self, k: int) -> LimitFields:
        try:
            return self.fields[k]
        except KeyError:
            raise ConfigError(
                f"reference fields were not recorded at iteration {k} "
                f"(recorded: {sorted(self.fields)})"
            ) from None

    def without_parameters(self) -> ReferenceModel:
        """A copy keeping only the recorded fields, cheap to ship to workers."""
        result = self.result
        light = TrainResult(result.config, result.dataset, result.losses, {})
        return ReferenceModel(self.config, light, self.fields)

    def resolves(self, L: int, M: int, min_ratio: float | None = None) -> bool:
        ratio = settings.min_reference_ratio if min_ratio is None else min_ratio
        return self.L_ref * self.M_ref >= ratio * L * M


def reference_config(config: TrainConfig, L_ref: int, M_ref: int) -> TrainConfig:
    """The compared run's config resized to (L_ref, M_ref) with its own seed."""
    seed = SeedPath(config.seed).child(SeedTag.REFERENCE).derive_seed()
    return config.with_updates(L=L_ref, M=M_ref, seed=seed, tie_first_unit=False)


def _fields(net: NetParams, trace: ForwardTrace, dataset: Dataset, alpha: float) -> LimitFields:
    backward = backward_pass(net, trace, dataset.loss_grad(trace.outputs), alpha)
    return LimitFields(trace.states, backward.adjoints)


def build_reference(
    config: TrainConfig,
    dataset: Dataset | None = None,
    L_ref: int | None = None,
    M_ref: int | None = None,
    *,
    compared: Sequence[tuple[int, int]] = (),
    field_iterations: Iterable[int] | None = None,
    min_ratio: float | None = None,
) -> ReferenceModel:
    """Train the surrogate and record its fields on the training inputs.

    Args:
        config: The compared run's config; only L, M and the seed change.
        dataset: Training set shared with the compared runs.
        L_ref, M_ref: Surrogate size (Settings defaults when omitted).
        compared: (L, M) of every finite net this reference must resolve.
        field_iterations: Iterations at which fields are stored (default: the
            config's schedule). Tracers need every iteration below K.
        min_ratio: Required L_ref*M_ref / (L*M) (Settings default).

    Raises:
        ConfigError: if a compared net is too large for the reference.
        DivergenceError: if the surrogate's training diverges.
    """
    if L_ref is None or M_ref is None:
        default_L, default_M = settings.reference_size(fast=False)
        L_ref = default_L if L_ref is None else L_ref
        M_ref = default_M if M_ref is None else M_ref
    ratio = settings.min_reference_ratio if min_ratio is None else min_ratio
    for L, M in compared:
        if L_ref * M_ref < ratio * L * M:
            raise ConfigError(
                f"reference {L_ref}x{M_ref} cannot resolve L={L}, M={M}: "
                f"size ratio {L_ref * M_ref / (L * M):.3g} < {ratio:g}"
            )
    if dataset is None:
        dataset = make_dataset(config)
    ref_config = reference_config(config, L_ref, M_ref)
    wanted = set(ref_config.schedule if field_iterations is None else field_iterations)
    fields: dict[int, LimitFields] = {}

    def record(k: int, net: NetParams, trace: ForwardTrace) -> None:
        if k in wanted:
            fields[k] = _fields(net, trace, dataset, ref_config.alpha)

    logger.info("Building %sx%s reference (K=%s)", L_ref, M_ref, config.K)
    result = train(ref_config, dataset, observer=record)
    return ReferenceModel(ref_config, result, fields)


def reference_from_run(result: TrainResult) -> ReferenceModel:
    """Wrap a finished run as a reference, with fields at its snapshots."""
    fields = {}
    for k, net in result.snapshots.items():
        trace = forward_pass(net, result.dataset.inputs, result.config.alpha)
        fields[k] = _fields(net, trace, result.dataset, result.config.alpha)
    return ReferenceModel(result.config, result, fields)


def query_limit_fields(
    ref: ReferenceModel, k: int, x: ArrayLike | None = None, w: ArrayLike | None = None
) -> LimitFields:
    """Forward and backward fields of the reference at iteration k.

    Without x, the stored fields on the training inputs are returned. For other
    inputs the parameters at k must have been kept; the adjoint is propagated
    from w when given.
    """
    if x is None:
        return ref.fields_at(k)
    net = ref.result.net_at(k)
    trace = forward_pass(net, x, ref.config.alpha)
    if w is None:
        return LimitFields(trace.states, None)
    backward = backward_pass(net, trace, w, ref.config.alpha)
    return LimitFields(trace.states, backward.adjoints)
