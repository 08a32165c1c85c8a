from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

BlockName = Literal["mlp", "matrix_pre", "matrix_post", "attention"]
ActivationName = Literal["tanh", "identity", "relu"]
LossName = Literal["mse", "sum_squares"]
Axis = Literal["L", "M", "D", "alpha", "sigma_v"]
RateModel = Literal["depth_width", "fluctuation", "laziness"]
Scaling = Literal["fixed", "balanced"]

INTEGER_AXES = frozenset({"L", "M", "D"})


class Settings(BaseSettings):
    # Worker pool (MEANODE_WORKERS is the default for --workers)
    workers: int = Field(default=1, ge=1)

    log_level: str = "INFO"

    # Reference (large ResNet) sizing
    reference_depth: int = Field(default=1000, ge=1)
    reference_width: int = Field(default=1000, ge=1)
    fast_reference_size: int = Field(default=300, ge=1)
    min_reference_ratio: float = Field(default=16.0, gt=0)

    # Wall-clock runtimes make CSVs non-reproducible, so they are opt-in.
    record_runtime: bool = False

    out_dir: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="MEANODE_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    def reference_size(self, fast: bool) -> tuple[int, int]:
        """(L_ref, M_ref) for the default or --fast reference."""
        if fast:
            return self.fast_reference_size, self.fast_reference_size
        return self.reference_depth, self.reference_width


settings = Settings()


class TrainConfig(BaseModel):
    """Hyperparameters of one finite ResNet training run.

    Learning rates are the pre-multiplied ones: a parameter slot with rate
    ``eta`` moves by ``-(L*M*eta/alpha**2) * grad`` per GD step. ``eta_u``
    applies to input-role slots and ``eta_v`` to output-role slots; the
    shorthand key ``eta`` sets both.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    D: int = Field(ge=1)
    L: int = Field(ge=1)
    M: int = Field(ge=1)
    alpha: float = Field(gt=0)
    K: int = Field(ge=0)
    eta_u: float = Field(ge=0)
    eta_v: float = Field(ge=0)
    sigma_u: float = Field(ge=0)
    sigma_v: float = Field(ge=0)
    n: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    data_seed: int = Field(default=0, ge=0, lt=2**64)
    block: BlockName = "mlp"
    activation: ActivationName = "tanh"
    d_k: int = Field(default=4, ge=1)
    tokens: int = Field(default=1, ge=1)
    loss: LossName = "mse"
    snapshots: tuple[int, ...] | None = None
    tie_first_unit: bool = False

    @model_validator(mode="before")
    @classmethod
    def _expand_eta(cls, data: Any) -> Any:
        if isinstance(data, dict) and "eta" in data:
            data = dict(data)
            eta = data.pop("eta")
            data.setdefault("eta_u", eta)
            data.setdefault("eta_v", eta)
        return data

    @model_validator(mode="after")
    def _check_snapshots(self) -> TrainConfig:
        for k in self.snapshots or ():
            if not 0 <= k <= self.K:
                raise ValueError(f"snapshot iteration {k} outside [0, {self.K}]")
        return self

    @property
    def schedule(self) -> tuple[int, ...]:
        """Iterations at which parameters are recorded (always includes 0 and K)."""
        return tuple(sorted({0, self.K, *(self.snapshots or ())}))

    def with_updates(self, **changes: Any) -> TrainConfig:
        """Return a validated copy with some fields replaced (``eta`` sets both LRs)."""
        data = self.model_dump()
        if "eta" in changes:
            eta = changes.pop("eta")
            data["eta_u"] = data["eta_v"] = eta
        data.update(changes)
        return TrainConfig.model_validate(data)


def default_config(**changes: Any) -> TrainConfig:
    """The desk-scale setting of the depth/width experiments.

    D = n = 10, tanh 2LP blocks, N(0, sqrt(D)) weights (sqrt(D) is the standard
    deviation), LRs (D, D), K = 100 GD steps, mean-square loss.
    """
    D = int(changes.pop("D", 10))
    eta = float(changes.pop("eta", D))
    data: dict[str, Any] = {
        "D": D,
        "L": 64,
        "M": 1,
        "alpha": 1.0,
        "K": 100,
        "n": 10,
        "eta_u": eta,
        "eta_v": eta,
        "sigma_u": D**0.5,
        "sigma_v": D**0.5,
    }
    data.update(changes)
    return TrainConfig.model_validate(data)


def lazy_config(**changes: Any) -> TrainConfig:
    """The lazy-regime setting: D = 8, L = 256, M = 4, otherwise as default_config."""
    return default_config(**{"D": 8, "L": 256, "M": 4, **changes})


class SweepSpec(BaseModel):
    """One sweep: a varying axis, its grid, a base config and repetitions."""

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    axis: Axis
    values: tuple[float, ...] = Field(min_length=1)
    base: TrainConfig
    repetitions: int = Field(default=1, ge=1)
    k: tuple[int, ...] | None = None
    # "balanced": the axis value alpha sets sigma_v = alpha*sqrt(D) and the
    # balanced LRs, with the model alpha kept at 1.
    scaling: Scaling = "fixed"
    measure_error: bool = True
    reference_depth: int | None = Field(default=None, ge=1)
    reference_width: int | None = Field(default=None, ge=1)
    fit: RateModel | None = None

    @model_validator(mode="after")
    def _check_grid(self) -> SweepSpec:
        values = self.values
        if any(b <= a for a, b in zip(values, values[1:], strict=False)):
            raise ValueError("values must be strictly increasing")
        if self.axis in INTEGER_AXES and any(v != int(v) or v < 1 for v in values):
            raise ValueError(f"axis {self.axis} needs positive integer values")
        for k in self.iterations:
            if not 0 <= k <= self.base.K:
                raise ValueError(f"comparison iteration {k} outside [0, {self.base.K}]")
        return self

    @property
    def iterations(self) -> tuple[int, ...]:
        return self.k if self.k else (self.base.K,)


class FigureOverrides(BaseModel):
    """Optional changes to a figure's default protocol.

    ``base`` holds TrainConfig fields applied on top of the figure's base
    config; ``values`` replaces its main grid (depths, widths or alphas) and
    ``dims`` the embedding dimensions of the alpha figures.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    base: dict[str, Any] = Field(default_factory=dict)
    values: tuple[float, ...] | None = Field(default=None, min_length=1)
    dims: tuple[int, ...] | None = Field(default=None, min_length=1)
    repetitions: int | None = Field(default=None, ge=1)
    reference_depth: int | None = Field(default=None, ge=1)
    reference_width: int | None = Field(default=None, ge=1)


def load_json(path: str | Path) -> dict[str, Any]:
    """Read a JSON config document."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object at top level")
    return data


def load_config(path: str | Path) -> TrainConfig:
    """Load and validate a flat TrainConfig JSON document."""
    return TrainConfig.model_validate(load_json(path))


def load_sweep(path: str | Path) -> SweepSpec:
    return SweepSpec.model_validate(load_json(path))


def load_overrides(path: str | Path | None) -> FigureOverrides:
    if path is None:
        return FigureOverrides()
    return FigureOverrides.model_validate(load_json(path))
