"""Residual units phi(x, z) with analytic vector-Jacobian products.

Every block is vectorized over a batch of n inputs and the M units of one
layer: inputs are (n, D, T), the layer's parameters are (M, p). ``apply``
returns the per-unit outputs (n, M, D, T); the adjoint and tangent maps return
sums over the layer's units, which is all the residual recursions need.

Parameter vectors are the concatenation of the block's slots. Each slot has a
role: "input" slots are initialized with sigma_u and trained with eta_u,
"output" slots with sigma_v and eta_v.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass
from typing import ClassVar, Literal

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit

from meanode.config import TrainConfig
from meanode.errors import ConfigError, ShapeError
from meanode.tensor import FloatArray, SeedPath, SeedTag, as_state, gaussian_sample

Role = Literal["input", "output"]

# Sharpness of the softplus surrogate standing in for relu.
SOFTPLUS_BETA = 8.0


@dataclass(frozen=True)
class Activation:
    name: str
    f: Callable[[FloatArray], FloatArray]
    df: Callable[[FloatArray], FloatArray]
    d2f: Callable[[FloatArray], FloatArray]
    odd: bool


def _tanh_d1(x: FloatArray) -> FloatArray:
    return 1.0 - np.tanh(x) ** 2


def _tanh_d2(x: FloatArray) -> FloatArray:
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t**2)


def _softplus(x: FloatArray) -> FloatArray:
    return np.logaddexp(0.0, SOFTPLUS_BETA * x) / SOFTPLUS_BETA


def _softplus_d1(x: FloatArray) -> FloatArray:
    return expit(SOFTPLUS_BETA * x)


def _softplus_d2(x: FloatArray) -> FloatArray:
    s = expit(SOFTPLUS_BETA * x)
    return SOFTPLUS_BETA * s * (1.0 - s)


ACTIVATIONS: dict[str, Activation] = {
    "tanh": Activation("tanh", np.tanh, _tanh_d1, _tanh_d2, odd=True),
    "identity": Activation(
        "identity",
        lambda x: np.array(x, dtype=np.float64, copy=True),
        np.ones_like,
        np.zeros_like,
        odd=True,
    ),
    "relu": Activation("relu", _softplus, _softplus_d1, _softplus_d2, odd=False),
}


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    role: Role

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class Block(ABC):
    """A residual unit family phi(x, z)."""

    tag: ClassVar[str]

    @abstractmethod
    def slots(self, D: int) -> tuple[Slot, ...]: ...

    @property
    @abstractmethod
    def centered(self) -> bool:
        """Whether a centered symmetric init gives E[phi] = E[D1 phi] = 0."""

    def num_params(self, D: int) -> int:
        return sum(slot.size for slot in self.slots(D))

    def split(self, z: FloatArray, D: int) -> list[FloatArray]:
        """Views of an (M, p) parameter array, one (M, *slot.shape) per slot."""
        out, start = [], 0
        for slot in self.slots(D):
            out.append(z[:, start : start + slot.size].reshape(-1, *slot.shape))
            start += slot.size
        return out

    def role_mask(self, D: int, role: Role) -> FloatArray:
        """1.0 on the parameter coordinates whose slot has the given role."""
        return np.concatenate(
            [np.full(s.size, float(s.role == role)) for s in self.slots(D)]
        )

    def check(self, x: FloatArray, z: FloatArray, w: FloatArray | None = None) -> int:
        if x.ndim != 3:
            raise ShapeError(f"inputs must be (n, D, T), got {x.shape}")
        D = x.shape[1]
        p = self.num_params(D)
        if z.ndim != 2 or z.shape[1] != p:
            raise ShapeError(f"{self.tag} parameters must be (M, {p}), got {z.shape}")
        if w is not None and w.shape != x.shape:
            raise ShapeError(f"cotangent shape {w.shape} != input shape {x.shape}")
        return D

    def init(
        self, seed: SeedPath, count: int, D: int, sigma_u: float, sigma_v: float
    ) -> FloatArray:
        """count iid units with centered Gaussian entries, one stream per slot."""
        if sigma_u < 0 or sigma_v < 0:
            raise ConfigError("initialization scales must be nonnegative")
        parts = []
        for index, slot in enumerate(self.slots(D)):
            std = sigma_u if slot.role == "input" else sigma_v
            draws = gaussian_sample(seed.child(SeedTag.SLOT, index), count * slot.size, std)
            parts.append(draws.reshape(count, slot.size))
        return np.concatenate(parts, axis=1)

    @abstractmethod
    def apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        """Per-unit outputs phi(x_i, z_j), shape (n, M, D, T)."""

    def layer_apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        """sum_j phi(x_i, z_j), shape (n, D, T)."""
        return self.apply(x, z).sum(axis=1)

    @abstractmethod
    def vjp_state(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        """sum_j D1 phi(x_i, z_j)^T w_i, shape (n, D, T)."""

    @abstractmethod
    def vjp_params(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        """D2 phi(x_i, z_j)^T w_i for every (i, j), shape (n, M, p)."""

    def jvp_params(self, x: FloatArray, z: FloatArray, dz: FloatArray) -> FloatArray:
        """sum_j D2 phi(x_i, z_j) dz_j, shape (n, D, T)."""
        raise ConfigError(f"tangent dynamics are not available for {self.tag} blocks")

    def tangent_vjp_state(
        self, x: FloatArray, z: FloatArray, dz: FloatArray, w: FloatArray
    ) -> FloatArray:
        """Adjoint in x of x -> sum_j D2 phi(x, z_j) dz_j, applied to w."""
        raise ConfigError(f"tangent dynamics are not available for {self.tag} blocks")


@dataclass(frozen=True)
class TwoLayerPerceptron(Block):
    """phi(x, (u, v)) = v * rho(u^T x / D), intercept-free, token-wise."""

    activation: Activation
    tag: ClassVar[str] = "mlp"

    def slots(self, D: int) -> tuple[Slot, ...]:
        return (Slot("u", (D,), "input"), Slot("v", (D,), "output"))

    @property
    def centered(self) -> bool:
        # v is centered and independent of u, whatever rho is
        return True

    def _pre(self, x: FloatArray, u: FloatArray) -> FloatArray:
        return np.einsum("md,ndt->nmt", u, x) / x.shape[1]

    def apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        D = self.check(x, z)
        u, v = self.split(z, D)
        return np.einsum("md,nmt->nmdt", v, self.activation.f(self._pre(x, u)))

    def layer_apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        D = self.check(x, z)
        u, v = self.split(z, D)
        return np.einsum("md,nmt->ndt", v, self.activation.f(self._pre(x, u)))

    def vjp_state(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        u, v = self.split(z, D)
        coeff = self.activation.df(self._pre(x, u)) * np.einsum("md,ndt->nmt", v, w)
        return np.einsum("nmt,md->ndt", coeff, u) / D

    def vjp_params(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        u, v = self.split(z, D)
        pre = self._pre(x, u)
        coeff = self.activation.df(pre) * np.einsum("md,ndt->nmt", v, w)
        grad_u = np.einsum("nmt,ndt->nmd", coeff, x) / D
        grad_v = np.einsum("nmt,ndt->nmd", self.activation.f(pre), w)
        return np.concatenate([grad_u, grad_v], axis=-1)

    def jvp_params(self, x: FloatArray, z: FloatArray, dz: FloatArray) -> FloatArray:
        D = self.check(x, z)
        self.check(x, dz)
        u, v = self.split(z, D)
        du, dv = self.split(dz, D)
        pre = self._pre(x, u)
        dpre = self._pre(x, du)
        return np.einsum("md,nmt->ndt", dv, self.activation.f(pre)) + np.einsum(
            "md,nmt->ndt", v, self.activation.df(pre) * dpre
        )

    def tangent_vjp_state(
        self, x: FloatArray, z: FloatArray, dz: FloatArray, w: FloatArray
    ) -> FloatArray:
        D = self.check(x, z, w)
        self.check(x, dz)
        u, v = self.split(z, D)
        du, dv = self.split(dz, D)
        pre = self._pre(x, u)
        dpre = self._pre(x, du)
        act = self.activation
        sv = np.einsum("md,ndt->nmt", v, w)
        sdv = np.einsum("md,ndt->nmt", dv, w)
        coeff_u = act.df(pre) * sdv + sv * act.d2f(pre) * dpre
        coeff_du = sv * act.df(pre)
        return (
            np.einsum("nmt,md->ndt", coeff_u, u) + np.einsum("nmt,md->ndt", coeff_du, du)
        ) / D


@dataclass(frozen=True)
class SingleMatrixPre(Block):
    """phi(x, W) = W rho(x)."""

    activation: Activation
    tag: ClassVar[str] = "matrix_pre"

    def slots(self, D: int) -> tuple[Slot, ...]:
        return (Slot("W", (D, D), "output"),)

    @property
    def centered(self) -> bool:
        return True

    def apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        D = self.check(x, z)
        (W,) = self.split(z, D)
        return np.einsum("mij,njt->nmit", W, self.activation.f(x))

    def layer_apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        D = self.check(x, z)
        (W,) = self.split(z, D)
        return np.einsum("mij,njt->nit", W, self.activation.f(x))

    def vjp_state(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        (W,) = self.split(z, D)
        return self.activation.df(x) * np.einsum("mij,nit->njt", W, w)

    def vjp_params(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        n, M = x.shape[0], z.shape[0]
        grad = np.einsum("nit,njt->nij", w, self.activation.f(x)).reshape(n, 1, D * D)
        return np.repeat(grad, M, axis=1)

    def jvp_params(self, x: FloatArray, z: FloatArray, dz: FloatArray) -> FloatArray:
        D = self.check(x, dz)
        (dW,) = self.split(dz, D)
        return np.einsum("mij,njt->nit", dW, self.activation.f(x))

    def tangent_vjp_state(
        self, x: FloatArray, z: FloatArray, dz: FloatArray, w: FloatArray
    ) -> FloatArray:
        D = self.check(x, dz, w)
        (dW,) = self.split(dz, D)
        return self.activation.df(x) * np.einsum("mij,nit->njt", dW, w)


@dataclass(frozen=True)
class SingleMatrixPost(Block):
    """phi(x, W) = rho(W x)."""

    activation: Activation
    tag: ClassVar[str] = "matrix_post"

    def slots(self, D: int) -> tuple[Slot, ...]:
        return (Slot("W", (D, D), "input"),)

    @property
    def centered(self) -> bool:
        return self.activation.odd

    def _pre(self, x: FloatArray, W: FloatArray) -> FloatArray:
        return np.einsum("mij,njt->nmit", W, x)

    def apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        D = self.check(x, z)
        (W,) = self.split(z, D)
        return self.activation.f(self._pre(x, W))

    def vjp_state(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        (W,) = self.split(z, D)
        gated = self.activation.df(self._pre(x, W)) * w[:, None]
        return np.einsum("mij,nmit->njt", W, gated)

    def vjp_params(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        D = self.check(x, z, w)
        (W,) = self.split(z, D)
        gated = self.activation.df(self._pre(x, W)) * w[:, None]
        grad = np.einsum("nmit,njt->nmij", gated, x)
        return grad.reshape(x.shape[0], z.shape[0], D * D)

    def jvp_params(self, x: FloatArray, z: FloatArray, dz: FloatArray) -> FloatArray:
        D = self.check(x, z)
        self.check(x, dz)
        (W,) = self.split(z, D)
        (dW,) = self.split(dz, D)
        return (self.activation.df(self._pre(x, W)) * self._pre(x, dW)).sum(axis=1)

    def tangent_vjp_state(
        self, x: FloatArray, z: FloatArray, dz: FloatArray, w: FloatArray
    ) -> FloatArray:
        D = self.check(x, z, w)
        self.check(x, dz)
        (W,) = self.split(z, D)
        (dW,) = self.split(dz, D)
        pre = self._pre(x, W)
        curv = self.activation.d2f(pre) * self._pre(x, dW) * w[:, None]
        gated = self.activation.df(pre) * w[:, None]
        return np.einsum("mij,nmit->njt", W, curv) + np.einsum("mij,nmit->njt", dW, gated)


@dataclass(frozen=True)
class Attention(Block):
    """One attention head z = (W_K, W_Q, W_V, W_O), each d_k x D.

    phi(x, z)_t = W_O^T sum_s softmax_s(<W_Q x_t, W_K x_s> / sqrt(d_k)) W_V x_s
    """

    d_k: int = 4
    tag: ClassVar[str] = "attention"

    def slots(self, D: int) -> tuple[Slot, ...]:
        shape = (self.d_k, D)
        return (
            Slot("W_K", shape, "input"),
            Slot("W_Q", shape, "input"),
            Slot("W_V", shape, "input"),
            Slot("W_O", shape, "output"),
        )

    @property
    def centered(self) -> bool:
        return True

    def _forward(self, x: FloatArray, z: FloatArray) -> dict[str, FloatArray]:
        D = self.check(x, z)
        Wk, Wq, Wv, Wo = self.split(z, D)
        keys = np.einsum("mkd,ndt->nmkt", Wk, x)
        queries = np.einsum("mkd,ndt->nmkt", Wq, x)
        values = np.einsum("mkd,ndt->nmkt", Wv, x)
        scores = np.einsum("nmkt,nmks->nmts", queries, keys) / math.sqrt(self.d_k)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        mixed = np.einsum("nmks,nmts->nmkt", values, attn)
        return {
            "Wk": Wk, "Wq": Wq, "Wv": Wv, "Wo": Wo,
            "keys": keys, "queries": queries, "values": values,
            "attn": attn, "mixed": mixed,
        }  # fmt: skip

    def apply(self, x: FloatArray, z: FloatArray) -> FloatArray:
        fw = self._forward(x, z)
        return np.einsum("mkd,nmkt->nmdt", fw["Wo"], fw["mixed"])

    def _backward(
        self, x: FloatArray, z: FloatArray, w: FloatArray
    ) -> tuple[dict[str, FloatArray], dict[str, FloatArray]]:
        self.check(x, z, w)
        fw = self._forward(x, z)
        attn = fw["attn"]
        d_mixed = np.einsum("mkd,ndt->nmkt", fw["Wo"], w)
        d_values = np.einsum("nmkt,nmts->nmks", d_mixed, attn)
        d_attn = np.einsum("nmkt,nmks->nmts", d_mixed, fw["values"])
        d_scores = attn * (d_attn - (attn * d_attn).sum(axis=-1, keepdims=True))
        d_scores /= math.sqrt(self.d_k)
        grads = {
            "queries": np.einsum("nmts,nmks->nmkt", d_scores, fw["keys"]),
            "keys": np.einsum("nmts,nmkt->nmks", d_scores, fw["queries"]),
            "values": d_values,
            "Wo": np.einsum("nmkt,ndt->nmkd", fw["mixed"], w),
        }
        return fw, grads

    def vjp_state(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        fw, grads = self._backward(x, z, w)
        return (
            np.einsum("mkd,nmkt->ndt", fw["Wk"], grads["keys"])
            + np.einsum("mkd,nmkt->ndt", fw["Wq"], grads["queries"])
            + np.einsum("mkd,nmkt->ndt", fw["Wv"], grads["values"])
        )

    def vjp_params(self, x: FloatArray, z: FloatArray, w: FloatArray) -> FloatArray:
        _, grads = self._backward(x, z, w)
        n, M = x.shape[0], z.shape[0]
        parts = [
            np.einsum("nmkt,ndt->nmkd", grads[name], x)
            for name in ("keys", "queries", "values")
        ]
        parts.append(grads["Wo"])
        return np.concatenate([g.reshape(n, M, -1) for g in parts], axis=-1)


def make_block(name: str, activation: str = "tanh", d_k: int = 4) -> Block:
    """Build a block kind from its config names."""
    if name == "attention":
        return Attention(d_k=d_k)
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ConfigError(f"unknown activation {activation!r}") from None
    families: dict[str, type[TwoLayerPerceptron | SingleMatrixPre | SingleMatrixPost]] = {
        "mlp": TwoLayerPerceptron,
        "matrix_pre": SingleMatrixPre,
        "matrix_post": SingleMatrixPost,
    }
    if name not in families:
        raise ConfigError(f"unknown block kind {name!r}")
    return families[name](act)


def block_from_config(config: TrainConfig) -> Block:
    return make_block(config.block, config.activation, config.d_k)


def _unit(kind: Block, z: ArrayLike, D: int) -> FloatArray:
    arr = np.asarray(z, dtype=np.float64).reshape(-1)
    if arr.size != kind.num_params(D):
        raise ShapeError(
            f"{kind.tag} unit needs {kind.num_params(D)} parameters, got {arr.size}"
        )
    if not np.all(np.isfinite(arr)):
        raise ShapeError("unit parameters must be finite")
    return arr[None]


def block_apply(kind: Block, x: ArrayLike, z: ArrayLike) -> FloatArray:
    """phi(x, z) for a single unit; returns a (D, T) state."""
    state = as_state(x)
    return kind.apply(state[None], _unit(kind, z, state.shape[0]))[0, 0]


def block_vjp_state(kind: Block, x: ArrayLike, z: ArrayLike, w: ArrayLike) -> FloatArray:
    """D1 phi(x, z)^T w for a single unit."""
    state, cot = as_state(x), as_state(w)
    return kind.vjp_state(state[None], _unit(kind, z, state.shape[0]), cot[None])[0]


def block_vjp_params(kind: Block, x: ArrayLike, z: ArrayLike, w: ArrayLike) -> FloatArray:
    """D2 phi(x, z)^T w for a single unit; returns a flat parameter vector."""
    state, cot = as_state(x), as_state(w)
    return kind.vjp_params(state[None], _unit(kind, z, state.shape[0]), cot[None])[0, 0]


def block_init(
    kind: Block, seed: SeedPath, scales: tuple[float, float], D: int
) -> FloatArray:
    """One unit with iid centered Gaussian entries; scales = (sigma_u, sigma_v)."""
    sigma_u, sigma_v = scales
    return kind.init(seed, 1, D, sigma_u, sigma_v)[0]
