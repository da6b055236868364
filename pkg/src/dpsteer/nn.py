"""Layers, losses, and MLP assembly on top of the tensor core."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Sin/cos position encoding of a (non-negative) step index.

    Component j is sin(t / 10000^(j/dim)) for even j and
    cos(t / 10000^((j-1)/dim)) for odd j. Returns shape (dim,) for a
    scalar t, or (len(t), dim) for a vector of steps.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("step index must be >= 0")
    j = np.arange(dim)
    exponent = np.where(j % 2 == 0, j, j - 1) / dim
    angles = t_arr[..., None] / (10000.0 ** exponent)
    return np.where(j % 2 == 0, np.sin(angles), np.cos(angles))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "linear"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.weight = Tensor(uniform_init(rng, in_dim, (in_dim, out_dim)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(uniform_init(rng, in_dim, (out_dim,)),
                           requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: expected input (*, {self.in_dim}), "
                f"got {x.data.shape}"
            )
        return T.matmul(x, self.weight) + self.bias

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]


class LayerNorm:
    def __init__(self, dim: int, name: str = "ln", eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.name = name
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.dim:
            raise ShapeError(
                f"{self.name}: expected last dim {self.dim}, got {x.data.shape}"
            )
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]


class Dropout:
    """Inverted-scaling dropout; a no-op in eval mode (no RNG draw at all)."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x: Tensor, rng: np.random.Generator | None,
                 train: bool) -> Tensor:
        if not train or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an RNG")
        mask = (rng.random(x.data.shape) >= self.p) / (1.0 - self.p)
        return T.mul(x, Tensor(mask))


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a plain MLP: linear -> [layer norm] -> ReLU per hidden layer,
    optional dropout before the final linear."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    layer_norm: tuple[bool, ...] = ()
    dropout: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError(f"invalid widths in {self}")
        if self.layer_norm and len(self.layer_norm) != len(self.hidden):
            raise ValueError("layer_norm flags must match hidden layer count")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "layer_norm": list(self.layer_norm),
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            in_dim=d["in_dim"],
            hidden=tuple(d["hidden"]),
            out_dim=d["out_dim"],
            layer_norm=tuple(d["layer_norm"]),
            dropout=d["dropout"],
        )


class Mlp:
    def __init__(self, spec: MlpSpec, rng: np.random.Generator, name: str = "mlp"):
        self.spec = spec
        self.name = name
        ln_flags = spec.layer_norm or (False,) * len(spec.hidden)
        self.layers: list[Linear] = []
        self.norms: list[LayerNorm | None] = []
        prev = spec.in_dim
        for i, (width, use_ln) in enumerate(zip(spec.hidden, ln_flags)):
            self.layers.append(Linear(prev, width, rng, name=f"{name}.l{i}"))
            self.norms.append(LayerNorm(width, name=f"{name}.ln{i}") if use_ln else None)
            prev = width
        self.dropout = Dropout(spec.dropout)
        self.head = Linear(prev, spec.out_dim, rng, name=f"{name}.head")

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        for i, (lin, ln) in enumerate(zip(self.layers, self.norms)):
            try:
                x = lin(x)
            except ShapeError as e:
                raise ShapeError(f"layer {i}: {e}") from None
            if ln is not None:
                x = ln(x)
            x = T.relu(x)
        x = self.dropout(x, rng, train)
        return self.head(x)

    def named_parameters(self):
        params = []
        for lin, ln in zip(self.layers, self.norms):
            params.extend(lin.named_parameters())
            if ln is not None:
                params.extend(ln.named_parameters())
        params.extend(self.head.named_parameters())
        return params


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


def parameters_of(named) -> list[Tensor]:
    return [p for _, p in named]


def copy_parameters(named) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in named}


def load_parameters(named, snapshot: dict[str, np.ndarray]) -> None:
    for name, p in named:
        src = snapshot[name]
        if src.shape != p.data.shape:
            raise ShapeError(
                f"parameter {name}: snapshot shape {src.shape} != {p.data.shape}"
            )
        p.data = src.copy()
