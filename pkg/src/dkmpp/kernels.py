"""Base kernels (RBF, RQ, OU), ReLU MLPs, and their deep-kernel composition.

All kernels act on a squared distance q = ||a - b||^2 and map into (0, 1]:

    rbf: exp(-phi * q)
    rq:  (1 + phi * q)^(-1/2)
    ou:  exp(-phi * sqrt(q))

The deep kernel evaluates the base kernel on network-transformed inputs,
k(g(s), g(u)).  phi is stored as log(phi) so optimization is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .diffengine import ParamVector, concat_param_blocks
from .errors import ConfigError

KERNEL_KINDS = ("rbf", "rq", "ou")


@dataclass(frozen=True)
class BaseKernelSpec:
    """Kernel family plus its positive sharpness parameter phi."""

    kind: str
    log_phi: float

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; choose from {KERNEL_KINDS}")

    @staticmethod
    def create(kind: str, phi: float) -> "BaseKernelSpec":
        if phi <= 0:
            raise ConfigError(f"phi must be positive, got {phi}")
        return BaseKernelSpec(kind, math.log(phi))

    @property
    def phi(self) -> float:
        return math.exp(self.log_phi)


def pairwise_sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """||a_i - b_j||^2 as (n, J) without materializing (n, J, d) differences.

    Clamped at 0 so rounding in the expansion cannot produce tiny negatives
    (which would break sqrt-based kernels).
    """
    q = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1) - 2.0 * (a @ b.t())
    return torch.clamp(q, min=0.0)


def kernel_from_sqdist(kind: str, phi: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Kernel value from squared distance; differentiable in phi and q.

    The OU kernel is non-differentiable at q = 0; its derivative there is
    defined as 0 (coincidence of an event with a transformed representative
    point is measure-zero).
    """
    if kind == "rbf":
        return torch.exp(-phi * q)
    if kind == "rq":
        return torch.rsqrt(1.0 + phi * q)
    if kind == "ou":
        positive = q > 0
        q_safe = torch.where(positive, q, torch.ones_like(q))
        dist = torch.where(positive, torch.sqrt(q_safe), torch.zeros_like(q))
        return torch.exp(-phi * dist)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def base_kernel(spec: BaseKernelSpec, a, b) -> float:
    """Base kernel between two same-dimension vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    q = torch.tensor(float(np.sum((a - b) ** 2)))
    return float(kernel_from_sqdist(spec.kind, torch.tensor(spec.phi), q))


@dataclass(frozen=True)
class MlpSpec:
    """Affine-rectifier stack: ReLU on hidden layers, identity on the output."""

    widths: tuple  # (input, hidden..., output)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(f"MLP needs >= 2 positive widths, got {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def block_shapes(self, prefix: str):
        """(name, shape) pairs for weight/bias blocks inside a ParamVector."""
        out = []
        for i in range(self.n_layers):
            out.append((f"{prefix}.W{i}", (self.widths[i + 1], self.widths[i])))
            out.append((f"{prefix}.b{i}", (self.widths[i + 1],)))
        return out

    def init_blocks(self, prefix: str, rng: np.random.Generator):
        """Symmetric uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
        blocks = []
        for name, shape in self.block_shapes(prefix):
            if name.split(".")[-1].startswith("W"):
                fan_out, fan_in = shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                blocks.append((name, rng.uniform(-bound, bound, size=shape).ravel()))
            else:
                blocks.append((name, np.zeros(shape)))
        return blocks


def mlp_views(spec: MlpSpec, prefix: str, params: ParamVector, theta: torch.Tensor):
    """(W, b) tensor views into the flat theta for each layer."""
    layers = []
    for i in range(spec.n_layers):
        w_slice = params.slice_of(f"{prefix}.W{i}")
        b_slice = params.slice_of(f"{prefix}.b{i}")
        W = theta[w_slice].view(spec.widths[i + 1], spec.widths[i])
        b = theta[b_slice]
        layers.append((W, b))
    return layers


def mlp_apply(layers, x: torch.Tensor) -> torch.Tensor:
    """Forward pass through (W, b) layers; ReLU on all but the last."""
    n = len(layers)
    for i, (W, b) in enumerate(layers):
        x = x @ W.t() + b
        if i < n - 1:
            x = torch.relu(x)
    return x


def mlp_forward(spec: MlpSpec, x, params: ParamVector, prefix: str = "mlp") -> np.ndarray:
    """Numpy-facing MLP evaluation (single vector or batch of rows)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = np.atleast_2d(arr)
    if rows.shape[1] != spec.in_width:
        raise ConfigError(f"input width {rows.shape[1]} != spec input width {spec.in_width}")
    theta = params.torch_values()
    with torch.no_grad():
        out = mlp_apply(mlp_views(spec, prefix, params, theta), torch.as_tensor(rows))
    out = out.numpy()
    return out[0] if single else out


def init_mlp_params(spec: MlpSpec, prefix: str, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    return concat_param_blocks(spec.init_blocks(prefix, rng))


def deep_kernel(
    spec: BaseKernelSpec,
    g: MlpSpec,
    s,
    u,
    params: ParamVector,
    prefix: str = "g",
) -> float:
    """k_phi(g(s), g(u)): the base kernel on network-transformed inputs."""
    gs = mlp_forward(g, np.asarray(s, dtype=np.float64), params, prefix)
    gu = mlp_forward(g, np.asarray(u, dtype=np.float64), params, prefix)
    return base_kernel(spec, gs, gu)


def identity_mlp_params(width: int, prefix: str = "g", shift: float = 0.0) -> ParamVector:
    """Single linear layer equal to the identity plus a constant shift."""
    W = np.eye(width).ravel()
    b = np.full(width, shift)
    return concat_param_blocks([(f"{prefix}.W0", W), (f"{prefix}.b0", b)])
