"""Differentiation engine.

Provides exact value / input-gradient / input-Hessian-diagonal evaluation of
scalar fields over the 3 event coordinates, and parameter gradients of scalar
losses whose computation may itself contain such input derivatives (nested
differentiation).  Everything runs in 64-bit floats on top of torch autograd;
fields and losses are expressed as torch computations.

A "field" is a callable (point: (3,) tensor, theta: flat tensor) -> scalar
tensor.  A "loss" is a callable (batch, theta: flat tensor) -> scalar tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NonFiniteError

torch.set_default_dtype(torch.float64)

_COORDS = ("t", "x1", "x2")


@dataclass
class ParamVector:
    """Named blocks inside one flat 64-bit parameter vector."""

    names: tuple
    offsets: np.ndarray  # len(names) + 1 block boundaries
    values: np.ndarray   # flat, float64

    def __post_init__(self):
        self.names = tuple(self.names)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if self.offsets.ndim != 1 or self.offsets.size != len(self.names) + 1:
            raise ValueError("offsets must have one entry per block boundary")
        if np.any(np.diff(self.offsets) <= 0) or self.offsets[0] != 0:
            raise ValueError("offsets must start at 0 and be strictly increasing")
        if self.offsets[-1] != self.values.size:
            raise ValueError(
                f"offsets end at {self.offsets[-1]} but vector has {self.values.size} entries"
            )
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("parameter vector contains non-finite values")
        self.version = 0

    def __len__(self) -> int:
        return self.values.size

    def slice_of(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def block(self, name: str) -> np.ndarray:
        return self.values[self.slice_of(name)]

    def set_values(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != self.values.size:
            raise ValueError("parameter length mismatch")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("refusing to set non-finite parameters")
        self.values = values.copy()
        self.version += 1

    def copy(self) -> "ParamVector":
        pv = ParamVector(self.names, self.offsets.copy(), self.values.copy())
        pv.version = self.version
        return pv

    def torch_values(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64, requires_grad=requires_grad)


def concat_param_blocks(blocks: Sequence) -> ParamVector:
    """Assemble a ParamVector from (name, 1-D array) pairs."""
    names = [name for name, _ in blocks]
    arrays = [np.asarray(arr, dtype=np.float64).ravel() for _, arr in blocks]
    offsets = np.concatenate([[0], np.cumsum([a.size for a in arrays])])
    values = np.concatenate(arrays) if arrays else np.zeros(0)
    return ParamVector(tuple(names), offsets, values)


@dataclass(frozen=True)
class InputJet:
    """Value, gradient and Hessian diagonal of a scalar field at one point."""

    value: float
    grad: np.ndarray
    hess_diag: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "grad", np.asarray(self.grad, dtype=np.float64).reshape(3))
        if self.hess_diag is not None:
            object.__setattr__(
                self, "hess_diag", np.asarray(self.hess_diag, dtype=np.float64).reshape(3)
            )


def _check_finite(arr: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(arr)
    if bad.any():
        flat = bad.reshape(-1, bad.shape[-1]) if bad.ndim > 1 else bad.reshape(1, -1)
        coord = int(torch.nonzero(flat)[0, -1])
        raise NonFiniteError(f"non-finite {what} in coordinate {_COORDS[coord % 3]}")


def input_jet_batch(
    field_batch: Callable[[torch.Tensor], torch.Tensor],
    points: torch.Tensor,
    order: int = 2,
    create_graph: bool = False,
):
    """Value/gradient/Hessian-diagonal of a row-wise scalar field at many points.

    field_batch maps an (n, 3) tensor to an (n,) tensor where row i depends
    only on points[i] (the per-row sum trick then yields exact per-row
    derivatives).  Returns (values, grad, hess_diag); grad and hess_diag are
    None when not requested by `order`.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    pts = points.detach().requires_grad_(order >= 1)
    values = field_batch(pts)
    if order == 0:
        return values, None, None
    # structurally constant fields produce graph-free outputs: zero jets
    if values.grad_fn is None and not values.requires_grad:
        zeros = torch.zeros_like(pts)
        return values, zeros, (zeros if order >= 2 else None)
    (grad,) = torch.autograd.grad(
        values.sum(), pts, create_graph=create_graph or order >= 2, allow_unused=True
    )
    if grad is None:
        grad = torch.zeros_like(pts)
    if order == 1:
        return values, grad, None
    cols = []
    for d in range(3):
        col = grad[:, d]
        if col.grad_fn is None and not col.requires_grad:
            cols.append(torch.zeros_like(col))
            continue
        (g2,) = torch.autograd.grad(
            col.sum(), pts, create_graph=create_graph, retain_graph=True,
            allow_unused=True,
        )
        cols.append(g2[:, d] if g2 is not None else torch.zeros_like(col))
    hess = torch.stack(cols, dim=1)
    return values, grad, hess


def eval_jet(field, point, params: ParamVector, order: int = 2) -> InputJet:
    """Exact derivatives of a scalar field w.r.t. the 3 point coordinates.

    field(point_tensor, theta_tensor) must be built from torch operations.
    """
    theta = params.torch_values()
    p = torch.as_tensor(np.asarray(point, dtype=np.float64)).reshape(3)

    def batch(pts):
        return field(pts[0], theta).reshape(1)

    values, grad, hess = input_jet_batch(batch, p.reshape(1, 3), order=order)
    _check_finite(values.reshape(1, 1), "field value")
    g = np.zeros(3)
    h = None
    if grad is not None:
        _check_finite(grad, "input gradient")
        g = grad[0].detach().numpy()
    if hess is not None:
        _check_finite(hess, "input second derivative")
        h = hess[0].detach().numpy()
    return InputJet(float(values.item()), g, h)


def param_grad(loss, batch, params: ParamVector) -> np.ndarray:
    """Exact gradient of loss(batch, theta) w.r.t. every parameter entry.

    The loss may internally take input derivatives (autograd graphs are kept
    alive through them), so objectives containing event-coordinate scores and
    curvatures differentiate correctly.
    """
    theta = params.torch_values(requires_grad=True)
    value = loss(batch, theta)
    (grad,) = torch.autograd.grad(value, theta, allow_unused=False)
    out = grad.detach().numpy()
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NonFiniteError(f"non-finite parameter gradient at entry {bad}")
    return out


def central_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central finite-difference gradient of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def central_diff_hess_diag(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central second-difference diagonal of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    f0 = f(x)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.flat[i] = (f(x + e) - 2.0 * f0 + f(x - e)) / (h * h)
    return out


def max_rel_err(a, b, floor: float = 1e-3) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x,
    claimed_grad,
    h: float = 1e-4,
    floor: float = 1e-3,
) -> float:
    """Compare a claimed gradient against central differences of f at x.

    Returns the max relative error (never raises); used by the test suite as
    the independent oracle for engine-computed derivatives.
    """
    fd = central_diff_grad(f, np.asarray(x, dtype=np.float64), h)
    return max_rel_err(np.asarray(claimed_grad), fd, floor=floor)
