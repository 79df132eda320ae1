"""Intensity models over the 3-D window.

The main model expresses the event rate as a link-transformed kernel mixture
anchored at representative points u_j:

    lambda(s) = eta( sum_j f(u_j, Z(u_j)) * k_phi(g(s), g(u_j)) )

where f is the mixture-weight MLP (inputs: u_j coordinates and its covariate
vector), g is the kernel-input transform MLP, k_phi a base kernel, and eta a
positive link (softplus by default).  The mixture-only ancestor (identity g,
identity link, softplus-constrained weights) and a constant-rate model are
provided as baselines.

The mixture weights f_j do not depend on the query point, so they are cached
per parameter-vector version for evaluation fan-out.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.special import erf as np_erf

from .diffengine import InputJet, ParamVector, concat_param_blocks, input_jet_batch
from .domain import RepresentativeSet, SequenceSet, Window, fmt
from .errors import (
    CheckpointError,
    ConfigError,
    NonPositiveIntensityError,
    SingularScoreError,
)
from .kernels import (
    BaseKernelSpec,
    MlpSpec,
    kernel_from_sqdist,
    mlp_apply,
    mlp_views,
    pairwise_sqdist,
)

LINKS = ("softplus", "exponential", "rectifier")
EXP_LINK_CLAMP = 30.0  # overflow guard for the exponential link


def apply_link(link: str, h: torch.Tensor) -> torch.Tensor:
    if link == "softplus":
        return torch.nn.functional.softplus(h)
    if link == "exponential":
        return torch.exp(torch.clamp(h, max=EXP_LINK_CLAMP))
    if link == "rectifier":
        return torch.relu(h)
    raise ConfigError(f"unknown link {link!r}")


def link_log_jet(link: str, h, hg, hdd, order: int):
    """Jet of log(eta(h(s))) from the jet of the latent field h.

    Per coordinate d:  grad_d = eta'(h) h_d / eta(h)
                       hess_d = [eta''(h) h_d^2 + eta'(h) h_dd] / eta(h) - grad_d^2
    """
    if link == "softplus":
        lam = torch.nn.functional.softplus(h)
        loglam = torch.log(lam)
        if order == 0:
            return loglam, None, None
        sig = torch.sigmoid(h)
        ratio = (sig / lam).unsqueeze(-1)
        grad = ratio * hg
        if order == 1:
            return loglam, grad, None
        eta2 = (sig * (1.0 - sig)).unsqueeze(-1)
        hess = (eta2 * hg * hg + sig.unsqueeze(-1) * hdd) / lam.unsqueeze(-1) - grad * grad
        return loglam, grad, hess
    if link == "exponential":
        active = (h < EXP_LINK_CLAMP).unsqueeze(-1)
        loglam = torch.clamp(h, max=EXP_LINK_CLAMP)
        if order == 0:
            return loglam, None, None
        grad = torch.where(active, hg, torch.zeros_like(hg))
        if order == 1:
            return loglam, grad, None
        hess = torch.where(active, hdd, torch.zeros_like(hdd))
        return loglam, grad, hess
    if link == "rectifier":
        if torch.any(h <= 0):
            raise SingularScoreError("rectifier link: intensity is zero at a scored point")
        loglam = torch.log(h)
        if order == 0:
            return loglam, None, None
        grad = hg / h.unsqueeze(-1)
        if order == 1:
            return loglam, grad, None
        hess = hdd / h.unsqueeze(-1) - grad * grad
        return loglam, grad, hess
    raise ConfigError(f"unknown link {link!r}")


class IntensityModel:
    """Shared numpy-facing surface over the torch functional core."""

    params: ParamVector

    # -- torch core (overridden per model) ---------------------------------
    def torch_intensity(self, s: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def torch_loglam_jet(self, s, theta, order: int, create_graph: bool = False):
        raise NotImplementedError

    # -- evaluation fan-out --------------------------------------------------
    def intensity_batch(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        theta = self.params.torch_values()
        out = np.empty(pts.shape[0])
        with torch.no_grad():
            for a in range(0, pts.shape[0], 65536):
                chunk = torch.as_tensor(pts[a:a + 65536])
                out[a:a + 65536] = self.torch_intensity(chunk, theta).numpy()
        return out

    def intensity(self, point) -> float:
        return float(self.intensity_batch(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])

    def log_intensity_jet(self, point, order: int = 2) -> InputJet:
        s = torch.as_tensor(np.asarray(point, dtype=np.float64).reshape(1, 3))
        theta = self.params.torch_values()
        loglam, grad, hess = self.torch_loglam_jet(s, theta, order=order)
        return InputJet(
            float(loglam[0].detach()),
            grad[0].detach().numpy() if grad is not None else np.zeros(3),
            hess[0].detach().numpy() if hess is not None else None,
        )


def _minmax_bounds(cov: np.ndarray):
    lo = cov.min(axis=0)
    hi = cov.max(axis=0)
    return lo, hi


def _normalize_cov(cov: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return (cov - lo) / span


@dataclass
class DkmppModel(IntensityModel):
    """Deep-kernel mixture intensity with a positive link."""

    representative: RepresentativeSet
    kernel: BaseKernelSpec
    f_spec: MlpSpec
    g_spec: MlpSpec
    link: str
    params: ParamVector
    z_lo: np.ndarray = None
    z_hi: np.ndarray = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}; choose from {LINKS}")
        K = self.representative.K
        if self.f_spec.in_width != 3 + K:
            raise ConfigError(
                f"weight net input width {self.f_spec.in_width} != 3 + covariate dim {K}"
            )
        if self.g_spec.in_width != 3:
            raise ConfigError("transform net must take 3-vector inputs")
        if self.z_lo is None or self.z_hi is None:
            self.z_lo, self.z_hi = _minmax_bounds(self.representative.covariates)
        self.z_lo = np.asarray(self.z_lo, dtype=np.float64).reshape(K)
        self.z_hi = np.asarray(self.z_hi, dtype=np.float64).reshape(K)
        zn = _normalize_cov(self.representative.covariates, self.z_lo, self.z_hi)
        self._U = torch.tensor(self.representative.points)
        self._fin = torch.tensor(np.concatenate([self.representative.points, zn], axis=1))
        self._cache_version = -1
        self._cache = None

    @property
    def phi(self) -> float:
        return float(np.exp(self.params.block("log_phi")[0]))

    def _theta_parts(self, theta: torch.Tensor):
        phi = torch.exp(theta[self.params.slice_of("log_phi")])[0]
        f_layers = mlp_views(self.f_spec, "f", self.params, theta)
        g_layers = mlp_views(self.g_spec, "g", self.params, theta)
        return phi, f_layers, g_layers

    def mixture_weights_t(self, theta: torch.Tensor) -> torch.Tensor:
        _, f_layers, _ = self._theta_parts(theta)
        return mlp_apply(f_layers, self._fin).reshape(-1)

    def torch_latent(self, s: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        phi, f_layers, g_layers = self._theta_parts(theta)
        fj = mlp_apply(f_layers, self._fin).reshape(-1)
        gs = mlp_apply(g_layers, s)
        gu = mlp_apply(g_layers, self._U)
        q = pairwise_sqdist(gs, gu)
        return kernel_from_sqdist(self.kernel.kind, phi, q) @ fj

    def _cached_parts(self):
        # f_j and g(u_j) are query-independent; recompute only when params move.
        if self._cache_version != self.params.version:
            theta = self.params.torch_values()
            with torch.no_grad():
                phi, f_layers, g_layers = self._theta_parts(theta)
                fj = mlp_apply(f_layers, self._fin).reshape(-1)
                gu = mlp_apply(g_layers, self._U)
            self._cache = (phi, fj, gu, g_layers)
            self._cache_version = self.params.version
        return self._cache

    def torch_intensity(self, s: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        return apply_link(self.link, self.torch_latent(s, theta))

    def intensity_batch(self, points: np.ndarray) -> np.ndarray:
        # Evaluation fan-out path reusing the per-parameter-state cache of
        # phi, f_j and g(u_j) (they do not depend on the query points).
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        phi, fj, gu, g_layers = self._cached_parts()
        out = np.empty(pts.shape[0])
        with torch.no_grad():
            for a in range(0, pts.shape[0], 65536):
                gs = mlp_apply(g_layers, torch.as_tensor(pts[a:a + 65536]))
                q = pairwise_sqdist(gs, gu)
                lam = apply_link(self.link, kernel_from_sqdist(self.kernel.kind, phi, q) @ fj)
                out[a:a + 65536] = lam.numpy()
        return out

    def latent_batch(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        theta = self.params.torch_values()
        with torch.no_grad():
            return self.torch_latent(torch.as_tensor(pts), theta).numpy()

    def torch_loglam_jet(self, s, theta, order: int, create_graph: bool = False):
        h, hg, hdd = input_jet_batch(
            lambda pts: self.torch_latent(pts, theta), s, order=order,
            create_graph=create_graph,
        )
        return link_log_jet(self.link, h, hg, hdd, order)


@dataclass
class DmppModel(IntensityModel):
    """Kernel mixture with identity transform and identity link.

    Weights pass through softplus so the intensity is a nonnegative mixture,
    which keeps the rate integrable in closed form for the RBF kernel.
    """

    representative: RepresentativeSet
    kernel: BaseKernelSpec
    f_spec: MlpSpec
    params: ParamVector
    z_lo: np.ndarray = None
    z_hi: np.ndarray = None

    def __post_init__(self):
        K = self.representative.K
        if self.f_spec.in_width != 3 + K:
            raise ConfigError(
                f"weight net input width {self.f_spec.in_width} != 3 + covariate dim {K}"
            )
        if self.z_lo is None or self.z_hi is None:
            self.z_lo, self.z_hi = _minmax_bounds(self.representative.covariates)
        zn = _normalize_cov(self.representative.covariates, self.z_lo, self.z_hi)
        self._U = torch.tensor(self.representative.points)
        self._fin = torch.tensor(np.concatenate([self.representative.points, zn], axis=1))

    @property
    def phi(self) -> float:
        return float(np.exp(self.params.block("log_phi")[0]))

    def mixture_weights_t(self, theta: torch.Tensor) -> torch.Tensor:
        f_layers = mlp_views(self.f_spec, "f", self.params, theta)
        raw = mlp_apply(f_layers, self._fin).reshape(-1)
        return torch.nn.functional.softplus(raw)

    def torch_intensity(self, s: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        phi = torch.exp(theta[self.params.slice_of("log_phi")])[0]
        wj = self.mixture_weights_t(theta)
        q = pairwise_sqdist(s, self._U)
        return kernel_from_sqdist(self.kernel.kind, phi, q) @ wj

    def torch_loglam_jet(self, s, theta, order: int, create_graph: bool = False):
        lam, lg, ldd = input_jet_batch(
            lambda pts: self.torch_intensity(pts, theta), s, order=order,
            create_graph=create_graph,
        )
        if torch.any(lam <= 0):
            raise SingularScoreError("mixture intensity vanished at a scored point")
        loglam = torch.log(lam)
        if order == 0:
            return loglam, None, None
        grad = lg / lam.unsqueeze(-1)
        if order == 1:
            return loglam, grad, None
        hess = ldd / lam.unsqueeze(-1) - grad * grad
        return loglam, grad, hess

    def exact_compensator_t(self, theta: torch.Tensor, window: Window) -> torch.Tensor:
        if self.kernel.kind != "rbf":
            raise ConfigError("closed-form compensator requires the rbf kernel")
        phi = torch.exp(theta[self.params.slice_of("log_phi")])[0]
        wj = self.mixture_weights_t(theta)
        return (wj * rbf_box_integral_t(phi, self._U, window)).sum()

    def exact_compensator(self, window: Window) -> float:
        with torch.no_grad():
            return float(self.exact_compensator_t(self.params.torch_values(), window))


@dataclass
class HomoPoissonModel(IntensityModel):
    """Constant-rate model; the rate is exp(log_rate) so it stays positive."""

    params: ParamVector

    @staticmethod
    def from_rate(rate: float) -> "HomoPoissonModel":
        if rate <= 0:
            raise ConfigError(f"rate must be positive, got {rate}")
        return HomoPoissonModel(concat_param_blocks([("log_rate", [math.log(rate)])]))

    @property
    def rate(self) -> float:
        return float(np.exp(self.params.block("log_rate")[0]))

    def torch_intensity(self, s: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        rate = torch.exp(theta[self.params.slice_of("log_rate")])[0]
        return rate.expand(s.shape[0]) + 0.0 * s.sum(-1)

    def torch_loglam_jet(self, s, theta, order: int, create_graph: bool = False):
        log_rate = theta[self.params.slice_of("log_rate")][0]
        loglam = log_rate.expand(s.shape[0]) + 0.0 * s.sum(-1)
        zeros = torch.zeros_like(s)
        if order == 0:
            return loglam, None, None
        if order == 1:
            return loglam, zeros, None
        return loglam, zeros, zeros


class ScaledIntensity(IntensityModel):
    """Wrap a model as c * lambda (c > 0), applied after the link.

    log(c * lambda) differs from log(lambda) by a constant, so input scores
    and curvatures are carried over unchanged (the exact chain rule).
    """

    def __init__(self, base: IntensityModel, c: float):
        if c <= 0:
            raise ConfigError("scale must be positive")
        self.base = base
        self.c = float(c)

    @property
    def params(self) -> ParamVector:
        return self.base.params

    def torch_intensity(self, s, theta):
        return self.c * self.base.torch_intensity(s, theta)

    def torch_loglam_jet(self, s, theta, order, create_graph: bool = False):
        loglam, grad, hess = self.base.torch_loglam_jet(s, theta, order, create_graph)
        return loglam + math.log(self.c), grad, hess


# ---------------------------------------------------------------------------
# Spec operations
# ---------------------------------------------------------------------------


def latent_field(model: DkmppModel, s) -> float:
    """Kernel-mixture field h(s) = sum_j f_j k(s, u_j) before the link."""
    return float(model.latent_batch(np.asarray(s, dtype=np.float64).reshape(1, 3))[0])


def intensity(model: IntensityModel, s) -> float:
    return model.intensity(s)


def log_intensity_jet(model: IntensityModel, s, order: int = 2) -> InputJet:
    return model.log_intensity_jet(s, order=order)


def compensator_mc(model: IntensityModel, window: Window, n_samples: int, seed: int) -> float:
    """Monte-Carlo intensity integral: volume * mean(lambda) over uniform points."""
    pts = _uniform_points(window, n_samples, seed)
    lam = model.intensity_batch(pts)
    return window.volume() * float(np.mean(lam))


def compensator_mc_t(
    model: IntensityModel, theta: torch.Tensor, window: Window, n_samples: int, seed: int
) -> torch.Tensor:
    """Differentiable Monte-Carlo compensator (same points as compensator_mc)."""
    pts = torch.as_tensor(_uniform_points(window, n_samples, seed))
    lam = model.torch_intensity(pts, theta)
    return window.volume() * lam.mean()


def _uniform_points(window: Window, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    return rng.uniform(window.lows, window.highs, size=(n, 3))


def rbf_box_integral(phi: float, u, window: Window) -> float:
    """Exact integral over the window of exp(-phi * ||s - u||^2).

    Factorizes per axis into sqrt(pi/phi)/2 * [erf(sqrt(phi)(hi-u)) - erf(sqrt(phi)(lo-u))].
    """
    u = np.asarray(u, dtype=np.float64).reshape(3)
    if phi <= 0:
        raise ConfigError("phi must be positive")
    root = math.sqrt(phi)
    total = 1.0
    for (lo, hi, _), ud in zip(window.axes(), u):
        total *= 0.5 * math.sqrt(math.pi / phi) * (
            np_erf(root * (hi - ud)) - np_erf(root * (lo - ud))
        )
    return float(total)


def rbf_box_integral_t(phi: torch.Tensor, u: torch.Tensor, window: Window) -> torch.Tensor:
    """Batched differentiable version of rbf_box_integral for (J, 3) centers."""
    lows = torch.as_tensor(window.lows)
    highs = torch.as_tensor(window.highs)
    root = torch.sqrt(phi)
    factors = 0.5 * torch.sqrt(math.pi / phi) * (
        torch.erf(root * (highs - u)) - torch.erf(root * (lows - u))
    )
    return factors.prod(dim=-1)


def fit_homopoisson(train: SequenceSet, window: Window) -> HomoPoissonModel:
    """Closed-form constant-rate fit: total events / (sequences * volume)."""
    if train.n_sequences < 1:
        raise ConfigError("need at least one sequence")
    rate = train.n_events / (train.n_sequences * window.volume())
    if rate <= 0:
        warnings.warn("no events in training data; flooring rate at 1e-8")
        rate = 1e-8
    return HomoPoissonModel.from_rate(rate)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_dkmpp(
    representative: RepresentativeSet,
    kernel_kind: str = "rbf",
    phi_init: float = 1.0,
    link: str = "softplus",
    f_hidden=(8,),
    g_hidden=(8,),
    g_out: int = 3,
    seed: int = 0,
    normalize_covariates: bool = True,
) -> DkmppModel:
    K = representative.K
    f_spec = MlpSpec((3 + K, *f_hidden, 1))
    g_spec = MlpSpec((3, *g_hidden, g_out))
    rng = np.random.default_rng(seed)
    blocks = [("log_phi", [math.log(phi_init)])]
    blocks += f_spec.init_blocks("f", rng)
    blocks += g_spec.init_blocks("g", rng)
    params = concat_param_blocks(blocks)
    z_lo = z_hi = None
    if not normalize_covariates:
        z_lo = np.zeros(K)
        z_hi = np.ones(K)
    return DkmppModel(
        representative, BaseKernelSpec.create(kernel_kind, phi_init),
        f_spec, g_spec, link, params, z_lo=z_lo, z_hi=z_hi,
    )


def build_dmpp(
    representative: RepresentativeSet,
    kernel_kind: str = "rbf",
    phi_init: float = 1.0,
    f_hidden=(8,),
    seed: int = 0,
) -> DmppModel:
    K = representative.K
    f_spec = MlpSpec((3 + K, *f_hidden, 1))
    rng = np.random.default_rng(seed)
    blocks = [("log_phi", [math.log(phi_init)])]
    blocks += f_spec.init_blocks("f", rng)
    params = concat_param_blocks(blocks)
    return DmppModel(representative, BaseKernelSpec.create(kernel_kind, phi_init), f_spec, params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "dkmpp-checkpoint v1"


def _model_header(model: IntensityModel) -> dict:
    if isinstance(model, DkmppModel):
        return {
            "model": "dkmpp",
            "kernel": model.kernel.kind,
            "link": model.link,
            "f_widths": list(model.f_spec.widths),
            "g_widths": list(model.g_spec.widths),
            "rep_counts": list(model.representative.counts),
            "K": model.representative.K,
            "z_lo": [float(v) for v in model.z_lo],
            "z_hi": [float(v) for v in model.z_hi],
        }
    if isinstance(model, DmppModel):
        return {
            "model": "dmpp",
            "kernel": model.kernel.kind,
            "f_widths": list(model.f_spec.widths),
            "rep_counts": list(model.representative.counts),
            "K": model.representative.K,
            "z_lo": [float(v) for v in model.z_lo],
            "z_hi": [float(v) for v in model.z_hi],
        }
    if isinstance(model, HomoPoissonModel):
        return {"model": "homopoisson"}
    raise CheckpointError(f"cannot checkpoint model type {type(model).__name__}")


def save_checkpoint(model: IntensityModel, path) -> None:
    """Write a text checkpoint: structural header, then named value blocks."""
    header = _model_header(model)
    blocks = []
    if not isinstance(model, HomoPoissonModel):
        rep = model.representative
        blocks.append(("repr.points", rep.points.ravel()))
        blocks.append(("repr.covariates", rep.covariates.ravel()))
    for name in model.params.names:
        blocks.append((name, model.params.block(name)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_CKPT_MAGIC + "\n")
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name, values in blocks:
            arr = np.asarray(values, dtype=np.float64).ravel()
            fh.write(f"block {name} {arr.size}\n")
            for v in arr:
                fh.write(fmt(v) + "\n")


def load_checkpoint(path) -> IntensityModel:
    """Rebuild a model from a checkpoint, verifying structural consistency."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        header = json.loads(lines[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    blocks = {}
    order = []
    i = 2
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "block":
            raise CheckpointError(f"{path}: expected 'block <name> <len>', got {line!r}")
        name, length = parts[1], int(parts[2])
        if i + length > len(lines):
            raise CheckpointError(f"{path}: block {name} truncated")
        blocks[name] = np.array([float(v) for v in lines[i:i + length]])
        order.append(name)
        i += length

    kind = header.get("model")
    if kind == "homopoisson":
        params = concat_param_blocks([("log_rate", blocks["log_rate"])])
        return HomoPoissonModel(params)

    counts = tuple(header["rep_counts"])
    K = int(header["K"])
    J = int(np.prod(counts))
    try:
        rep = RepresentativeSet(
            blocks["repr.points"].reshape(J, 3),
            blocks["repr.covariates"].reshape(J, K),
            counts,
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: representative blocks inconsistent ({exc})") from exc

    param_names = [n for n in order if not n.startswith("repr.")]
    params = concat_param_blocks([(n, blocks[n]) for n in param_names])

    if kind == "dkmpp":
        f_spec = MlpSpec(tuple(header["f_widths"]))
        g_spec = MlpSpec(tuple(header["g_widths"]))
        model = DkmppModel(
            rep, BaseKernelSpec(header["kernel"], 0.0),
            f_spec, g_spec, header["link"], params,
            z_lo=np.array(header["z_lo"]), z_hi=np.array(header["z_hi"]),
        )
    elif kind == "dmpp":
        f_spec = MlpSpec(tuple(header["f_widths"]))
        model = DmppModel(
            rep, BaseKernelSpec(header["kernel"], 0.0), f_spec, params,
            z_lo=np.array(header["z_lo"]), z_hi=np.array(header["z_hi"]),
        )
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")

    expected = {n: s for n, s in zip(model.params.names, np.diff(model.params.offsets))}
    for name, size in expected.items():
        if name not in blocks or blocks[name].size != size:
            raise CheckpointError(
                f"{path}: structural mismatch for block {name!r} "
                f"(expected length {size})"
            )
    return model
