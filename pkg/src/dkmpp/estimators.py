"""Training objectives and the optimization loop.

Three estimators over batches of sequences S_m with events s_{m,n}:

  mle:  (1/M) sum_m [ integral(lambda) - sum_n log lambda(s_{m,n}) ]
        with the integral estimated by Monte Carlo (fresh points per step).

  sm:   (1/M) sum_m sum_{n,d} [ 1/2 (d log lambda / d s)^2 + d^2 log lambda / d s^2 ]
        summed over all 3 N_m event coordinates; integration-free, but needs
        second derivatives.

  dsm:  (1/2M) sum_m sum_{n,d} ( -(s~ - s)/sigma^2 - d log lambda(s~)/d s )^2
        on Gaussian-perturbed events s~ = s + eps; the conditional score
        -(s~-s)/sigma^2 replaces the data score, so only first derivatives
        are needed.

The rate models here are history-free, so d log p(S)/d s_{m,n} reduces to the
per-event d log lambda(s)/d s (the compensator does not depend on event
coordinates).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np
import torch

from .domain import EventSequence, SequenceSet, Window
from .errors import ConfigError, NonFiniteError, NonPositiveIntensityError
from .models import IntensityModel, compensator_mc_t

ESTIMATOR_KINDS = ("mle", "sm", "dsm")

_VAL_SEED_SALT = 0x5EED


VALIDATION_MODES = ("own", "likelihood")


@dataclass
class EstimatorConfig:
    kind: str
    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 100
    mc_samples: int = 1000          # mle only
    sigma2: float = 0.01            # dsm only
    seed: int = 0
    exact_compensator: bool = False  # mle on rbf mixture models only
    validation: str = "own"          # epoch-selection criterion, see train()
    val_mc_samples: int = 200        # likelihood validation only

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"estimator kind {self.kind!r} not in {ESTIMATOR_KINDS}")
        if self.validation not in VALIDATION_MODES:
            raise ConfigError(f"validation {self.validation!r} not in {VALIDATION_MODES}")
        if self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        if self.mc_samples < 1 or self.val_mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class NoisySequence:
    """A clean sequence paired with its Gaussian-perturbed copy."""

    clean: EventSequence
    noisy: np.ndarray  # (n, 3); may leave the window, kept unsorted
    sigma2: float

    def __post_init__(self):
        noisy = np.asarray(self.noisy, dtype=np.float64).reshape(-1, 3)
        if noisy.shape != self.clean.events.shape:
            raise ConfigError("noisy events must match the clean sequence shape")
        noisy.setflags(write=False)
        object.__setattr__(self, "noisy", noisy)


def _sequences(batch) -> list:
    seqs = list(batch)
    if not seqs:
        raise ConfigError("empty batch")
    return seqs


def _concat_events(seqs) -> np.ndarray:
    arrays = [s.events for s in seqs if len(s)]
    if not arrays:
        return np.zeros((0, 3))
    return np.concatenate(arrays, axis=0)


def perturb(batch, sigma2: float, seed: int) -> List[NoisySequence]:
    """Add i.i.d. Gaussian noise N(0, sigma2) to every event coordinate.

    Noisy points may leave the window; they are kept as-is (truncation would
    invalidate the closed-form conditional score) and timestamps are not
    re-sorted (the likelihood is permutation-invariant for history-free
    intensities).
    """
    if sigma2 <= 0:
        raise ConfigError("sigma2 must be positive")
    rng = np.random.default_rng(seed)
    sigma = math.sqrt(sigma2)
    out = []
    for seq in _sequences(batch):
        noise = rng.normal(0.0, sigma, size=seq.events.shape)
        out.append(NoisySequence(seq, seq.events + noise, sigma2))
    return out


# ---------------------------------------------------------------------------
# Loss functionals (torch) and their numpy-facing wrappers
# ---------------------------------------------------------------------------


def _needs_graph(theta: torch.Tensor) -> bool:
    return theta.requires_grad or theta.grad_fn is not None


def mle_loss_t(
    model: IntensityModel,
    batch,
    theta: torch.Tensor,
    window: Window,
    mc_samples: int,
    seed: int,
    exact_compensator: bool = False,
) -> torch.Tensor:
    seqs = _sequences(batch)
    M = len(seqs)
    if exact_compensator:
        comp = model.exact_compensator_t(theta, window)
    else:
        comp = compensator_mc_t(model, theta, window, mc_samples, seed)
    events = _concat_events(seqs)
    if events.shape[0] == 0:
        return comp + 0.0 * theta.sum()
    lam = model.torch_intensity(torch.as_tensor(events), theta)
    bad = lam <= 0
    if bad.any():
        idx = int(torch.nonzero(bad)[0])
        raise NonPositiveIntensityError(
            f"intensity {float(lam[idx])} at event {events[idx].tolist()}"
        )
    return comp - torch.log(lam).sum() / M


def mle_loss(
    model: IntensityModel,
    batch,
    window: Window,
    mc_samples: int = 1000,
    seed: int = 0,
    exact_compensator: bool = False,
) -> float:
    """Negative mean per-sequence log-likelihood with an MC compensator."""
    with torch.no_grad():
        return float(
            mle_loss_t(model, batch, model.params.torch_values(), window,
                       mc_samples, seed, exact_compensator)
        )


def sm_loss_t(model: IntensityModel, batch, theta: torch.Tensor) -> torch.Tensor:
    seqs = _sequences(batch)
    M = len(seqs)
    events = _concat_events(seqs)
    if events.shape[0] == 0:
        return 0.0 * theta.sum()
    _, grad, hess = model.torch_loglam_jet(
        torch.as_tensor(events), theta, order=2, create_graph=_needs_graph(theta)
    )
    return (0.5 * grad * grad + hess).sum() / M


def sm_loss(model: IntensityModel, batch) -> float:
    """Integration-free score-matching loss over all event coordinates."""
    return float(sm_loss_t(model, batch, model.params.torch_values()).detach())


def dsm_loss_t(model: IntensityModel, noisy_batch, theta: torch.Tensor) -> torch.Tensor:
    pairs = _sequences(noisy_batch)
    M = len(pairs)
    sigma2 = pairs[0].sigma2
    if any(p.sigma2 != sigma2 for p in pairs):
        raise ConfigError("mixed sigma2 inside one noisy batch")
    noisy = [p.noisy for p in pairs if len(p.clean)]
    clean = [p.clean.events for p in pairs if len(p.clean)]
    if not noisy:
        return 0.0 * theta.sum()
    noisy = np.concatenate(noisy, axis=0)
    clean = np.concatenate(clean, axis=0)
    target = torch.as_tensor(-(noisy - clean) / sigma2)
    _, score, _ = model.torch_loglam_jet(
        torch.as_tensor(noisy), theta, order=1, create_graph=_needs_graph(theta)
    )
    diff = target - score
    return (diff * diff).sum() / (2.0 * M)


def dsm_loss(model: IntensityModel, noisy_batch) -> float:
    """Denoising score-matching loss against the closed-form conditional score."""
    return float(dsm_loss_t(model, noisy_batch, model.params.torch_values()).detach())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainEpoch:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def write_history(history: Sequence[TrainEpoch], path) -> None:
    from .domain import fmt

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,seconds\n")
        for row in history:
            fh.write(
                f"{row.epoch},{fmt(row.train_loss)},{fmt(row.val_loss)},{fmt(row.seconds)}\n"
            )


def _step_seed(seed: int, step: int) -> int:
    return (seed ^ step) & 0x7FFFFFFF


def _make_loss(config: EstimatorConfig, model, window: Window):
    if config.kind == "mle":
        def loss(batch, theta, seed):
            return mle_loss_t(model, batch, theta, window, config.mc_samples,
                              seed, config.exact_compensator)
    elif config.kind == "sm":
        def loss(batch, theta, seed):
            return sm_loss_t(model, batch, theta)
    else:
        def loss(batch, theta, seed):
            noisy = perturb(batch, config.sigma2, seed)
            return dsm_loss_t(model, noisy, theta)
    return loss


def train(
    model: IntensityModel,
    train_set: SequenceSet,
    val_set: SequenceSet,
    config: EstimatorConfig,
    window: Window = None,
):
    """Mini-batch Adam on the flat parameter vector.

    Per step: shuffle-derived mini-batch, fresh MC points / noise from
    seed XOR step.  Per epoch: mean step loss, validation loss under a fixed
    derived seed, wall seconds.  Returns (model holding the best-validation
    parameters, history).  epochs=0 returns the initial parameters and an
    empty history.

    config.validation picks the epoch-selection criterion: "own" scores the
    validation split with the estimator's own loss; "likelihood" scores it
    with the negative mean log-likelihood (fixed-seed MC compensator).  The
    score objectives are invariant under intensity rescaling, so their own
    losses cannot rank epochs along the scale direction; likelihood
    validation restores that sensitivity while training steps stay
    integration-free.
    """
    if train_set.n_sequences < 1:
        raise ConfigError("training set is empty")
    window = window or train_set.window
    loss_fn = _make_loss(config, model, window)
    if config.validation == "likelihood":
        def val_fn(batch, theta, seed):
            return mle_loss_t(model, batch, theta, window, config.val_mc_samples, seed)
    else:
        val_fn = loss_fn
    if config.epochs == 0:
        return model, []

    theta = model.params.torch_values(requires_grad=True)
    opt = torch.optim.Adam([theta], lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    shuffle_rng = np.random.default_rng(config.seed)
    val_seed = _step_seed(config.seed, _VAL_SEED_SALT)
    n = train_set.n_sequences
    history: List[TrainEpoch] = []
    best_val = math.inf
    best_values = None
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        losses = []
        for a in range(0, n, config.batch_size):
            batch = train_set.subset(perm[a:a + config.batch_size])
            value = loss_fn(batch, theta, _step_seed(config.seed, step))
            if not torch.isfinite(value):
                raise NonFiniteError(
                    f"non-finite {config.kind} loss at epoch {epoch} step {step}"
                )
            opt.zero_grad()
            value.backward()
            opt.step()
            losses.append(float(value.detach()))
            step += 1
        train_loss = float(np.mean(losses))
        val_loss = math.nan
        if val_set is not None and val_set.n_sequences > 0:
            # theta is detached so no parameter graph is built; the score
            # losses still build their own input-derivative graphs.
            val_loss = float(val_fn(val_set, theta.detach(), val_seed).detach())
            if val_loss < best_val:
                best_val = val_loss
                best_values = theta.detach().numpy().copy()
        history.append(TrainEpoch(epoch, train_loss, val_loss,
                                  time.perf_counter() - t0))
    final = best_values if best_values is not None else theta.detach().numpy()
    model.params.set_values(final)
    return model, history
