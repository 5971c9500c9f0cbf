"""Reconstruction, KL smoothness and contrastive losses plus their weighted total.

Voxel sums (not means) are used inside the reconstruction and smoothness
terms; ``sigma2`` and ``alpha`` carry the scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .errors import ConfigurationError, DimensionError, DomainError
from .ndtensor import Tensor

__all__ = [
    "LossConfig",
    "recon_loss",
    "kl_smooth_loss",
    "kl_monte_carlo",
    "contrastive_loss",
    "gradient_penalty",
    "total_loss",
]


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    sigma2: float = 1.0
    tau: float = 0.1
    symmetric: bool = False
    grad_penalty: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not self.sigma2 > 0:
            raise ConfigurationError(f"sigma2 must be > 0, got {self.sigma2}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.grad_penalty < 0:
            raise ConfigurationError(f"grad_penalty must be >= 0, got {self.grad_penalty}")


def recon_loss(reference, warped, sigma2: float = 1.0) -> Tensor:
    """Sum of squared voxel differences scaled by 1 / (2 sigma2)."""
    reference, warped = nt._as_tensor(reference), nt._as_tensor(warped)
    if reference.shape != warped.shape:
        raise DimensionError(f"recon_loss: shapes {reference.shape} and {warped.shape} differ")
    diff = reference - warped
    return nt.reduce_sum(diff * diff) * (1.0 / (2.0 * sigma2))


def kl_smooth_loss(mu, logvar) -> Tensor:
    """0.5 * sum(var + mu^2 - log var) over every voxel component.

    This is the closed-form KL to a unit-variance prior without the constant
    ``-k/2``, so its minimum is ``k/2`` for ``k`` components.
    """
    mu, logvar = nt._as_tensor(mu), nt._as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl_smooth_loss: mu {mu.shape} and logvar {logvar.shape} differ")
    if not np.all(np.isfinite(logvar.data)):
        raise DomainError("kl_smooth_loss: logvar contains non-finite values")
    return nt.reduce_sum(nt.exp(logvar) + mu * mu - logvar) * 0.5


def kl_monte_carlo(mu, logvar, samples: int, rng: np.random.Generator, chunk: int = 4096):
    """Monte Carlo KL(q || N(0, I)) for a diagonal Gaussian q.

    Returns ``(estimate, standard_error)``.
    """
    mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=np.float64).reshape(-1)
    logvar = np.asarray(logvar.data if isinstance(logvar, Tensor) else logvar, dtype=np.float64).reshape(-1)
    if mu.shape != logvar.shape:
        raise DimensionError("kl_monte_carlo: mu and logvar shapes differ")
    if samples < 1:
        raise ConfigurationError(f"kl_monte_carlo: samples must be >= 1, got {samples}")
    std = np.exp(0.5 * logvar)
    values = np.empty(samples)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        eps = rng.standard_normal((m, mu.size))
        z = mu + std * eps
        # log q(z) - log p(z); the 2*pi terms cancel
        values[done : done + m] = (-0.5 * logvar - 0.5 * eps**2 + 0.5 * z**2).sum(axis=1)
        done += m
    stderr = values.std(ddof=1) / math.sqrt(samples) if samples > 1 else float("inf")
    return float(values.mean()), float(stderr)


def contrastive_loss(projections, positive_pairs, tau: float = 0.1, symmetric: bool = False) -> Tensor:
    """Temperature-scaled cosine-similarity contrastive loss, averaged over anchors.

    ``projections`` is a [M, P] tensor (or a list of [P] tensors).  Each
    ``(anchor, positive)`` index pair contributes
    ``-sim(a, p)/tau + log sum_{k != a} exp(sim(a, k)/tau)``; the positive is
    part of the denominator.  An anchor may appear in several pairs, e.g. a
    shared atlas under ``symmetric=True``.
    """
    if isinstance(projections, (list, tuple)):
        projections = nt.concat([nt.reshape(nt._as_tensor(p), (1, -1)) for p in projections], axis=0)
    projections = nt._as_tensor(projections)
    if projections.ndim != 2:
        raise DimensionError(f"contrastive_loss: expected [M, P] projections, got {projections.shape}")
    m = projections.shape[0]
    if m < 2:
        raise ConfigurationError("contrastive_loss needs at least 2 projections")
    if not tau > 0:
        raise ConfigurationError(f"contrastive_loss: tau must be > 0, got {tau}")
    anchors = []
    for a, p in positive_pairs:
        if not (0 <= a < m and 0 <= p < m) or a == p:
            raise ConfigurationError(f"contrastive_loss: invalid positive pair ({a}, {p}) for {m} projections")
        anchors.append((a, p))
        if symmetric:
            anchors.append((p, a))
    if not anchors:
        raise ConfigurationError("contrastive_loss: no positive pairs given")

    unit = nt.normalize(projections, axis=1)
    logits = nt.matmul(unit, nt.transpose(unit)) * (1.0 / tau)
    shift = 1.0 / tau  # cosine similarity is at most 1
    total = None
    for a, p in anchors:
        others = [k for k in range(m) if k != a]
        row = nt.take(logits, (a, others))
        lse = nt.log(nt.reduce_sum(nt.exp(row - shift))) + shift
        term = lse - nt.take(logits, (a, p))
        total = term if total is None else total + term
    return total * (1.0 / len(anchors))


def gradient_penalty(mu) -> Tensor:
    """Sum of squared forward differences of the mean field along each spatial axis."""
    mu = nt._as_tensor(mu)
    total = None
    for ax in range(mu.ndim - 3, mu.ndim):
        lo = [slice(None)] * mu.ndim
        hi = [slice(None)] * mu.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        diff = nt.take(mu, tuple(hi)) - nt.take(mu, tuple(lo))
        term = nt.reduce_sum(diff * diff)
        total = term if total is None else total + term
    return total


def total_loss(recon=None, smooth=None, contrast=None, config: LossConfig | None = None, penalty=None):
    """Weighted sum ``recon + alpha*smooth + beta*contrast`` with a per-term breakdown.

    A term passed as ``None`` is disabled and contributes exactly 0.  The
    breakdown holds unweighted component values as floats.
    """
    config = LossConfig() if config is None else config
    parts = []
    breakdown = {"recon": 0.0, "smooth": 0.0, "contrast": 0.0}
    if recon is not None:
        parts.append(recon)
        breakdown["recon"] = recon.item()
    if smooth is not None:
        parts.append(smooth * config.alpha)
        breakdown["smooth"] = smooth.item()
    if contrast is not None:
        parts.append(contrast * config.beta)
        breakdown["contrast"] = contrast.item()
    if penalty is not None:
        parts.append(penalty * config.grad_penalty)
        breakdown["penalty"] = penalty.item()
    total = parts[0] if parts else Tensor(0.0)
    for part in parts[1:]:
        total = total + part
    breakdown["total"] = total.item()
    return total, breakdown
