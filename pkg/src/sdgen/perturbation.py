"""Variational feature perturbation: ``h+ = h + softplus(e)``, ``e ~ N(mu, sigma)``.

The learnable head holds one (mu, log_sigma) pair of per-channel vectors for
every intercept point of a backbone. Sampling uses the reparameterization
``e = mu + sigma * eps`` so gradients reach both vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ._rng import as_generator
from .errors import ConfigError

MODES = ("full", "deterministic", "random_mu", "random_sigma", "random_gaussian")


@dataclass
class GaussianPerturbation:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return torch.exp(self.log_sigma)


@dataclass
class PerturbationSample:
    e: Tensor
    seed: int | None = None


class PerturbationHead(nn.Module):
    """Per-channel (mu, log_sigma) for each intercept point.

    Parameter names are stable (``mu.<layer>``, ``log_sigma.<layer>``) so
    checkpoints stay readable across versions.
    """

    def __init__(self, channels: dict[str, int], init_log_sigma: float = 0.0):
        super().__init__()
        self.names = list(channels)
        self.mu = nn.ParameterDict({k: nn.Parameter(torch.zeros(c)) for k, c in channels.items()})
        self.log_sigma = nn.ParameterDict(
            {k: nn.Parameter(torch.full((c,), float(init_log_sigma))) for k, c in channels.items()}
        )

    def sigma_vector(self) -> Tensor:
        """All sigma entries, intercept points in network order, concatenated."""
        return torch.cat([torch.exp(self.log_sigma[k]) for k in self.names]).detach()


def infer_gaussian(head: PerturbationHead, name: str, batch_features: Tensor | None = None,
                   mode: str = "full") -> GaussianPerturbation:
    """Current perturbation distribution at intercept point `name` under ablation `mode`.

    `batch_features`, when given, is only checked for a matching channel count:
    the head is input-independent.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown perturbation mode {mode!r}; choose from {MODES}")
    mu, log_sigma = head.mu[name], head.log_sigma[name]
    if batch_features is not None and batch_features.shape[1] != mu.shape[0]:
        raise ConfigError(
            f"layer {name!r}: features have {batch_features.shape[1]} channels, head has {mu.shape[0]}"
        )
    if mode in ("random_mu", "random_gaussian"):
        mu = torch.zeros_like(mu)
    if mode in ("random_sigma", "random_gaussian"):
        log_sigma = torch.zeros_like(log_sigma)
    return GaussianPerturbation(mu, log_sigma)


def _channelwise(v: Tensor, shape) -> Tensor:
    # (C,) -> broadcastable against (N, C, ...)
    return v.reshape((1, v.shape[0]) + (1,) * (len(shape) - 2))


def sample(dist: GaussianPerturbation, seed: int | None = None, shape=None,
           generator: torch.Generator | None = None) -> PerturbationSample:
    """Reparameterized draw ``e = mu + sigma * eps``.

    `shape` is the full feature shape ``(N, C, ...)``; without it a single
    vector of the parameters' own shape is drawn. Either pass an integer seed
    (pure) or a generator (advances its state).
    """
    g = as_generator(seed, generator)
    if shape is None:
        eps = torch.randn(dist.mu.shape, generator=g, dtype=dist.mu.dtype)
        return PerturbationSample(dist.mu + dist.sigma * eps, seed)
    eps = torch.randn(tuple(shape), generator=g, dtype=dist.mu.dtype)
    mu, sigma = _channelwise(dist.mu, shape), _channelwise(dist.sigma, shape)
    return PerturbationSample(mu + sigma * eps, seed)


def draw(dist: GaussianPerturbation, shape, mode: str = "full",
         generator: torch.Generator | None = None) -> Tensor:
    """Pre-softplus perturbation `e` for feature `shape` under `mode`.

    ``deterministic`` skips sampling and returns mu itself; every other mode
    samples from `dist` (already adjusted by :func:`infer_gaussian`).
    """
    if mode == "deterministic":
        return _channelwise(dist.mu, shape).expand(tuple(shape))
    if mode not in MODES:
        raise ConfigError(f"unknown perturbation mode {mode!r}; choose from {MODES}")
    return sample(dist, shape=shape, generator=generator).e


def apply(h: Tensor, e) -> Tensor:
    """``h + softplus(e)``; `e` may be a tensor or a PerturbationSample."""
    if isinstance(e, PerturbationSample):
        e = e.e
    return h + F.softplus(e)


def perturb(h: Tensor, dist: GaussianPerturbation, mode: str = "full",
            generator: torch.Generator | None = None) -> Tensor:
    return apply(h, draw(dist, h.shape, mode, generator))


def kl_to_standard_normal(dist: GaussianPerturbation) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over channels."""
    var = torch.exp(2 * dist.log_sigma)
    return 0.5 * (var + dist.mu**2 - 1.0 - 2 * dist.log_sigma).sum()

