"""Learnable label mixup between source features and their perturbed copies.

``(a, b, tau)`` are inferred from the perturbation statistics, labels are
smoothed with probability ``tau``, and each example is interpolated with a
weight ``lambda ~ Beta(a, b)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ._rng import as_generator, child_seed
from .errors import ConfigError

MODES = ("learnable", "random", "off")
AB_FLOOR = 1e-2


@dataclass
class MixupParams:
    a: Tensor
    b: Tensor
    tau: Tensor


@dataclass
class MixedPair:
    h_mixed: Tensor
    y_mixed: Tensor
    lam: Tensor


class MixupHead(nn.Module):
    """Affine map from concatenated per-channel (mu, sigma) to raw (a, b, tau) logits.

    Zero-initialized, so it starts at ``a = b = softplus(0) + 0.01`` and ``tau = 0.5``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.affine = nn.Linear(2 * channels, 3)
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)

    def forward(self, mu: Tensor, sigma: Tensor) -> MixupParams:
        raw = self.affine(torch.cat([mu, sigma]))
        a = F.softplus(raw[0]) + AB_FLOOR
        b = F.softplus(raw[1]) + AB_FLOOR
        return MixupParams(a, b, torch.sigmoid(raw[2]))


def infer_mixup_params(head: MixupHead, mu: Tensor, sigma: Tensor, mode: str = "learnable") -> MixupParams:
    if mode == "random":
        one = torch.ones((), dtype=mu.dtype)
        return MixupParams(one, one.clone(), one.clone())
    if mode != "learnable":
        raise ConfigError(f"mixup parameters are undefined for mode {mode!r}")
    return head(mu, sigma)


def smooth_label(y: Tensor, rho: float, tau, seed: int | None = None,
                 generator: torch.Generator | None = None) -> Tensor:
    """Label smoothing applied per example with probability `tau`.

    When it fires, the true class gets `rho` and every other class gets
    ``(1 - rho) / (c - 1)``. The Bernoulli gate uses a straight-through
    estimator so that a learnable `tau` still receives a gradient; values are
    unaffected.
    """
    c = y.shape[-1]
    if not (1.0 / c < rho < 1.0):
        raise ConfigError(f"smoothing mass rho={rho} must lie in (1/c, 1) = ({1.0 / c:.4g}, 1)")
    g = as_generator(seed, generator)
    tau = torch.as_tensor(tau, dtype=y.dtype)
    u = torch.rand(y.shape[:-1], generator=g, dtype=y.dtype)
    gate = (u < tau).to(y.dtype)
    if tau.requires_grad:
        gate = gate + tau - tau.detach()
    smoothed = rho * y + (1.0 - rho) / (c - 1) * (1.0 - y)
    gate = gate.unsqueeze(-1)
    return (1.0 - gate) * y + gate * smoothed


def sample_lambda(params: MixupParams, n: int | None = None, seed: int | None = None,
                  generator: torch.Generator | None = None) -> Tensor:
    """Reparameterized Beta(a, b) draws; shape ``(n,)`` or scalar when `n` is None.

    torch's Beta sampler only reads the global RNG, so it runs inside a
    forked RNG seeded from `generator`/`seed`, which keeps the result a pure
    function of (a, b, seed).
    """
    a, b = torch.as_tensor(params.a), torch.as_tensor(params.b)
    if (a <= 0).any() or (b <= 0).any():
        raise ConfigError(f"Beta parameters must be positive, got a={a}, b={b}")
    g = as_generator(seed, generator)
    s = child_seed(g)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(s)
        # NaN parameters flow through to a NaN draw so callers can report the diverged loss
        beta = torch.distributions.Beta(a, b, validate_args=False)
        lam = beta.rsample(() if n is None else (n,))
    return lam.clamp(0.0, 1.0)


def mix(h: Tensor, h_plus: Tensor, y: Tensor, y_tilde: Tensor, lam) -> MixedPair:
    """``h_mixed = lam*h + (1-lam)*h_plus``, ``y_mixed = lam*y + (1-lam)*y_tilde``; `lam` per example or scalar."""
    lam = torch.as_tensor(lam, dtype=h.dtype)
    lam_h = lam.reshape(lam.shape + (1,) * (h.dim() - lam.dim())) if lam.dim() else lam
    lam_y = lam.reshape(lam.shape + (1,) * (y.dim() - lam.dim())) if lam.dim() else lam
    return MixedPair(lam_h * h + (1 - lam_h) * h_plus, lam_y * y + (1 - lam_y) * y_tilde, lam)
