"""Deployment-time domain uncertainty.

The score compares the perturbation scale a target batch asks for with the
one learned on the source: ``mean |(sigma_T - sigma_S) / sigma_S|``.
The perturbation head is input-independent, so ``sigma_T`` is read off a
private copy of ``phi_p`` after a few label-free ascent steps on the probe
batch. The objective is the training-time adversary with the model's own
clean predictions standing in for labels: ``KL(p(x) || p(x+))``. A domain
where the classifier is fragile pulls sigma further from its source value.

The reference it is checked against is the predictive variance over many
stochastic forwards.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from . import perturbation as pt
from ._rng import as_generator
from .augmentation import AuxModel
from .backbone import Backbone
from .errors import ConfigError


@dataclass
class UncertaintyReport:
    score: float
    sigma_source: Tensor
    sigma_target: Tensor
    baseline_variance: float | None = None
    wall_time_score: float = 0.0
    wall_time_baseline: float | None = None

    def row(self) -> dict:
        return {"score": self.score, "baseline_variance": self.baseline_variance,
                "wall_time_score": self.wall_time_score, "wall_time_baseline": self.wall_time_baseline}


def domain_uncertainty_score(sigma_target, sigma_source) -> float:
    st = torch.as_tensor(sigma_target, dtype=torch.float64)
    ss = torch.as_tensor(sigma_source, dtype=torch.float64)
    if st.shape != ss.shape:
        raise ConfigError(f"sigma shapes differ: target {tuple(st.shape)}, source {tuple(ss.shape)}")
    if (ss == 0).any():
        raise ConfigError("sigma_source has a zero entry; the score cannot be normalized")
    return float(((st - ss) / ss).abs().mean())


def _perturbed_logits(model: Backbone, head: pt.PerturbationHead, h0: Tensor, start: str,
                      generator: torch.Generator) -> Tensor:
    shifts = {}
    for k in head.names:
        d = pt.infer_gaussian(head, k)
        shape = (h0.shape[0],) + model.feature_shapes[k]
        shifts[k] = F.softplus(pt.draw(d, shape, "full", generator))
    return model(h0, shifts, start=start, h_start=h0).z


def infer_sigma_target(model: Backbone, aux: AuxModel, x: Tensor, steps: int = 10, lr: float = 1e-3,
                       seed: int = 0, batch_size: int | None = 32) -> Tensor:
    """sigma vector (all intercepts, network order) after `steps` phi_p-only ascent steps on `x`.

    The probe batch goes through the frozen trunk once; each step then uses
    a random minibatch of `batch_size` cached features (all of them when
    None). Neither `model` nor `aux` is modified. ``steps=0`` returns the
    source sigma.
    """
    if len(x) == 0:
        raise ConfigError("probe batch is empty")
    if steps < 0:
        raise ConfigError("adapt steps must be >= 0")
    if batch_size is not None and batch_size < 1:
        raise ConfigError("adapt batch size must be >= 1")
    head = copy.deepcopy(aux.phi_p)
    if steps == 0:
        return head.sigma_vector()
    g = as_generator(seed)
    first = head.names[0]
    params = list(head.parameters())
    states = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            h0 = model.trunk(x, first)
            logp0 = F.log_softmax(model(h0, {}, start=first, h_start=h0).z, dim=-1)
        n = len(h0) if batch_size is None else min(batch_size, len(h0))
        for _ in range(steps):
            idx = torch.randperm(len(h0), generator=g)[:n]
            logp = F.log_softmax(_perturbed_logits(model, head, h0[idx], first, g), dim=-1)
            kl = F.kl_div(logp, logp0[idx], log_target=True, reduction="batchmean")
            grads = torch.autograd.grad(kl, params)
            with torch.no_grad():
                for p, gr in zip(params, grads):
                    p.add_(gr, alpha=lr)
    finally:
        for p, s in zip(model.parameters(), states):
            p.requires_grad_(s)
    return head.sigma_vector()


@torch.no_grad()
def bayesian_baseline(model: Backbone, aux: AuxModel, x: Tensor, n_samples: int = 30, seed: int = 0) -> float:
    """Variance of the softmax over `n_samples` stochastic forwards, averaged over batch and classes."""
    if n_samples < 2:
        raise ConfigError("n_samples must be >= 2")
    if len(x) == 0:
        raise ConfigError("probe batch is empty")
    g = as_generator(seed)
    probs = []
    for _ in range(n_samples):
        shifts = {}
        for k in aux.phi_p.names:
            d = pt.infer_gaussian(aux.phi_p, k)
            shifts[k] = F.softplus(pt.draw(d, (len(x),) + model.feature_shapes[k], "full", g))
        probs.append(model(x, shifts).y_hat)
    return float(torch.stack(probs).var(dim=0, unbiased=True).mean())


def uncertainty_report(model: Backbone, aux: AuxModel, x: Tensor, adapt_steps: int = 10, adapt_lr: float = 1e-3,
                       n_samples: int | None = 30, seed: int = 0, adapt_batch: int | None = 32) -> UncertaintyReport:
    """Score plus (optionally, when `n_samples` is set) the sampling baseline, each timed."""
    sigma_s = aux.sigma_vector().detach()
    t0 = time.perf_counter()
    sigma_t = infer_sigma_target(model, aux, x, adapt_steps, adapt_lr, seed, adapt_batch)
    score = domain_uncertainty_score(sigma_t, sigma_s)
    t_score = time.perf_counter() - t0
    var, t_base = None, None
    if n_samples:
        t0 = time.perf_counter()
        var = bayesian_baseline(model, aux, x, n_samples, seed)
        t_base = time.perf_counter() - t0
    return UncertaintyReport(score, sigma_s, sigma_t, var, t_score, t_base)
