"""Adversarial domain augmentation.

Two generators of fictitious domains live here:

* uncertainty mode: an auxiliary model ``psi = (phi_p, phi_m)`` perturbs
  intermediate features and mixes labels; ``psi`` is pushed by gradient
  ascent on ``L_task(S+) - beta * ||z - z+||^2`` with the classifier frozen.
* mada mode: raw inputs are moved by gradient ascent on
  ``L_task - alpha * L_const + beta * L_relax``, where ``L_relax`` is the
  reconstruction error of a Wasserstein autoencoder fit to the source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import mixup as mx
from . import perturbation as pt
from ._rng import as_generator
from .backbone import Backbone, forward, soft_cross_entropy
from .errors import ConfigError, NumericError

LABEL_MISMATCH_PENALTY = 1e9


class AuxModel(nn.Module):
    """``psi``: perturbation head over every intercept point plus a mixup head on the first one."""

    def __init__(self, model: Backbone, init_log_sigma: float = 0.0):
        super().__init__()
        if not model.intercept_points:
            raise ConfigError("backbone has no intercept points to perturb")
        channels = {k: model.channels(k) for k in model.intercept_points}
        self.phi_p = pt.PerturbationHead(channels, init_log_sigma)
        self.phi_m = mx.MixupHead(channels[model.intercept_points[0]])

    @property
    def first(self) -> str:
        return self.phi_p.names[0]

    def sigma_vector(self) -> Tensor:
        return self.phi_p.sigma_vector()

    def mean_sigma(self, name: str | None = None) -> float:
        return float(torch.exp(self.phi_p.log_sigma[name or self.first].detach()).mean())


@dataclass
class AugmentSettings:
    perturb_mode: str = "full"
    mixup_mode: str = "learnable"
    rho: float = 0.9
    beta: float = 1.0
    relax: float = 1e-8
    attack_mixup: bool = True

    def __post_init__(self):
        if self.perturb_mode not in pt.MODES:
            raise ConfigError(f"unknown perturb mode {self.perturb_mode!r}; choose from {pt.MODES}")
        if self.mixup_mode not in mx.MODES:
            raise ConfigError(f"unknown mixup mode {self.mixup_mode!r}; choose from {mx.MODES}")
        if self.beta < 0:
            raise ConfigError("ada.beta must be >= 0")


@dataclass
class AugmentedBatch:
    trace: object
    y_plus: Tensor
    deltas: dict[str, Tensor]
    lam: Tensor | None
    mixup: mx.MixupParams | None = None


def sample_augmented(model: Backbone, aux: AuxModel, x: Tensor, y: Tensor, settings: AugmentSettings,
                     generator: torch.Generator, params=None) -> AugmentedBatch:
    """One draw of (h+, y+) for the whole batch, forwarded through `model`.

    `y` is one-hot (or soft). Draw order on `generator` is fixed: one
    perturbation tensor per intercept point in network order, then the
    Beta weights, then the smoothing gates.
    """
    n = x.shape[0]
    dists = {k: pt.infer_gaussian(aux.phi_p, k, mode=settings.perturb_mode) for k in aux.phi_p.names}
    shifts = {}
    for k, d in dists.items():
        e = pt.draw(d, (n,) + model.feature_shapes[k], settings.perturb_mode, generator)
        shifts[k] = F.softplus(e)
    lam, params_m, y_plus = None, None, y
    if settings.mixup_mode != "off":
        d0 = dists[aux.first]
        params_m = mx.infer_mixup_params(aux.phi_m, d0.mu, d0.sigma, settings.mixup_mode)
        lam = mx.sample_lambda(params_m, n, generator=generator).to(x.dtype)
        y_tilde = mx.smooth_label(y, settings.rho, params_m.tau, generator=generator)
        y_plus = lam[:, None] * y + (1 - lam[:, None]) * y_tilde
        # lam*h + (1-lam)*(h + s) == h + (1-lam)*s
        shifts = {k: (1 - lam).reshape((n,) + (1,) * (s.dim() - 1)) * s for k, s in shifts.items()}
    trace = forward(model, x, shifts, params)
    return AugmentedBatch(trace, y_plus, shifts, lam, params_m)


def ada_objective(model: Backbone, aux: AuxModel, x: Tensor, y: Tensor, settings: AugmentSettings,
                  generator: torch.Generator, params=None, return_parts: bool = False):
    """``L_task(theta; S+) - beta * mean ||z - z+||^2 + relax * mean ||h+ - h||^2``.

    The last term is the feature-space analogue of the WAE relaxation (tiny by
    default); set ``settings.relax = 0`` for the bare objective.
    """
    with torch.no_grad():
        z = forward(model, x, None, params).z
    aug = sample_augmented(model, aux, x, y, settings, generator, params)
    task = soft_cross_entropy(aug.y_plus, aug.trace.z)
    constraint = ((z - aug.trace.z) ** 2).sum(-1).mean()
    relax = sum((s**2).flatten(1).sum(-1).mean() for s in aug.deltas.values())
    obj = task - settings.beta * constraint + settings.relax * relax
    if return_parts:
        return obj, {"task": task.detach(), "constraint": constraint.detach(), "relax": relax.detach()}
    return obj


def aux_attack_params(aux: AuxModel, settings: AugmentSettings) -> list[nn.Parameter]:
    ps = list(aux.phi_p.parameters())
    if settings.attack_mixup and settings.mixup_mode == "learnable":
        ps += list(aux.phi_m.parameters())
    return ps


def maximize_aux(model: Backbone, aux: AuxModel, x: Tensor, y: Tensor, steps: int, lr: float,
                 settings: AugmentSettings, generator: torch.Generator, params=None,
                 history: list | None = None) -> AuxModel:
    """Gradient ascent on :func:`ada_objective` over psi, classifier frozen. Updates `aux` in place."""
    if steps < 1:
        raise ConfigError("ascent steps must be >= 1")
    targets = aux_attack_params(aux, settings)
    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        for t in range(steps):
            obj = ada_objective(model, aux, x, y, settings, generator, params)
            if not torch.isfinite(obj):
                raise NumericError("non-finite adversarial objective", iteration=t, loss=float(obj.detach()))
            grads = torch.autograd.grad(obj, targets, allow_unused=True)
            with torch.no_grad():
                for p, g in zip(targets, grads):
                    if g is not None:
                        p.add_(lr * g)
            if history is not None:
                history.append(float(obj))
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return aux


# --------------------------------------------------------------------------
# raw-input pipeline (M-ADA)


@dataclass
class AdaConfig:
    mode: str = "mada"
    beta: float = 1.0
    alpha_mada: float = 1.0
    beta_relax: float = 1e-8
    gamma: float = 1.0
    t_ascent: int = 15

    def __post_init__(self):
        if self.mode not in ("uncertainty", "mada"):
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")
        if self.beta < 0 or self.alpha_mada < 0:
            raise ConfigError("constraint coefficients must be >= 0")
        if self.gamma < 0:
            raise ConfigError("ascent rate must be >= 0")
        if self.t_ascent < 1:
            raise ConfigError("t_ascent must be >= 1")


class WAEModel(nn.Module):
    """Encoder Q, decoder G and a standard-normal prior over the bottleneck."""

    def __init__(self, input_shape, bottleneck: int = 8, hidden=(256,), output: str = "sigmoid",
                 lambda_wae: float = 1.0, seed: int = 0):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.bottleneck = bottleneck
        self.lambda_wae = lambda_wae
        self.output = output
        d = math.prod(self.input_shape)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = _mlp([d, *hidden, bottleneck])
            self.decoder = _mlp([bottleneck, *hidden[::-1], d])
        self.history: list[dict] = []

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x.flatten(1))

    def decode(self, e: Tensor) -> Tensor:
        out = self.decoder(e)
        if self.output == "sigmoid":
            out = torch.sigmoid(out)
        return out.reshape((-1,) + self.input_shape)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def _mlp(widths):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _median_bandwidth(x: Tensor, y: Tensor) -> Tensor:
    pooled = torch.cat([x, y]).detach()
    d = torch.cdist(pooled, pooled)
    off = d[~torch.eye(len(pooled), dtype=torch.bool)]
    h = off.median() if off.numel() else torch.tensor(1.0)
    return h.clamp_min(1e-6)


def mmd(x: Tensor, y: Tensor, bandwidth: float | Tensor | None = None) -> Tensor:
    """Unbiased squared MMD with an RBF kernel; median-distance bandwidth by default."""
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ConfigError("MMD needs at least two samples per side")
    h = _median_bandwidth(x, y) if bandwidth is None else torch.as_tensor(bandwidth, dtype=x.dtype)

    def k(a, b):
        return torch.exp(-torch.cdist(a, b) ** 2 / (2 * h**2))

    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    sxx = (kxx.sum() - kxx.diagonal().sum()) / (m * (m - 1))
    syy = (kyy.sum() - kyy.diagonal().sum()) / (n * (n - 1))
    return sxx + syy - 2 * kxy.mean()


def reconstruction_error(x: Tensor, wae: WAEModel) -> Tensor:
    """Per-example ``||x - V(x)||^2``."""
    return ((wae(x) - x) ** 2).flatten(1).sum(-1)


def wae_train(data: Tensor, wae: WAEModel, epochs: int = 1, batch_size: int = 64, lr: float = 1e-3,
              seed: int = 0) -> WAEModel:
    """Minimize ``||G(Q(x)) - x||^2 + lambda * MMD(Q(x), P(e))`` with Adam.

    Batch order and prior draws come from two independent streams seeded by
    `seed`, so ``lambda = 0`` reproduces plain autoencoder training exactly.
    """
    order_g = as_generator(seed)
    prior_g = as_generator(seed + 1)
    opt = torch.optim.Adam(wae.parameters(), lr=lr)
    n = len(data)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=order_g)
        rec_sum, div_sum, count = 0.0, 0.0, 0
        for i in range(0, n, batch_size):
            xb = data[perm[i:i + batch_size]]
            e = wae.encode(xb)
            rec = ((wae.decode(e) - xb) ** 2).flatten(1).sum(-1).mean()
            loss = rec
            div = torch.zeros(())
            if wae.lambda_wae > 0 and len(xb) >= 2:
                prior = torch.randn(e.shape, generator=prior_g, dtype=e.dtype)
                div = mmd(e, prior)
                loss = rec + wae.lambda_wae * div
            if not torch.isfinite(loss):
                raise NumericError("WAE training diverged", iteration=epoch, loss=float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec_sum += float(rec) * len(xb)
            div_sum += float(div) * len(xb)
            count += len(xb)
        wae.history.append({"epoch": len(wae.history), "reconstruction": rec_sum / count,
                            "divergence": div_sum / count})
    return wae


def relax_loss(x_plus: Tensor, wae: WAEModel) -> Tensor:
    """Batch-mean reconstruction error of the frozen autoencoder."""
    return reconstruction_error(x_plus, wae).mean()


def const_loss(z: Tensor, z_plus: Tensor, y: Tensor, y_plus: Tensor, reduction: str = "mean") -> Tensor:
    """``0.5 * ||z - z+||^2`` plus a 1e9 sentinel wherever the labels differ."""
    sq = 0.5 * ((z - z_plus) ** 2).sum(-1)
    differ = (y != y_plus)
    if differ.dim() > sq.dim():
        differ = differ.flatten(sq.dim()).any(-1)
    loss = sq + LABEL_MISMATCH_PENALTY * differ.to(sq.dtype)
    return loss.mean() if reduction == "mean" else loss


def mada_generate(model: Backbone, wae: WAEModel | None, x: Tensor, y: Tensor, cfg: AdaConfig,
                  params=None) -> Tensor:
    """Move raw inputs by ``x+ <- x+ + gamma * grad L_ADA`` for `cfg.t_ascent` steps.

    ``L_ADA = L_task - alpha * L_const + beta_relax * L_relax`` summed over the
    batch, so each example's step does not depend on batch size. Labels are
    integer class ids and are carried over unchanged; pixels are clamped to [0, 1].
    """
    if cfg.mode != "mada":
        raise ConfigError("mada_generate requires AdaConfig(mode='mada')")
    y1h = F.one_hot(y.long(), model.num_classes).to(x.dtype)
    frozen = [p for p in model.parameters() if p.requires_grad]
    if wae is not None:
        frozen += [p for p in wae.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            z = forward(model, x, None, params).z
        x_plus = x.detach().clone()
        for _ in range(cfg.t_ascent):
            x_plus.requires_grad_(True)
            z_plus = forward(model, x_plus, None, params).z
            task = soft_cross_entropy(y1h, z_plus, reduction="sum")
            const = const_loss(z, z_plus, y, y, reduction="none").sum()
            obj = task - cfg.alpha_mada * const
            if wae is not None and cfg.beta_relax:
                obj = obj + cfg.beta_relax * reconstruction_error(x_plus, wae).sum()
            (g,) = torch.autograd.grad(obj, x_plus)
            with torch.no_grad():
                x_plus = (x_plus + cfg.gamma * g).clamp_(0.0, 1.0)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return x_plus.detach()


@dataclass
class AugmentedDomain:
    """A stored fictitious domain: raw tensors (mada) or a frozen psi snapshot (uncertainty)."""

    kind: str
    inputs: Tensor | None = None
    labels: Tensor | None = None
    psi_state: dict = field(default_factory=dict)
