"""Meta-train on the source, meta-test on augmented domains, meta-update.

One iteration:

1. (uncertainty mode) push psi towards a harder domain by gradient ascent;
   (mada mode) periodically generate a new raw-input domain;
2. ``theta_hat = theta - eta * grad L(theta; S)``, keeping the graph;
3. ``L_total = L(theta; S) + sum_k L(theta_hat; S+_k)``, where each
   uncertainty-mode term averages K Monte-Carlo draws of (h+, y+);
4. one optimizer step on ``grad L_total`` w.r.t. theta (and psi).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
from torch import Tensor

from . import augmentation as aug
from . import perturbation as pt
from ._rng import as_generator
from .backbone import Backbone, build_backbone, forward, one_hot, soft_cross_entropy
from .config import RunConfig
from .data import Dataset
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "loss_meta_train", "loss_meta_test_mean", "kl_surrogate", "mean_sigma",
                  "accuracy_source_val")


@dataclass
class MetaLossReport:
    loss_meta_train: float
    losses_meta_test: list[float]
    loss_total: float
    kl_surrogate: float | None = None


def inner_step(params: Mapping[str, Tensor], loss_fn: Callable[[Mapping[str, Tensor]], Tensor], eta: float,
               first_order: bool = False) -> tuple[dict[str, Tensor], Tensor]:
    """Fast weights ``params - eta * grad loss_fn(params)``; differentiable unless `first_order`."""
    names = list(params)
    loss = loss_fn(params)
    # the caller still backpropagates through `loss` itself, so keep its graph
    grads = torch.autograd.grad(loss, [params[k] for k in names], create_graph=not first_order,
                                retain_graph=True, allow_unused=True)
    fast = {}
    for k, g in zip(names, grads):
        if g is None:
            fast[k] = params[k]
        else:
            fast[k] = params[k] - eta * (g.detach() if first_order else g)
    return fast, loss


def meta_objective(params, source_loss, test_losses, eta: float, first_order: bool = False,
                   scheme: str = "meta"):
    """``L_src(params) + sum_k L_k(params_hat)``; returns (total, source loss, [test losses]).

    With no test losses this is just the source loss (no inner step is taken).
    ``scheme="joint"`` evaluates the test losses at `params` itself.
    """
    if not test_losses:
        src = source_loss(params)
        return src, src, []
    if scheme == "meta":
        fast, src = inner_step(params, source_loss, eta, first_order)
    elif scheme == "joint":
        fast, src = params, source_loss(params)
    else:
        raise ConfigError(f"unknown meta scheme {scheme!r}")
    tests = [f(fast) for f in test_losses]
    return src + sum(tests), src, tests


def meta_train_step(model: Backbone, x: Tensor, y: Tensor, eta: float, params=None,
                    first_order: bool = False) -> dict[str, Tensor]:
    """theta_hat for a labelled batch (`y` one-hot or soft); theta itself is not modified."""
    params = dict(model.named_parameters()) if params is None else params
    fast, _ = inner_step(params, lambda p: soft_cross_entropy(y, forward(model, x, params=p).z), eta,
                         first_order)
    return fast


def mc_nll(model: Backbone, params, aux_model: aug.AuxModel, x: Tensor, y: Tensor, k_mc: int,
           settings: aug.AugmentSettings, generator: torch.Generator, monitor: bool = False):
    """Monte-Carlo NLL of (h+, y+) under `params`, averaged over `k_mc` draws.

    The K draws run as one batch of size ``K * n``. Returns ``(loss, kl)``
    where ``kl`` is the monitoring-only mean ``||z - z+||^2`` (None unless
    `monitor`).
    """
    if k_mc < 1:
        raise ConfigError("k_mc must be >= 1")
    n = x.shape[0]
    xr = x.repeat((k_mc,) + (1,) * (x.dim() - 1))
    yr = y.repeat(k_mc, 1)
    draw = aug.sample_augmented(model, aux_model, xr, yr, settings, generator, params)
    loss = soft_cross_entropy(draw.y_plus, draw.trace.z)
    kl = None
    if monitor:
        with torch.no_grad():
            z = forward(model, x, params=params).z.repeat(k_mc, 1)
            kl = float(((z - draw.trace.z.detach()) ** 2).sum(-1).mean())
    return loss, kl


@dataclass
class MetaSettings:
    eta: float = 1e-4
    k_mc: int = 15
    update_psi: bool = True
    first_order: bool = False
    scheme: str = "meta"
    explicit_kl: bool = False
    kl_weight: float = 1.0


def meta_update(model: Backbone, aux_model: aug.AuxModel | None, optimizer: torch.optim.Optimizer,
                x: Tensor, y: Tensor, domains: list, settings: MetaSettings,
                aug_settings: aug.AugmentSettings | None, generator: torch.Generator,
                monitor: bool = False) -> MetaLossReport:
    """One meta-update of theta (and psi, if it is in `optimizer`).

    `domains` holds live/snapshot :class:`AuxModel` objects (uncertainty
    mode) or ``(inputs, labels)`` tensor pairs (mada mode, labels as ids).
    """
    params = dict(model.named_parameters())
    kls = []

    def source_loss(p):
        return soft_cross_entropy(y, forward(model, x, params=p).z)

    def test_loss(domain):
        if isinstance(domain, aug.AuxModel):
            def f(p):
                loss, kl = mc_nll(model, p, domain, x, y, settings.k_mc, aug_settings, generator, monitor)
                if kl is not None:
                    kls.append(kl)
                return loss
        else:
            xs, ys = domain

            def f(p):
                return soft_cross_entropy(one_hot(ys, model.num_classes, x.dtype), forward(model, xs, params=p).z)
        return f

    total, src, tests = meta_objective(params, source_loss, [test_loss(d) for d in domains], settings.eta,
                                       settings.first_order, settings.scheme)
    if settings.explicit_kl and aux_model is not None:
        kl_term = sum(pt.kl_to_standard_normal(pt.infer_gaussian(aux_model.phi_p, k))
                      for k in aux_model.phi_p.names)
        total = total + settings.kl_weight * kl_term
    if not torch.isfinite(total):
        raise NumericError("non-finite meta loss", loss=float(total.detach()))
    optimizer.zero_grad(set_to_none=True)
    if aux_model is not None:
        aux_model.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    if aux_model is not None:
        aux_model.zero_grad(set_to_none=True)
    return MetaLossReport(float(src.detach()), [float(t.detach()) for t in tests], float(total.detach()),
                          sum(kls) / len(kls) if kls else None)


# --------------------------------------------------------------------------
# training loop


@dataclass
class MetaState:
    config: RunConfig
    model: Backbone
    aux: aug.AuxModel | None
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    domains: list = field(default_factory=list)
    wae: aug.WAEModel | None = None
    iteration: int = 0
    perm: Tensor | None = None
    cursor: int = 0
    history: list = field(default_factory=list)

    def to_blob(self) -> dict:
        """Plain tensors/containers for serialization."""
        return {
            "theta": self.model.state_dict(),
            "psi": self.aux.state_dict() if self.aux is not None else {},
            "optimizer": self.optimizer.state_dict(),
            "rng": self.generator.get_state(),
            "domains": [{"kind": d.kind, "inputs": d.inputs, "labels": d.labels, "psi_state": d.psi_state}
                        for d in self.domains],
            "wae": self.wae.state_dict() if self.wae is not None else {},
            "wae_history": list(self.wae.history) if self.wae is not None else [],
            "iteration": self.iteration,
            "perm": self.perm,
            "cursor": self.cursor,
            "history": list(self.history),
        }

    @classmethod
    def from_blob(cls, config: RunConfig, blob: dict, source: Dataset) -> "MetaState":
        state = init_state(config, source)
        state.model.load_state_dict(blob["theta"])
        if state.aux is not None:
            state.aux.load_state_dict(blob["psi"])
        state.optimizer.load_state_dict(blob["optimizer"])
        state.generator.set_state(blob["rng"])
        state.domains = [aug.AugmentedDomain(d["kind"], d["inputs"], d["labels"], d["psi_state"])
                         for d in blob["domains"]]
        if blob["wae"]:
            state.wae = build_wae(config, source)
            state.wae.load_state_dict(blob["wae"])
            state.wae.history = list(blob["wae_history"])
        state.iteration = int(blob["iteration"])
        state.perm = blob["perm"]
        state.cursor = int(blob["cursor"])
        state.history = list(blob["history"])
        return state


def model_from_config(cfg: RunConfig, input_shape, num_classes: int) -> Backbone:
    return build_backbone(
        cfg["backbone.name"], input_shape, num_classes, channels=cfg["backbone.channels"], fc=cfg["backbone.fc"],
        kernel=cfg["backbone.kernel"], hidden=cfg["backbone.hidden"],
        intercepts=cfg["backbone.intercepts"] or None, seed=cfg["seed"],
    )


def augment_settings(cfg: RunConfig) -> aug.AugmentSettings:
    return aug.AugmentSettings(perturb_mode=cfg["perturb.mode"], mixup_mode=cfg["mixup.mode"], rho=cfg["mixup.rho"],
                               beta=cfg["ada.beta"], relax=cfg["ada.relax"], attack_mixup=cfg["ada.attack_mixup"])


def meta_settings(cfg: RunConfig) -> MetaSettings:
    return MetaSettings(eta=cfg["meta.eta"], k_mc=cfg["meta.k_mc"], update_psi=cfg["meta.update_psi"],
                        first_order=cfg["meta.first_order"], scheme=cfg["meta.scheme"],
                        explicit_kl=cfg["meta.explicit_kl"], kl_weight=cfg["meta.kl_weight"])


def ada_config(cfg: RunConfig) -> aug.AdaConfig:
    return aug.AdaConfig(mode="mada", beta=cfg["ada.beta"], alpha_mada=cfg["mada.alpha_const"],
                         beta_relax=cfg["mada.beta_relax"], gamma=cfg["mada.gamma_ascent"],
                         t_ascent=cfg["mada.t_ascent"])


def build_wae(cfg: RunConfig, source: Dataset) -> aug.WAEModel:
    return aug.WAEModel(tuple(source.inputs.shape[1:]), bottleneck=cfg["wae.bottleneck"], hidden=cfg["wae.hidden"],
                        output="sigmoid" if source.inputs.dim() == 4 else "linear", lambda_wae=cfg["wae.lambda"],
                        seed=cfg["seed"])


def init_state(cfg: RunConfig, source: Dataset) -> MetaState:
    mode = cfg["augment.mode"]
    if mode not in ("uncertainty", "mada"):
        raise ConfigError(f"unknown augment.mode {mode!r}")
    if cfg["meta.scheme"] not in ("meta", "joint"):
        raise ConfigError(f"unknown meta.scheme {cfg['meta.scheme']!r}")
    augment_settings(cfg)  # validates modes early
    model = model_from_config(cfg, tuple(source.inputs.shape[1:]), source.num_classes)
    aux_model = None
    trainable = list(model.parameters())
    if mode == "uncertainty" and cfg["meta.k_domains"] > 0:
        aux_model = aug.AuxModel(model, cfg["perturb.init_log_sigma"])
        if cfg["meta.update_psi"]:
            trainable += list(aux_model.parameters())
    if cfg["meta.optimizer"] == "adam":
        opt = torch.optim.Adam(trainable, lr=cfg["meta.lr"])
    elif cfg["meta.optimizer"] == "sgd":
        opt = torch.optim.SGD(trainable, lr=cfg["meta.lr"])
    else:
        raise ConfigError(f"unknown meta.optimizer {cfg['meta.optimizer']!r}")
    return MetaState(cfg, model, aux_model, opt, as_generator(cfg["seed"]))


def _next_batch(state: MetaState, source: Dataset, batch_size: int):
    n = len(source)
    b = min(batch_size, n)
    if state.perm is None or state.cursor + b > n:
        # cycle with a reshuffle once the current pass is exhausted
        state.perm = torch.randperm(n, generator=state.generator)
        state.cursor = 0
    idx = state.perm[state.cursor:state.cursor + b]
    state.cursor += b
    return source.inputs[idx], source.labels[idx]


def _snapshot_aux(aux_model: aug.AuxModel) -> aug.AugmentedDomain:
    return aug.AugmentedDomain("psi", psi_state={k: v.detach().clone() for k, v in aux_model.state_dict().items()})


def _restore_aux(template: aug.AuxModel, domain: aug.AugmentedDomain) -> aug.AuxModel:
    snap = copy.deepcopy(template)
    snap.load_state_dict(domain.psi_state)
    for p in snap.parameters():
        p.requires_grad_(False)
    return snap


def _generate_mada_domain(state: MetaState, source: Dataset, cfg: RunConfig):
    pool_x = [source.inputs] + [d.inputs for d in state.domains]
    pool_y = [source.labels] + [d.labels for d in state.domains]
    px, py = torch.cat(pool_x), torch.cat(pool_y)
    size = min(cfg["mada.domain_size"], len(px))
    idx = torch.randperm(len(px), generator=state.generator)[:size]
    acfg = ada_config(cfg)
    chunks = []
    for i in range(0, size, 256):
        sel = idx[i:i + 256]
        chunks.append(aug.mada_generate(state.model, state.wae, px[sel], py[sel], acfg))
    new = aug.AugmentedDomain("tensor", torch.cat(chunks), py[idx].clone())
    state.domains.append(new)
    if state.wae is not None and cfg["wae.retrain_epochs"] > 0:
        mixed = torch.cat([source.inputs, new.inputs])
        aug.wae_train(mixed, state.wae, cfg["wae.retrain_epochs"], lr=cfg["wae.lr"],
                      seed=int(torch.randint(0, 2**31, (1,), generator=state.generator)))


def evaluate(model: Backbone, ds: Dataset, batch_size: int = 1000) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    with torch.no_grad():
        for i in range(0, len(ds), batch_size):
            z = model(ds.inputs[i:i + batch_size]).z
            correct += int((z.argmax(-1) == ds.labels[i:i + batch_size]).sum())
    return correct / len(ds)


def run_training(cfg: RunConfig, source: Dataset, val: Dataset | None = None, state: MetaState | None = None,
                 until: int | None = None, on_checkpoint: Callable[[MetaState], None] | None = None):
    """Train from scratch (or continue `state`) up to `until` (default ``train.iterations``).

    Returns ``(state, history)``; `history` is the list of metrics rows.
    `on_checkpoint` is called every ``train.checkpoint_every`` iterations.
    """
    if state is None:
        state = init_state(cfg, source)
    until = cfg["train.iterations"] if until is None else until
    mode = cfg["augment.mode"]
    k_domains = cfg["meta.k_domains"]
    asettings = augment_settings(cfg)
    msettings = meta_settings(cfg)
    num_classes = state.model.num_classes
    if mode == "mada" and k_domains > 0 and state.wae is None and cfg["mada.beta_relax"] > 0:
        state.wae = build_wae(cfg, source)
        aug.wae_train(source.inputs, state.wae, cfg["wae.epochs"], lr=cfg["wae.lr"], seed=cfg["seed"])
    log_every = max(1, cfg["train.log_every"])
    while state.iteration < until:
        it = state.iteration
        x, labels = _next_batch(state, source, cfg["train.batch_size"])
        y = one_hot(labels, num_classes, x.dtype)
        domains = []
        if k_domains > 0 and mode == "uncertainty":
            if cfg["ada.enabled"] and it % cfg["ada.attack_every"] == 0:
                if k_domains > 1 and it > 0:
                    state.domains.append(_snapshot_aux(state.aux))
                    del state.domains[: max(0, len(state.domains) - (k_domains - 1))]
                try:
                    aug.maximize_aux(state.model, state.aux, x, y, cfg["ada.steps"], cfg["ada.lr"], asettings,
                                     state.generator)
                except NumericError as e:
                    raise NumericError("non-finite adversarial objective", iteration=it, loss=e.loss) from None
            domains = [state.aux] + [_restore_aux(state.aux, d) for d in reversed(state.domains)]
        elif k_domains > 0 and mode == "mada":
            if it % cfg["mada.generate_every"] == 0 and len(state.domains) < k_domains:
                _generate_mada_domain(state, source, cfg)
            for d in state.domains:
                sel = torch.randint(0, len(d.labels), (x.shape[0],), generator=state.generator)
                domains.append((d.inputs[sel], d.labels[sel]))
        # an interrupted run must log the same rows as an uninterrupted one
        logging_now = (it + 1) % log_every == 0 or it + 1 == cfg["train.iterations"]
        try:
            report = meta_update(state.model, state.aux, state.optimizer, x, y, domains, msettings, asettings,
                                 state.generator, monitor=logging_now)
        except NumericError as e:
            raise NumericError("non-finite meta loss", iteration=it, loss=e.loss) from None
        state.iteration += 1
        if logging_now:
            tests = report.losses_meta_test
            row = {
                "iteration": state.iteration,
                "loss_meta_train": report.loss_meta_train,
                "loss_meta_test_mean": sum(tests) / len(tests) if tests else float("nan"),
                "kl_surrogate": report.kl_surrogate if report.kl_surrogate is not None else float("nan"),
                "mean_sigma": state.aux.mean_sigma() if state.aux is not None else float("nan"),
                "accuracy_source_val": evaluate(state.model, val) if val is not None else float("nan"),
            }
            state.history.append(row)
            log.info("iter %d  train %.4f  test %.4f  sigma %.4f  val %.4f", row["iteration"],
                     row["loss_meta_train"], row["loss_meta_test_mean"], row["mean_sigma"],
                     row["accuracy_source_val"])
        every = cfg["train.checkpoint_every"]
        if on_checkpoint is not None and every > 0 and state.iteration % every == 0:
            on_checkpoint(state)
    return state, state.history
