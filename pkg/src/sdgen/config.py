"""Flat, namespaced run configuration.

Files are plain text, one ``key = value`` per line, ``#`` starts a comment.
Layers apply in order: defaults, config files, ``SDGEN_*`` environment
variables, then explicit ``key=value`` overrides. Unknown keys are rejected.
Environment names are the key upper-cased with dots replaced by double
underscores, e.g. ``SDGEN_META__K_MC=5``.
"""
from __future__ import annotations

import hashlib
import os
from typing import Iterable, Mapping

from .errors import ConfigError

ENV_PREFIX = "SDGEN_"

# key: (default, help). The default's type is the key's type; tuples are
# comma-separated lists of ints/floats/strings.
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "master seed for init, batching and augmentation draws"),
    "output_dir": ("runs/default", "where train writes metrics.csv, summary.json, checkpoints"),
    # backbone
    "backbone.name": ("mlp-small", "digits-convnet | mlp-small"),
    "backbone.channels": ((64, 128), "conv widths for digits-convnet"),
    "backbone.fc": ((1024, 1024), "fully connected widths for digits-convnet"),
    "backbone.kernel": (5, "conv kernel size"),
    "backbone.hidden": ((64, 64), "hidden widths for mlp-small"),
    "backbone.intercepts": ((), "intercept layers; empty = architecture default"),
    # feature perturbation
    "perturb.mode": ("full", "full | deterministic | random_mu | random_sigma | random_gaussian"),
    "perturb.init_log_sigma": (0.0, "initial log sigma (sigma = 1)"),
    # label mixup
    "mixup.mode": ("learnable", "learnable | random | off"),
    "mixup.rho": (0.9, "mass on the true class when smoothing fires"),
    # adversarial augmentation, uncertainty mode
    "augment.mode": ("uncertainty", "uncertainty | mada"),
    "ada.enabled": (True, "false = train without adversarial augmentation"),
    "ada.beta": (1.0, "embedding constraint weight"),
    "ada.relax": (1e-8, "feature-space relaxation weight"),
    "ada.lr": (1.0, "gradient-ascent rate on psi"),
    "ada.steps": (1, "ascent steps per attack"),
    "ada.attack_every": (1, "iterations between attacks on psi"),
    "ada.attack_mixup": (True, "also ascend the mixup head"),
    # adversarial augmentation, raw-input (M-ADA) mode
    "mada.alpha_const": (1.0, "embedding constraint weight in L_ADA"),
    "mada.beta_relax": (1e-8, "WAE relaxation weight in L_ADA"),
    "mada.gamma_ascent": (1.0, "input-space ascent rate"),
    "mada.t_ascent": (15, "ascent iterations per generated domain"),
    "mada.generate_every": (1000, "iterations between generated domains"),
    "mada.domain_size": (1000, "examples per generated domain"),
    "wae.bottleneck": (8, "autoencoder latent size"),
    "wae.hidden": ((256,), "autoencoder hidden widths"),
    "wae.lambda": (1.0, "MMD weight"),
    "wae.epochs": (5, "pre-training epochs on the source"),
    "wae.retrain_epochs": (1, "epochs on S and the new domain after each generation"),
    "wae.lr": (1e-3, "autoencoder learning rate"),
    # meta-learning
    "meta.eta": (1e-4, "inner (meta-train) step size"),
    "meta.lr": (1e-4, "outer optimizer learning rate"),
    "meta.optimizer": ("adam", "adam | sgd"),
    "meta.k_domains": (1, "augmented domains used in meta-test; 0 = plain ERM"),
    "meta.k_mc": (15, "Monte-Carlo samples per augmented domain"),
    "meta.update_psi": (True, "false = do not minimize psi in the meta-update"),
    "meta.first_order": (False, "drop second-order terms of the meta-gradient"),
    "meta.scheme": ("meta", "meta | joint (train S and S+ together, no inner step)"),
    "meta.explicit_kl": (False, "add KL(q || N(0, I)) on the perturbation distribution"),
    "meta.kl_weight": (1.0, "weight of the explicit KL term"),
    # training loop
    "train.batch_size": (32, "source batch size"),
    "train.iterations": (10000, "total iterations"),
    "train.log_every": (100, "iterations between metrics rows"),
    "train.checkpoint_every": (0, "iterations between checkpoints; 0 = final only"),
    # deployment-time uncertainty
    "uncertainty.adapt_steps": (10, "phi_p-only adaptation steps on the probe batch"),
    "uncertainty.adapt_lr": (1e-3, "adaptation step size"),
    "uncertainty.adapt_batch": (32, "probe examples per adaptation step"),
    "uncertainty.n_samples": (30, "stochastic forwards for the Bayesian baseline"),
    # few-shot adaptation
    "adapt.shots": (10, "labelled target examples per class (7 or 10)"),
    "adapt.steps": (20, "fine-tuning steps"),
    "adapt.lr": (1e-3, "fine-tuning learning rate"),
    # data
    "data.source": ("synthetic", "'synthetic' or an IDX file prefix inside data.root"),
    "data.root": ("data", "directory holding IDX files"),
    "data.test": ("t10k", "IDX prefix of the held-out source split"),
    "data.targets": ((), "target domains: '<kind>@<severity>' corruptions or IDX prefixes"),
    "data.limit": (10000, "max source training examples"),
    "data.val_size": (500, "source examples held out for validation"),
    "data.channels": (3, "image channels after duplication"),
    "data.size": (32, "image side after resizing"),
    "synth.classes": (4, "synthetic class count"),
    "synth.dim": (8, "synthetic input dimension"),
    "synth.n_per_class": (300, "synthetic source examples per class"),
    "synth.separation": (6.0, "distance between neighbouring class means, in noise std units"),
    "synth.shift": ("rotation", "rotation | scale | permutation | translation"),
    "synth.magnitudes": ((0.2, 0.4, 0.6, 0.8, 1.0), "target shift magnitudes"),
}


def _parse_value(key: str, text: str):
    default = DEFAULTS[key][0]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(_scalar(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {type(default).__name__})") from None


def _scalar(t: str):
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig(dict):
    """Mapping of every known key to its value."""

    def __init__(self, values: Mapping | None = None):
        super().__init__({k: v for k, (v, _) in DEFAULTS.items()})
        if values:
            self.update_checked(values)

    def update_checked(self, values: Mapping):
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self[k] = _parse_value(k, v) if isinstance(v, str) else _coerce(k, v)
        return self

    def set(self, assignment: str):
        if "=" not in assignment:
            raise ConfigError(f"expected key=value, got {assignment!r}")
        k, v = assignment.split("=", 1)
        return self.update_checked({k.strip(): v})

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(self[k])}\n" for k in sorted(self))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self))


def _coerce(key, v):
    default = DEFAULTS[key][0]
    if isinstance(default, tuple):
        return tuple(v)
    if isinstance(default, bool):
        return bool(v)
    if isinstance(default, float) and isinstance(v, int):
        return float(v)
    if type(v) is not type(default):
        raise ConfigError(f"bad value for {key}: {v!r} (expected {type(default).__name__})")
    return v


def parse(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {k!r}")
        out[k] = v.strip()
    return out


def loads(text: str) -> RunConfig:
    return RunConfig(parse(text))


def from_env(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    known = {ENV_PREFIX + k.upper().replace(".", "__"): k for k in DEFAULTS}
    return {known[name]: v for name, v in environ.items() if name in known}


def load_config(paths: Iterable[str] = (), overrides: Iterable[str] = (),
                environ: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    for p in paths:
        with open(p) as f:
            cfg.update_checked(parse(f.read()))
    cfg.update_checked(from_env(environ))
    for o in overrides:
        cfg.set(o)
    return cfg


def describe() -> str:
    """Every key with its default and help text."""
    width = max(map(len, DEFAULTS))
    return "".join(f"{k:<{width}}  {_format_value(v):<16}  {doc}\n" for k, (v, doc) in DEFAULTS.items())
