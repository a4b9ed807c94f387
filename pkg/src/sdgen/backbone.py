"""Small classifiers with named interception points for feature perturbation.

A backbone is an ordered stack of named layers. Some of those names are
*intercept points*: their outputs ``h`` may be replaced by ``h + delta``
before the rest of the stack runs. The final linear layer's output is the
pre-softmax embedding ``z``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.func import functional_call

from .errors import ConfigError

LOG_EPS = 1e-12

BACKBONES = ("digits-convnet", "mlp-small")


@dataclass
class ForwardTrace:
    h_by_layer: dict[str, Tensor]
    z: Tensor
    y_hat: Tensor


class ChannelsFirst(nn.Module):
    """NHWC -> NCHW."""

    def forward(self, x):
        return x.permute(0, 3, 1, 2)


class Backbone(nn.Module):
    def __init__(self, layers: Sequence[tuple[str, nn.Module]], input_shape, intercept_points):
        super().__init__()
        self.layers = nn.ModuleDict(OrderedDict(layers))
        self.input_shape = tuple(input_shape)
        names = list(self.layers.keys())
        for p in intercept_points:
            if p not in names:
                raise ConfigError(f"intercept point {p!r} is not a layer name; layers: {names}")
        # keep network order regardless of how the caller listed them
        self.intercept_points = [n for n in names if n in set(intercept_points)]
        with torch.no_grad():
            trace = self._run(torch.zeros((1,) + self.input_shape), None, None, None)
        self.feature_shapes = {k: tuple(v.shape[1:]) for k, v in trace.h_by_layer.items()}
        self.num_classes = trace.z.shape[-1]

    def channels(self, name: str) -> int:
        return self.feature_shapes[name][0]

    def forward(self, x, perturbations=None, start=None, h_start=None):
        return self._run(x, perturbations, start, h_start)

    def _run(self, x, perturbations, start, h_start):
        perturbations = perturbations or {}
        unknown = set(perturbations) - set(self.intercept_points)
        if unknown:
            raise ConfigError(f"perturbation given for non-intercept layer(s) {sorted(unknown)}")
        names = list(self.layers.keys())
        if start is None:
            if tuple(x.shape[1:]) != self.input_shape:
                raise ConfigError(
                    f"layer 'input': expected per-example shape {self.input_shape}, got {tuple(x.shape[1:])}"
                )
            first = 0
            h = x
        else:
            # resume right after `start`, whose (unperturbed) output is h_start
            first = names.index(start)
            h = h_start
        h_by_layer = {}
        for i, name in enumerate(names[first:], start=first):
            if not (start is not None and i == first):
                h = self.layers[name](h)
            if name in self.intercept_points:
                h_by_layer[name] = h
                delta = perturbations.get(name)
                if delta is not None:
                    try:
                        shape = torch.broadcast_shapes(delta.shape, h.shape)
                    except RuntimeError:
                        shape = None
                    if shape != h.shape:
                        raise ConfigError(
                            f"layer {name!r}: perturbation shape {tuple(delta.shape)} "
                            f"does not match feature shape {tuple(h.shape)}"
                        )
                    h = h + delta
        return ForwardTrace(h_by_layer, h, torch.softmax(h, dim=-1))

    def trunk(self, x, upto: str) -> Tensor:
        """Unperturbed output of layer `upto` (use with ``forward(start=upto, h_start=...)``)."""
        h = x
        for name, layer in self.layers.items():
            h = layer(h)
            if name == upto:
                return h
        raise ConfigError(f"unknown layer {upto!r}")


def forward(model: Backbone, x: Tensor, perturbations: Mapping[str, Tensor] | None = None,
            params: Mapping[str, Tensor] | None = None, **kw) -> ForwardTrace:
    """Run `model`, optionally with substituted parameters (fast weights)."""
    if params is None:
        return model(x, perturbations, **kw)
    return functional_call(model, dict(params), (x, perturbations), kw)


def cross_entropy(y: Tensor, y_hat: Tensor, eps: float = LOG_EPS, reduction: str = "none") -> Tensor:
    """-sum_i y_i log(y_hat_i) over the last axis, with log clamped at `eps`."""
    loss = -(y * torch.log(y_hat.clamp_min(eps))).sum(-1)
    return _reduce(loss, reduction)


def soft_cross_entropy(y: Tensor, logits: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy of (possibly soft) targets against logits, via log-softmax."""
    loss = -(y * F.log_softmax(logits, dim=-1)).sum(-1)
    return _reduce(loss, reduction)


def _reduce(loss, reduction):
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ConfigError(f"unknown reduction {reduction!r}")


def one_hot(labels: Tensor, num_classes: int, dtype=None) -> Tensor:
    return F.one_hot(labels.long(), num_classes).to(dtype or torch.get_default_dtype())


def build_backbone(name: str, input_shape, num_classes: int, *, channels=(64, 128), fc=(1024, 1024),
                   kernel: int = 5, hidden=(64, 64), intercepts=None, seed: int = 0) -> Backbone:
    """Construct a registered architecture with deterministic initialization.

    ``digits-convnet``: conv-pool-conv-pool-fc-fc-softmax on NHWC images,
    intercepts at both conv layers by default.
    ``mlp-small``: dense layers of widths `hidden` on flat vectors, intercept at
    the first hidden layer by default (an empty `hidden` gives a linear model
    with no intercept point).
    """
    input_shape = tuple(input_shape)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if name == "digits-convnet":
            if len(input_shape) != 3:
                raise ConfigError(f"digits-convnet expects (H, W, C) inputs, got {input_shape}")
            layers = [("to_nchw", ChannelsFirst())]
            c_in = input_shape[2]
            for i, c in enumerate(channels, start=1):
                layers += [(f"conv{i}", nn.Conv2d(c_in, c, kernel)), (f"relu_conv{i}", nn.ReLU()),
                           (f"pool{i}", nn.MaxPool2d(2))]
                c_in = c
            layers.append(("flatten", nn.Flatten()))
            probe = nn.Sequential(*(m for _, m in layers))
            with torch.no_grad():
                width = probe(torch.zeros((1,) + input_shape)).shape[1]
            for i, d in enumerate(fc, start=1):
                layers += [(f"fc{i}", nn.Linear(width, d)), (f"relu_fc{i}", nn.ReLU())]
                width = d
            layers.append(("logits", nn.Linear(width, num_classes)))
            default_ip = [f"conv{i}" for i in range(1, len(channels) + 1)]
        elif name == "mlp-small":
            if len(input_shape) != 1:
                raise ConfigError(f"mlp-small expects flat inputs, got {input_shape}")
            layers, width = [], input_shape[0]
            for i, d in enumerate(hidden, start=1):
                layers += [(f"fc{i}", nn.Linear(width, d)), (f"relu{i}", nn.ReLU())]
                width = d
            layers.append(("logits", nn.Linear(width, num_classes)))
            default_ip = ["fc1"] if hidden else []
        else:
            raise ConfigError(f"unknown backbone {name!r}; choose from {BACKBONES}")
        return Backbone(layers, input_shape, default_ip if intercepts is None else list(intercepts))
