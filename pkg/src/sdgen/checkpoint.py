"""Checkpoint files: a readable text manifest followed by one binary blob.

Layout::

    SDGEN-CHECKPOINT v1
    { ...JSON manifest... }
    --- blob ---
    <torch.save payload>

The manifest records the format version, the full config text and its hash,
the iteration, the latest metrics row and the blob's length and SHA-256, so
a truncated or edited file is caught before anything is unpickled.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch

from . import config as cfgmod
from .data import Dataset
from .errors import CheckpointError, CheckpointVersionError, ConfigMismatchError
from .metalearn import MetaState

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"SDGEN-CHECKPOINT"
SEPARATOR = b"\n--- blob ---\n"


@dataclass
class Checkpoint:
    manifest: dict
    blob: dict

    @property
    def config(self) -> cfgmod.RunConfig:
        return cfgmod.loads(self.manifest["config"])

    def state(self, source: Dataset | None = None, config: cfgmod.RunConfig | None = None) -> MetaState:
        """Rebuild the training state; without `source` a shape-only stand-in is used."""
        config = self.config if config is None else config
        return MetaState.from_blob(config, self.blob, source if source is not None else self.stand_in())

    def stand_in(self) -> Dataset:
        shape = tuple(self.manifest["input_shape"])
        c = int(self.manifest["num_classes"])
        return Dataset(torch.zeros((1,) + shape), torch.tensor([c - 1]), {"num_classes": c})


def save(state: MetaState, path, metrics: dict | None = None) -> Path:
    """Write `state` atomically (temp file + rename)."""
    buf = io.BytesIO()
    torch.save(state.to_blob(), buf)
    blob = buf.getvalue()
    if metrics is None and state.history:
        metrics = state.history[-1]
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": state.config.hash(),
        "config": state.config.dumps(),
        "iteration": state.iteration,
        "metrics": metrics or {},
        "input_shape": list(state.model.input_shape),
        "num_classes": state.model.num_classes,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = MAGIC + f" v{FORMAT_VERSION}\n".encode() + json.dumps(manifest, indent=2, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(head + SEPARATOR + blob)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    first, _, rest = raw.partition(b"\n")
    try:
        version = int(first[len(MAGIC):].strip().lstrip(b"v"))
    except ValueError:
        raise CheckpointError(f"{path}: unreadable header {first[:40]!r}") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format v{version}, this build reads v{FORMAT_VERSION}; migrate the file first"
        )
    text, sep, blob = rest.partition(SEPARATOR.lstrip(b"\n"))
    if not sep:
        raise CheckpointError(f"{path}: truncated, no blob separator")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: manifest declares version {manifest.get('format_version')}")
    return manifest, blob


def load(path, config: cfgmod.RunConfig | None = None, force: bool = False) -> Checkpoint:
    """Read and verify a checkpoint.

    If `config` is given and its hash differs from the manifest's, raise
    :class:`ConfigMismatchError` unless `force`, in which case only warn.
    """
    manifest, blob = read_manifest(path)
    if len(blob) != manifest["blob_size"]:
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_size']}"
                              " (truncated or corrupted)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    if config is not None and config.hash() != manifest["config_hash"]:
        msg = f"{path}: config hash {config.hash()} differs from checkpoint's {manifest['config_hash']}"
        if not force:
            raise ConfigMismatchError(msg + "; pass --force to load anyway")
        warnings.warn(msg, stacklevel=2)
    data = torch.load(io.BytesIO(blob), weights_only=True)
    return Checkpoint(manifest, data)
