"""Datasets: IDX ingestion, image corruptions and synthetic shifted domains."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage, stats

from .errors import ConfigError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder(">"): k for k, v in _IDX_DTYPES.items()}

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "blur", "brightness", "contrast", "rotation")


@dataclass
class Dataset:
    inputs: torch.Tensor
    labels: torch.Tensor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConfigError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.labels.max()) + 1 if len(self) else 0))

    def subset(self, idx, **meta) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Dataset(self.inputs[idx], self.labels[idx], {**self.meta, **meta})

    def split(self, sizes, seed: int = 0) -> list["Dataset"]:
        """Disjoint random splits of the given sizes (a trailing remainder is dropped)."""
        if sum(sizes) > len(self):
            raise ConfigError(f"split sizes {sizes} exceed dataset size {len(self)}")
        g = torch.Generator().manual_seed(seed)
        perm = torch.randperm(len(self), generator=g)
        out, start = [], 0
        for s in sizes:
            out.append(self.subset(perm[start:start + s]))
            start += s
        return out


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its declared type and shape."""
    raw = _open(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header, {len(raw)} bytes", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise ParseError(f"{path}: bad magic, expected 0x{expected_magic:08X}, got 0x{magic:08X}", offset=0)
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_DTYPES:
        raise ParseError(f"{path}: bad magic 0x{magic:08X}", offset=0)
    dtype = np.dtype(_IDX_DTYPES[(magic >> 8) & 0xFF])
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError(f"{path}: truncated dimension header", offset=len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header_end < need:
        raise ParseError(f"{path}: truncated data, need {need} bytes, have {len(raw) - header_end}",
                         offset=len(raw))
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=header_end).reshape(shape)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    dt = array.dtype.newbyteorder(">")
    if dt not in _IDX_CODES:
        raise ConfigError(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">I", (_IDX_CODES[dt] << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(dt).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(payload)


def load_idx(images_path, labels_path=None, channels: int = 3, size: int | None = 32,
             name: str | None = None) -> Dataset:
    """Images as NHWC floats in [0, 1], resized to ``size x size``, grey duplicated to `channels`."""
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    if labels_path is not None:
        labels = torch.from_numpy(read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64))
    else:
        labels = torch.zeros(len(imgs), dtype=torch.int64)
    x = torch.from_numpy(imgs.astype(np.float32) / 255.0)
    if x.dim() == 3:
        x = x.unsqueeze(-1)
    if size is not None and len(x) and tuple(x.shape[1:3]) != (size, size):
        x = F.interpolate(x.permute(0, 3, 1, 2), size=(size, size), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1).clamp(0.0, 1.0)
    elif size is not None and not len(x):
        x = x.new_zeros((0, size, size, x.shape[-1]))
    if x.shape[-1] == 1 and channels > 1:
        x = x.repeat(1, 1, 1, channels)
    return Dataset(x.contiguous(), labels, {"name": name or Path(images_path).name, "domain_tag": "idx"})


def find_idx_pair(root, prefix: str):
    """``<prefix>-images-idx3-ubyte[.gz]`` and ``<prefix>-labels-idx1-ubyte[.gz]`` under `root`."""
    root = Path(root)
    found = []
    for kind, nd in (("images", 3), ("labels", 1)):
        for suffix in ("", ".gz"):
            p = root / f"{prefix}-{kind}-idx{nd}-ubyte{suffix}"
            if p.exists():
                found.append(p)
                break
        else:
            raise ConfigError(f"no IDX {kind} file for prefix {prefix!r} in {root}")
    return tuple(found)


# --------------------------------------------------------------------------
# corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"severity must be 1..5, got {self.severity}")

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        kind, _, sev = text.partition("@")
        return cls(kind, int(sev or 3))

    def __str__(self):
        return f"{self.kind}@{self.severity}"


# per-unit-severity strengths; each corruption scales linearly with severity
SCHEDULE = {
    "gaussian_noise": 0.04,  # noise std
    "impulse_noise": 0.03,   # fraction of pixels set to 0 or 1
    "blur": 0.4,             # gaussian sigma in pixels
    "brightness": 0.1,       # additive shift
    "contrast": 0.15,        # contrast reduction factor
    "rotation": 6.0,         # degrees
}


def corrupt(ds: Dataset, spec: CorruptionSpec, seed: int = 0) -> Dataset:
    """Apply a corruption to NHWC images; deterministic in (ds, spec, seed), output clamped to [0, 1]."""
    x = ds.inputs.detach().cpu().numpy().astype(np.float64)
    if x.ndim != 4:
        raise ConfigError("corruptions need NHWC image inputs")
    rng = np.random.default_rng(seed)
    level = SCHEDULE[spec.kind] * spec.severity
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "impulse_noise":
        u = rng.random(x.shape[:3] + (1,))
        salt = rng.random(x.shape[:3] + (1,)) < 0.5
        hit = u < level
        x = np.where(hit & salt, 1.0, np.where(hit & ~salt, 0.0, x))
    elif spec.kind == "blur":
        x = ndimage.gaussian_filter(x, sigma=(0, level, level, 0), mode="nearest")
    elif spec.kind == "brightness":
        x = x + level
    elif spec.kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        x = (x - mean) * (1.0 - level) + mean
    elif spec.kind == "rotation":
        x = ndimage.rotate(x, level, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)
    x = np.clip(x, 0.0, 1.0)
    meta = {**ds.meta, "name": f"{ds.meta.get('name', 'data')}:{spec}", "domain_tag": spec.kind,
            "severity": spec.severity}
    return Dataset(torch.from_numpy(x.astype(np.float32)), ds.labels.clone(), meta)


# --------------------------------------------------------------------------
# synthetic shifted domains


@dataclass
class SynthSpec:
    classes: int = 4
    dim: int = 8
    n_per_class: int = 300
    separation: float = 6.0
    shift: str = "rotation"
    magnitudes: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    n_test_per_class: int = 300
    seed: int = 0


SHIFTS = ("rotation", "scale", "permutation", "translation")


def class_means(spec: SynthSpec) -> np.ndarray:
    """Means on a scaled simplex-like code: class k sits at separation/sqrt(2) along axis k."""
    if spec.classes > spec.dim:
        raise ConfigError("synthetic data needs dim >= classes")
    means = np.zeros((spec.classes, spec.dim))
    means[np.arange(spec.classes), np.arange(spec.classes)] = spec.separation / math.sqrt(2)
    return means


def bayes_accuracy(spec: SynthSpec) -> float:
    """Lower bound on Bayes accuracy for equal-prior isotropic unit-variance classes.

    Any two means are `separation` apart, so the union bound gives
    ``1 - (c - 1) * Phi(-separation / 2)``.
    """
    return 1.0 - (spec.classes - 1) * stats.norm.cdf(-spec.separation / 2)


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    # rotate by `angle` inside a random 2-plane of every disjoint coordinate pair
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    r = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, dim - 1, 2):
        r[i, i], r[i, i + 1], r[i + 1, i], r[i + 1, i + 1] = c, -s, s, c
    return basis @ r @ basis.T


def _draw(spec: SynthSpec, n_per_class: int, rng: np.random.Generator):
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.classes), n_per_class)
    x = means[labels] + rng.normal(size=(len(labels), spec.dim))
    return x, labels


def shift_inputs(x: np.ndarray, labels: np.ndarray, spec: SynthSpec, magnitude: float,
                 rng: np.random.Generator) -> np.ndarray:
    if spec.shift == "rotation":
        # magnitude 1 = 90 degrees
        return x @ _rotation(spec.dim, magnitude * math.pi / 2, rng).T
    if spec.shift == "scale":
        # class-conditional noise grows; the means stay put
        means = class_means(spec)[labels]
        return means + (x - means) * (1.0 + 2.0 * magnitude)
    if spec.shift == "permutation":
        k = int(round(magnitude * spec.dim))
        perm = np.arange(spec.dim)
        chosen = rng.choice(spec.dim, size=k, replace=False)
        perm[chosen] = chosen[np.roll(np.arange(k), 1)]
        return x[:, perm]
    if spec.shift == "translation":
        direction = rng.normal(size=spec.dim)
        return x + magnitude * spec.separation * direction / np.linalg.norm(direction)
    raise ConfigError(f"unknown shift {spec.shift!r}; choose from {SHIFTS}")


def synth_domains(spec: SynthSpec) -> tuple[Dataset, list[Dataset]]:
    """Source domain plus one target per magnitude in `spec.magnitudes`.

    Every target is a fresh draw from the source distribution pushed through
    the shift at that magnitude; magnitude 0 leaves the distribution unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    x, y = _draw(spec, spec.n_per_class, rng)
    meta = {"name": "synthetic-source", "domain_tag": "source", "num_classes": spec.classes}
    source = Dataset(torch.from_numpy(x.astype(np.float32)), torch.from_numpy(y), meta)
    targets = []
    for i, m in enumerate(spec.magnitudes):
        trng = np.random.default_rng([spec.seed, i + 1])
        xt, yt = _draw(spec, spec.n_test_per_class, trng)
        # the shift itself depends only on (seed, shift), so magnitudes share a direction
        xt = shift_inputs(xt, yt, spec, m, np.random.default_rng([spec.seed, 10_000]))
        targets.append(Dataset(torch.from_numpy(xt.astype(np.float32)), torch.from_numpy(yt),
                               {"name": f"{spec.shift}@{m:g}", "domain_tag": spec.shift, "severity": m,
                                "num_classes": spec.classes}))
    return source, targets


def synth_test(spec: SynthSpec) -> Dataset:
    """Unshifted held-out draw from the source distribution."""
    return synth_domains(replace(spec, magnitudes=(0.0,)))[1][0]
