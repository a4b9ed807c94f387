"""Operational glue: data resolution, evaluation tables, training runs,
few-shot adaptation, augmentation previews and ablation grids."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import augmentation as aug
from . import checkpoint as ck
from . import data as dm
from . import metalearn as ml
from .backbone import Backbone, one_hot, soft_cross_entropy
from .config import RunConfig
from .errors import ConfigError

# --------------------------------------------------------------------------
# data


@dataclass
class Benchmark:
    source: dm.Dataset
    val: dm.Dataset | None
    targets: list[dm.Dataset]


def synth_spec(cfg: RunConfig) -> dm.SynthSpec:
    return dm.SynthSpec(classes=cfg["synth.classes"], dim=cfg["synth.dim"], n_per_class=cfg["synth.n_per_class"],
                        separation=cfg["synth.separation"], shift=cfg["synth.shift"],
                        magnitudes=tuple(float(m) for m in cfg["synth.magnitudes"]), seed=cfg["seed"])


def resolve_data(cfg: RunConfig) -> Benchmark:
    """Source, held-out source validation and target domains named by the config."""
    if cfg["data.source"] == "synthetic":
        spec = synth_spec(cfg)
        source, targets = dm.synth_domains(spec)
        val = dm.synth_test(spec)
        if cfg["data.val_size"] and len(val) > cfg["data.val_size"]:
            val = val.subset(torch.arange(cfg["data.val_size"]))
        return Benchmark(source, val, targets)
    root = cfg["data.root"]
    full = dm.load_idx(*dm.find_idx_pair(root, cfg["data.source"]), channels=cfg["data.channels"],
                       size=cfg["data.size"], name=cfg["data.source"])
    n_val = min(cfg["data.val_size"], max(0, len(full) - 1))
    n_train = min(cfg["data.limit"], len(full) - n_val)
    source, val = full.split([n_train, n_val], seed=cfg["seed"])
    source.meta["name"] = cfg["data.source"]
    test = None
    targets = []
    for t in cfg["data.targets"]:
        if "@" in str(t):
            if test is None:
                test = dm.load_idx(*dm.find_idx_pair(root, cfg["data.test"]), channels=cfg["data.channels"],
                                   size=cfg["data.size"], name=cfg["data.test"])
            targets.append(dm.corrupt(test, dm.CorruptionSpec.parse(str(t)), seed=cfg["seed"]))
        else:
            targets.append(dm.load_idx(*dm.find_idx_pair(root, str(t)), channels=cfg["data.channels"],
                                       size=cfg["data.size"], name=str(t)))
    return Benchmark(source, val, targets)


def save_domain(ds: dm.Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, inputs=ds.inputs.numpy(), labels=ds.labels.numpy(),
                        name=np.array(ds.meta.get("name", path.stem)))


def load_domain(path) -> dm.Dataset:
    with np.load(path) as z:
        name = str(z["name"]) if "name" in z else Path(path).stem
        return dm.Dataset(torch.from_numpy(z["inputs"]).float(), torch.from_numpy(z["labels"]).long(),
                          {"name": name})


def load_domains(path, channels: int = 3, size: int | None = 32) -> list[dm.Dataset]:
    """Every domain under `path`: ``*.npz`` files and ``<name>-images-idx3-ubyte`` IDX pairs, sorted by name.

    `path` may also be a single ``.npz`` file.
    """
    path = Path(path)
    if path.is_file():
        return [load_domain(path)]
    if not path.is_dir():
        raise ConfigError(f"no such data path: {path}")
    out = [load_domain(p) for p in sorted(path.glob("*.npz"))]
    for img in sorted(path.glob("*-images-idx3-ubyte*")):
        prefix = img.name.split("-images-")[0]
        out.append(dm.load_idx(*dm.find_idx_pair(path, prefix), channels=channels, size=size, name=prefix))
    if not out:
        raise ConfigError(f"{path}: no .npz or IDX domains found")
    return out


def domain_name(ds: dm.Dataset, i: int) -> str:
    return str(ds.meta.get("name", f"domain{i}"))


# --------------------------------------------------------------------------
# tables


def evaluate_domains(model: Backbone, domains: list[dm.Dataset]) -> list[dict]:
    return [{"domain": domain_name(d, i), "n": len(d), "accuracy": ml.evaluate(model, d)}
            for i, d in enumerate(domains)]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], columns=None) -> str:
    """Left-aligned text table."""
    if not rows:
        return ""
    columns = list(columns or rows[0])
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def to_csv(rows: list[dict], columns=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(columns or rows[0]), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def write_metrics(history: list[dict], path):
    Path(path).write_text(to_csv(history, ml.METRIC_COLUMNS) or ",".join(ml.METRIC_COLUMNS) + "\n")


# --------------------------------------------------------------------------
# training


def train(cfg: RunConfig, output_dir=None, bench: Benchmark | None = None, resume=None, force: bool = False):
    """Run (or resume) training; write metrics.csv, summary.json and checkpoints into `output_dir`.

    Returns ``(state, summary)``.
    """
    out = Path(output_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    bench = bench or resolve_data(cfg)
    state = None
    if resume is not None:
        state = ck.load(resume, cfg, force=force).state(bench.source, cfg)

    def on_checkpoint(st):
        ck.save(st, out / f"checkpoint-{st.iteration:07d}.ckpt")

    t0 = time.perf_counter()
    state, history = ml.run_training(cfg, bench.source, bench.val, state=state, on_checkpoint=on_checkpoint)
    elapsed = time.perf_counter() - t0
    write_metrics(history, out / "metrics.csv")
    final = ck.save(state, out / "final.ckpt")
    table = evaluate_domains(state.model, bench.targets)
    summary = {
        "iterations": state.iteration,
        "config_hash": cfg.hash(),
        "wall_time_s": round(elapsed, 3),
        "final_metrics": history[-1] if history else {},
        "target_accuracy": {r["domain"]: r["accuracy"] for r in table},
        "mean_target_accuracy": float(np.mean([r["accuracy"] for r in table])) if table else float("nan"),
        "checkpoint": str(final),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    return state, summary


# --------------------------------------------------------------------------
# few-shot adaptation


@dataclass
class AdaptResult:
    model: Backbone
    accuracy_before: float
    accuracy_after: float
    support: dm.Dataset
    query: dm.Dataset


def split_shots(target: dm.Dataset, shots: int, num_classes: int, seed: int = 0) -> tuple[dm.Dataset, dm.Dataset]:
    """`shots` labelled examples per class (support) and the rest (query)."""
    if shots < 1:
        raise ConfigError("shots per class must be >= 1")
    counts = torch.bincount(target.labels, minlength=num_classes)
    deficits = {c: shots - int(n) for c, n in enumerate(counts.tolist()) if n < shots}
    if deficits:
        detail = ", ".join(f"class {c}: short by {d}" for c, d in sorted(deficits.items()))
        raise ConfigError(f"not enough target samples for {shots} shots per class ({detail})")
    g = torch.Generator().manual_seed(seed)
    support = []
    for c in range(num_classes):
        idx = torch.nonzero(target.labels == c).flatten()
        support.append(idx[torch.randperm(len(idx), generator=g)[:shots]])
    support = torch.cat(support)
    mask = torch.ones(len(target), dtype=torch.bool)
    mask[support] = False
    return target.subset(support), target.subset(torch.nonzero(mask).flatten())


def few_shot_adapt(model: Backbone, target: dm.Dataset, shots: int = 10, steps: int = 20, lr: float = 1e-3,
                   seed: int = 0, query: dm.Dataset | None = None) -> AdaptResult:
    """Fine-tune a copy of theta on `shots` labelled target examples per class.

    The perturbation/mixup heads are not involved. Accuracy is measured on
    `query` (default: the target examples not drawn as shots).
    """
    if steps < 0:
        raise ConfigError("adapt steps must be >= 0")
    support, rest = split_shots(target, shots, model.num_classes, seed)
    query = rest if query is None else query
    adapted = copy.deepcopy(model)
    before = ml.evaluate(adapted, query)
    if steps:
        opt = torch.optim.Adam(adapted.parameters(), lr=lr)
        y = one_hot(support.labels, model.num_classes, support.inputs.dtype)
        for _ in range(steps):
            loss = soft_cross_entropy(y, adapted(support.inputs).z)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return AdaptResult(adapted, before, ml.evaluate(adapted, query), support, query)


# --------------------------------------------------------------------------
# augmentation preview


def augment_preview(state: ml.MetaState, x: torch.Tensor, labels: torch.Tensor, seed: int = 0):
    """(x, x+) pairs and per-example stats for the state's augmentation mode.

    mada mode returns raw-input x+. Uncertainty mode perturbs features, so
    the second image is the channel-mean ``|h+ - h|`` at the first intercept
    (upsampled to the input size); for flat inputs no images are returned.
    Returns ``(pairs, rows)`` where `pairs` is a list of HxWx3 uint8 arrays
    (x beside x+) or None.
    """
    cfg = state.config
    model = state.model
    y = one_hot(labels, model.num_classes, x.dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z = model(x).z
    if cfg["augment.mode"] == "mada":
        x_plus = aug.mada_generate(model, state.wae, x, labels, ml.ada_config(cfg))
        with torch.no_grad():
            z_plus = model(x_plus).z
        pixel = ((x_plus - x) ** 2).flatten(1).mean(-1).sqrt()
        second = x_plus
    else:
        if state.aux is None:
            raise ConfigError("checkpoint has no auxiliary model to preview (k_domains = 0)")
        with torch.no_grad():
            draw = aug.sample_augmented(model, state.aux, x, y, ml.augment_settings(cfg), g)
        z_plus = draw.trace.z
        delta = draw.deltas[state.aux.first]
        pixel = (delta**2).flatten(1).mean(-1).sqrt()
        second = None
        if x.dim() == 4 and delta.dim() == 4:
            heat = delta.mean(1, keepdim=True)
            heat = F.interpolate(heat, size=x.shape[1:3], mode="bilinear", align_corners=False)
            heat = heat / heat.flatten(1).amax(-1).clamp_min(1e-12)[:, None, None, None]
            second = heat.permute(0, 2, 3, 1).expand_as(x)
    dz = (z - z_plus).norm(dim=-1)
    rows = [{"index": i, "label": int(labels[i]), "pixel_l2": float(pixel[i]), "z_dist": float(dz[i])}
            for i in range(len(x))]
    pairs = None
    if x.dim() == 4 and second is not None:
        both = torch.cat([x, second.to(x.dtype)], dim=2).clamp(0, 1)
        pairs = [(b.numpy() * 255).round().astype(np.uint8) for b in both]
        pairs = [p if p.shape[-1] == 3 else np.repeat(p[..., :1], 3, -1) for p in pairs]
    return pairs, rows


# --------------------------------------------------------------------------
# ablations

ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "perturbation": [
        ("full", {}),
        ("random_gaussian", {"perturb.mode": "random_gaussian"}),
        ("deterministic", {"perturb.mode": "deterministic"}),
        ("random_mu", {"perturb.mode": "random_mu"}),
        ("random_sigma", {"perturb.mode": "random_sigma"}),
    ],
    "mixup": [
        ("full", {}),
        ("no_mixup", {"mixup.mode": "off"}),
        ("random_mixup", {"mixup.mode": "random"}),
    ],
    "training": [
        ("full", {}),
        ("no_adv", {"ada.enabled": False}),
        ("no_relax", {"ada.relax": 0.0}),
        ("no_min_phi_p", {"meta.update_psi": False}),
        ("no_meta", {"meta.scheme": "joint"}),
    ],
}


def run_ablation(cfg: RunConfig, suite: str, seeds=(0,), bench_fn=resolve_data, log=None) -> list[dict]:
    """One row per variant: mean target accuracy per seed and overall.

    `bench_fn(cfg)` supplies the data for each seed, so the synthetic
    benchmark is regenerated per seed.
    """
    if suite not in ABLATIONS:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {sorted(ABLATIONS)}")
    rows = []
    for name, overrides in ABLATIONS[suite]:
        accs = []
        for seed in seeds:
            run = cfg.copy().update_checked({**overrides, "seed": seed})
            bench = bench_fn(run)
            state, _ = ml.run_training(run, bench.source, None)
            per = [ml.evaluate(state.model, t) for t in bench.targets]
            accs.append(float(np.mean(per)) if per else float("nan"))
            if log:
                log(f"{suite}/{name} seed {seed}: {accs[-1]:.4f}")
        row = {"variant": name, "mean_accuracy": float(np.mean(accs))}
        row.update({f"seed{s}": a for s, a in zip(seeds, accs)})
        rows.append(row)
    return rows
