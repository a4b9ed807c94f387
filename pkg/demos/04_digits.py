"""Digits end to end: write IDX files, train on clean digits, test on corrupted ones.

Needs mlxtend for its bundled 5,000-image MNIST subset.
Run from the repository root:  python demos/04_digits.py   (a few minutes)
"""
import tempfile
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from sdgen import RunConfig, harness
from sdgen import metalearn as ml
from sdgen import uncertainty as un
from sdgen.data import write_idx

x, y = mnist_data()
order = np.random.default_rng(0).permutation(len(x))
x, y = x[order].reshape(-1, 28, 28).astype(np.uint8), y[order].astype(np.uint8)

root = Path(tempfile.mkdtemp())
for prefix, sl in (("train", slice(0, 3000)), ("t10k", slice(3000, None))):
    write_idx(root / f"{prefix}-images-idx3-ubyte", x[sl])
    write_idx(root / f"{prefix}-labels-idx1-ubyte", y[sl])
print("IDX files in", root)

cfg = RunConfig({
    "data.source": "train", "data.root": str(root), "data.limit": 1000, "data.val_size": 200,
    "data.targets": ("t10k", "gaussian_noise@3", "blur@3", "contrast@3", "rotation@3"),
    "backbone.name": "digits-convnet", "backbone.channels": (16, 32), "backbone.fc": (128, 128),
    "train.iterations": 300, "train.log_every": 100, "meta.k_mc": 4, "meta.lr": 1e-3, "meta.eta": 1e-3,
})
bench = harness.resolve_data(cfg)
state, _ = ml.run_training(cfg, bench.source)
print(harness.format_table(harness.evaluate_domains(state.model, bench.targets)))

# Unlabelled probes: the score should climb with corruption severity.
test = bench.targets[0]
for sev in (1, 3, 5):
    probe = harness.resolve_data(cfg.copy().update_checked({"data.targets": (f"gaussian_noise@{sev}",)})).targets[0]
    r = un.uncertainty_report(state.model, state.aux, probe.inputs[:256])
    print(f"gaussian_noise@{sev}: score {r.score:.4f}  baseline {r.baseline_variance:.4f}")
r = un.uncertainty_report(state.model, state.aux, test.inputs[:256])
print(f"clean: score {r.score:.4f}  baseline {r.baseline_variance:.4f}")
