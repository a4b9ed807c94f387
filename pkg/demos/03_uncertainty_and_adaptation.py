"""Score how far a target domain sits from the source, then fine-tune on a handful of labels.

Run from the repository root:  python demos/03_uncertainty_and_adaptation.py
"""
from sdgen import RunConfig, harness
from sdgen import metalearn as ml
from sdgen import uncertainty as un

cfg = RunConfig({"train.iterations": 400, "train.log_every": 100, "meta.k_mc": 4, "meta.lr": 1e-3})
bench = harness.resolve_data(cfg)
state, _ = ml.run_training(cfg, bench.source)

# The score needs no labels: only a probe batch from each domain.
# On an 8-dim toy sigma barely moves, so the numbers are small; the
# ordering against the sampling baseline is what to look at.
for d in [bench.val] + bench.targets:
    r = un.uncertainty_report(state.model, state.aux, d.inputs[:256])
    print(f"{d.meta.get('name', 'val'):14s} score {r.score:.2e}  baseline {r.baseline_variance:.2e}")

# Few-shot fine-tuning: 10 labelled examples per class, evaluated on the rest.
target = bench.targets[-1]
res = harness.few_shot_adapt(state.model, target, shots=10, steps=cfg["adapt.steps"], lr=cfg["adapt.lr"])
print(f"{target.meta['name']}: before {res.accuracy_before:.3f}  after {res.accuracy_after:.3f}")
