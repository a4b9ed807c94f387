import numpy as np
import pytest
import torch

from sdgen import harness
from sdgen import metalearn as ml
from sdgen.config import RunConfig
from sdgen.data import Dataset, write_idx
from sdgen.errors import ConfigError

SMALL = {"train.iterations": 60, "train.log_every": 30, "meta.k_mc": 2, "synth.n_per_class": 60,
         "backbone.hidden": (16,)}


@pytest.fixture(scope="module")
def trained():
    cfg = RunConfig({**SMALL, "train.iterations": 200, "meta.lr": 1e-3})
    bench = harness.resolve_data(cfg)
    state, _ = ml.run_training(cfg, bench.source)
    return cfg, bench, state


def test_resolve_synthetic():
    b = harness.resolve_data(RunConfig({"data.val_size": 100}))
    assert len(b.val) == 100
    assert [t.meta["name"] for t in b.targets] == ["rotation@0.2", "rotation@0.4", "rotation@0.6",
                                                   "rotation@0.8", "rotation@1"]


def test_resolve_idx_with_corrupted_targets(mnist_idx):
    cfg = RunConfig({"data.source": "train", "data.root": str(mnist_idx), "data.limit": 500, "data.val_size": 100,
                     "data.targets": ("blur@2", "t10k")})
    b = harness.resolve_data(cfg)
    assert (len(b.source), len(b.val)) == (500, 100)
    assert tuple(b.source.inputs.shape[1:]) == (32, 32, 3)
    assert [t.meta["name"] for t in b.targets] == ["t10k:blur@2", "t10k"]
    assert len(b.targets[0]) == len(b.targets[1]) == 2000


def test_resolve_missing_idx(tmp_path):
    with pytest.raises(ConfigError, match="no IDX"):
        harness.resolve_data(RunConfig({"data.source": "train", "data.root": str(tmp_path)}))


def test_domain_files_roundtrip(tmp_path):
    ds = Dataset(torch.rand(5, 3), torch.tensor([0, 1, 2, 0, 1]), {"name": "five"})
    harness.save_domain(ds, tmp_path / "d" / "five.npz")
    write_idx(tmp_path / "d" / "extra-images-idx3-ubyte", np.zeros((2, 4, 4), np.uint8))
    write_idx(tmp_path / "d" / "extra-labels-idx1-ubyte", np.array([1, 0], np.uint8))
    doms = harness.load_domains(tmp_path / "d", channels=1, size=None)
    assert [harness.domain_name(d, i) for i, d in enumerate(doms)] == ["five", "extra"]
    assert torch.equal(doms[0].inputs, ds.inputs) and torch.equal(doms[0].labels, ds.labels)
    assert tuple(doms[1].inputs.shape) == (2, 4, 4, 1)
    assert len(harness.load_domains(tmp_path / "d" / "five.npz")) == 1
    with pytest.raises(ConfigError):
        harness.load_domains(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError, match="no .npz"):
        harness.load_domains(tmp_path / "empty")


def test_tables():
    rows = [{"domain": "a", "accuracy": 0.5}, {"domain": "bbbbbb", "accuracy": float("nan")}]
    text = harness.format_table(rows)
    lines = text.splitlines()
    assert lines[0].split() == ["domain", "accuracy"]
    assert lines[1].split() == ["a", "0.5000"] and lines[2].split() == ["bbbbbb", "nan"]
    assert lines[1].index("0.5") == lines[0].index("accuracy")
    assert harness.to_csv(rows).splitlines() == ["domain,accuracy", "a,0.5", "bbbbbb,nan"]
    assert harness.format_table([]) == "" and harness.to_csv([]) == ""


def test_evaluate_domains(trained):
    _, bench, state = trained
    rows = harness.evaluate_domains(state.model, bench.targets)
    assert [r["domain"] for r in rows] == [t.meta["name"] for t in bench.targets]
    assert all(0 <= r["accuracy"] <= 1 and r["n"] == 1200 for r in rows)


# few-shot adaptation


def test_zero_steps_leaves_accuracy_unchanged(trained):
    _, bench, state = trained
    res = harness.few_shot_adapt(state.model, bench.targets[2], shots=10, steps=0)
    assert res.accuracy_after == res.accuracy_before == ml.evaluate(state.model, res.query)


@pytest.mark.parametrize("shots", [7, 10])
def test_support_and_query_partition_target(trained, shots):
    _, bench, state = trained
    target = bench.targets[3]
    res = harness.few_shot_adapt(state.model, target, shots=shots, steps=5)
    assert torch.bincount(res.support.labels).tolist() == [shots] * 4
    assert len(res.support) + len(res.query) == len(target)
    # the caller's model is untouched
    assert res.model is not state.model
    assert ml.evaluate(state.model, res.query) == res.accuracy_before


def test_shot_deficits_are_listed():
    target = Dataset(torch.zeros(9, 2), torch.tensor([0, 0, 0, 0, 1, 1, 1, 2, 2]), {"num_classes": 4})
    with pytest.raises(ConfigError) as e:
        harness.split_shots(target, 4, 4)
    msg = str(e.value)
    assert "class 1: short by 1" in msg and "class 2: short by 2" in msg and "class 3: short by 4" in msg
    assert "class 0" not in msg
    with pytest.raises(ConfigError):
        harness.split_shots(target, 0, 4)


# augmentation preview


def test_preview_flat_inputs_gives_stats_only(trained):
    _, bench, state = trained
    pairs, rows = harness.augment_preview(state, bench.source.inputs[:4], bench.source.labels[:4])
    assert pairs is None
    assert [r["index"] for r in rows] == [0, 1, 2, 3]
    assert all(r["pixel_l2"] > 0 and r["z_dist"] >= 0 for r in rows)


def test_preview_images_in_mada_mode():
    cfg = RunConfig({"augment.mode": "mada", "mada.beta_relax": 0.0, "mada.t_ascent": 3,
                     "mada.gamma_ascent": 0.5, "backbone.name": "digits-convnet", "backbone.channels": (4, 8),
                     "backbone.fc": (16,)})
    g = torch.Generator().manual_seed(0)
    src = Dataset(torch.rand(6, 32, 32, 3, generator=g), torch.arange(6) % 3, {"num_classes": 3})
    state = ml.init_state(cfg, src)
    pairs, rows = harness.augment_preview(state, src.inputs, src.labels)
    assert len(pairs) == 6
    assert pairs[0].shape == (32, 64, 3) and pairs[0].dtype == np.uint8
    assert all(r["pixel_l2"] > 0 for r in rows)


def test_preview_needs_aux_in_uncertainty_mode():
    cfg = RunConfig({**SMALL, "meta.k_domains": 0})
    bench = harness.resolve_data(cfg)
    state = ml.init_state(cfg, bench.source)
    with pytest.raises(ConfigError):
        harness.augment_preview(state, bench.source.inputs[:2], bench.source.labels[:2])


# ablations


def test_ablation_suites_cover_the_variants():
    assert [n for n, _ in harness.ABLATIONS["perturbation"]] == [
        "full", "random_gaussian", "deterministic", "random_mu", "random_sigma"]
    assert [n for n, _ in harness.ABLATIONS["mixup"]] == ["full", "no_mixup", "random_mixup"]
    assert len(harness.ABLATIONS["training"]) == 5
    for suite in harness.ABLATIONS.values():
        for _, overrides in suite:
            RunConfig(overrides)


def test_run_ablation_rows():
    cfg = RunConfig({**SMALL, "train.iterations": 10})
    rows = harness.run_ablation(cfg, "mixup", seeds=(0, 1))
    assert [r["variant"] for r in rows] == ["full", "no_mixup", "random_mixup"]
    for r in rows:
        assert r["mean_accuracy"] == pytest.approx((r["seed0"] + r["seed1"]) / 2)
    with pytest.raises(ConfigError):
        harness.run_ablation(cfg, "nope")
