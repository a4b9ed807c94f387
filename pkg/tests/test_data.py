import gzip
import struct
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgen import data as dm
from sdgen.augmentation import mmd
from sdgen.errors import ConfigError, ParseError


def _fixture_bytes():
    # four 2x2 images written byte by byte, then labels 3, 1, 4, 1
    pixels = bytes([0, 255, 255, 0,
                    255, 255, 255, 255,
                    0, 0, 0, 0,
                    128, 128, 128, 128])
    images = struct.pack(">IIII", 0x00000803, 4, 2, 2) + pixels
    labels = struct.pack(">II", 0x00000801, 4) + bytes([3, 1, 4, 1])
    return images, labels


@pytest.fixture
def idx_pair(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lbl").write_bytes(labels)
    return tmp_path / "img", tmp_path / "lbl"


def test_load_idx_handcrafted_fixture(idx_pair):
    ds = dm.load_idx(*idx_pair)
    assert tuple(ds.inputs.shape) == (4, 32, 32, 3)
    assert ds.labels.tolist() == [3, 1, 4, 1]
    assert float(ds.inputs[1].min()) == 1.0
    assert float(ds.inputs[2].max()) == 0.0
    assert torch.allclose(ds.inputs[3], torch.full((32, 32, 3), 128 / 255))
    # grey duplicated into identical channels
    assert torch.equal(ds.inputs[..., 0], ds.inputs[..., 2])


def test_load_idx_native_size_single_channel(idx_pair):
    ds = dm.load_idx(*idx_pair, channels=1, size=None)
    assert tuple(ds.inputs.shape) == (4, 2, 2, 1)
    assert ds.inputs[0, :, :, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_load_idx_gzip(tmp_path):
    images, labels = _fixture_bytes()
    with gzip.open(tmp_path / "i.gz", "wb") as f:
        f.write(images)
    with gzip.open(tmp_path / "l.gz", "wb") as f:
        f.write(labels)
    ds = dm.load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    assert ds.labels.tolist() == [3, 1, 4, 1]


def test_empty_idx_is_empty_dataset(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 0, 28, 28))
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 0))
    ds = dm.load_idx(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 0
    assert tuple(ds.inputs.shape) == (0, 32, 32, 3)


def test_bad_magic_names_expected_and_actual(tmp_path):
    images, _ = _fixture_bytes()
    p = tmp_path / "i"
    p.write_bytes(struct.pack(">I", 0x00000801) + images[4:])
    with pytest.raises(ParseError) as e:
        dm.load_idx(p)
    assert "0x00000803" in str(e.value) and "0x00000801" in str(e.value)
    assert e.value.offset == 0


def test_truncated_idx_reports_offset(tmp_path):
    images, _ = _fixture_bytes()
    p = tmp_path / "i"
    p.write_bytes(images[:-3])
    with pytest.raises(ParseError) as e:
        dm.read_idx(p)
    assert e.value.offset == len(images) - 3
    p.write_bytes(images[:6])
    with pytest.raises(ParseError):
        dm.read_idx(p)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=40))
@settings(max_examples=30, deadline=None)
def test_idx_write_read_roundtrip(tmp_path_factory, values):
    arr = np.array(values, dtype=np.uint8).reshape(len(values), 1, 1)
    p = tmp_path_factory.mktemp("rt") / "a"
    dm.write_idx(p, arr)
    assert np.array_equal(dm.read_idx(p), arr)


# corruptions


@pytest.fixture(scope="module")
def image_batch():
    g = torch.Generator().manual_seed(0)
    x = torch.rand((8, 32, 32, 3), generator=g) * 0.6 + 0.2
    x[:, 8:24, 14:18] = 1.0  # a bar so blur and rotation have edges to move
    return dm.Dataset(x, torch.arange(8) % 4, {"name": "fixture"})


@pytest.mark.parametrize("kind", dm.CORRUPTIONS)
def test_distortion_strictly_increases_with_severity(image_batch, kind):
    dist = []
    for s in range(1, 6):
        out = dm.corrupt(image_batch, dm.CorruptionSpec(kind, s), seed=0)
        dist.append(float((out.inputs - image_batch.inputs).flatten(1).norm(dim=1).mean()))
    assert all(b > a for a, b in zip(dist, dist[1:])), dist


@pytest.mark.parametrize("kind", dm.CORRUPTIONS)
def test_corruption_is_deterministic_and_clamped(image_batch, kind):
    a = dm.corrupt(image_batch, dm.CorruptionSpec(kind, 5), seed=7)
    b = dm.corrupt(image_batch, dm.CorruptionSpec(kind, 5), seed=7)
    assert torch.equal(a.inputs, b.inputs)
    assert float(a.inputs.min()) >= 0.0 and float(a.inputs.max()) <= 1.0
    assert torch.equal(a.labels, image_batch.labels)
    assert a.meta["severity"] == 5 and a.meta["domain_tag"] == kind


def test_gaussian_noise_seed_matters(image_batch):
    a = dm.corrupt(image_batch, dm.CorruptionSpec("gaussian_noise", 2), seed=0)
    b = dm.corrupt(image_batch, dm.CorruptionSpec("gaussian_noise", 2), seed=1)
    assert not torch.equal(a.inputs, b.inputs)


def test_brightness_exact_shift():
    ds = dm.Dataset(torch.full((2, 4, 4, 3), 0.5), torch.zeros(2, dtype=torch.long))
    out = dm.corrupt(ds, dm.CorruptionSpec("brightness", 1))
    assert torch.allclose(out.inputs, torch.full_like(ds.inputs, 0.5 + dm.SCHEDULE["brightness"]), atol=1e-7)


def test_schedule_levels_for_noise_and_rotation():
    assert dm.SCHEDULE["gaussian_noise"] == 0.04
    assert dm.SCHEDULE["rotation"] == 6.0


@pytest.mark.parametrize("bad", [("fog", 1), ("blur", 0), ("blur", 6)])
def test_corruption_spec_validation(bad):
    with pytest.raises(ConfigError):
        dm.CorruptionSpec(*bad)


def test_corruption_spec_parse():
    assert dm.CorruptionSpec.parse("blur@4") == dm.CorruptionSpec("blur", 4)
    assert str(dm.CorruptionSpec.parse("contrast")) == "contrast@3"


# synthetic domains


def test_bayes_accuracy_at_least_95_percent():
    spec = dm.SynthSpec()
    assert dm.bayes_accuracy(spec) >= 0.95
    # the nearest-mean rule is Bayes-optimal for equal-prior isotropic classes
    src, _ = dm.synth_domains(spec)
    means = torch.as_tensor(dm.class_means(spec), dtype=torch.float32)
    pred = torch.cdist(src.inputs, means).argmin(1)
    assert float((pred == src.labels).float().mean()) >= 0.95


@pytest.mark.parametrize("shift", dm.SHIFTS)
def test_magnitude_zero_matches_source(shift):
    spec = dm.SynthSpec(shift=shift, magnitudes=(0.0, 1.0))
    src, (same, far) = dm.synth_domains(spec)
    m_same = float(mmd(src.inputs.double(), same.inputs.double()))
    m_far = float(mmd(src.inputs.double(), far.inputs.double()))
    assert m_same < 0.01
    assert m_far > m_same


def _erm(ds, epochs=150, seed=0):
    torch.manual_seed(seed)
    lin = torch.nn.Linear(ds.inputs.shape[1], ds.num_classes)
    opt = torch.optim.Adam(lin.parameters(), lr=0.05)
    for _ in range(epochs):
        opt.zero_grad()
        torch.nn.functional.cross_entropy(lin(ds.inputs), ds.labels).backward()
        opt.step()
    return lin


def test_erm_accuracy_falls_with_shift_magnitude():
    monotone = 0
    for seed in range(5):
        src, targets = dm.synth_domains(dm.SynthSpec(seed=seed))
        lin = _erm(src, seed=seed)
        with torch.no_grad():
            acc = [float((lin(t.inputs).argmax(1) == t.labels).float().mean()) for t in targets]
        monotone += all(b <= a for a, b in zip(acc, acc[1:]))
    assert monotone >= 4


def test_synth_domains_deterministic():
    a = dm.synth_domains(dm.SynthSpec(seed=3))
    b = dm.synth_domains(dm.SynthSpec(seed=3))
    assert torch.equal(a[0].inputs, b[0].inputs)
    assert all(torch.equal(s.inputs, t.inputs) for s, t in zip(a[1], b[1]))


def test_synth_test_is_fresh_unshifted_draw():
    spec = dm.SynthSpec()
    src, _ = dm.synth_domains(spec)
    test = dm.synth_test(spec)
    assert not torch.equal(src.inputs[:10], test.inputs[:10])
    assert float(mmd(src.inputs.double(), test.inputs.double())) < 0.01


def test_synth_needs_enough_dims():
    with pytest.raises(ConfigError):
        dm.synth_domains(replace(dm.SynthSpec(), classes=9, dim=8))


def test_unknown_shift():
    with pytest.raises(ConfigError):
        dm.synth_domains(dm.SynthSpec(shift="warp"))


# splits


@given(st.integers(10, 200), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_splits_are_disjoint(n, seed):
    ds = dm.Dataset(torch.arange(n, dtype=torch.float32).unsqueeze(1), torch.zeros(n, dtype=torch.long))
    a, b, c = ds.split((n // 2, n // 4, n // 5), seed=seed)
    ids = [set(part.inputs[:, 0].long().tolist()) for part in (a, b, c)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert [len(s) for s in ids] == [n // 2, n // 4, n // 5]


def test_split_too_large():
    ds = dm.Dataset(torch.zeros(5, 1), torch.zeros(5, dtype=torch.long))
    with pytest.raises(ConfigError):
        ds.split((3, 3))


def test_dataset_length_mismatch():
    with pytest.raises(ConfigError):
        dm.Dataset(torch.zeros(3, 1), torch.zeros(2, dtype=torch.long))
