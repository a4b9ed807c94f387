import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from sdgen import augmentation as aug
from sdgen import perturbation as pt
from sdgen.backbone import one_hot
from sdgen.errors import ConfigError


def test_init_is_zero_mean_unit_sigma():
    head = pt.PerturbationHead({"a": 3, "b": 2})
    d = pt.infer_gaussian(head, "a")
    assert torch.equal(d.mu, torch.zeros(3)) and torch.equal(d.sigma, torch.ones(3))
    assert head.names == ["a", "b"]


def test_infer_checks_channels():
    head = pt.PerturbationHead({"a": 3})
    pt.infer_gaussian(head, "a", batch_features=torch.zeros(5, 3, 4, 4))
    with pytest.raises(ConfigError, match="'a'"):
        pt.infer_gaussian(head, "a", batch_features=torch.zeros(5, 2))


@pytest.mark.parametrize("mode", ["random_gaussian", "random_mu", "random_sigma", "full", "deterministic"])
def test_mode_adjustments(mode):
    head = pt.PerturbationHead({"a": 3})
    with torch.no_grad():
        head.mu["a"].fill_(2.0)
        head.log_sigma["a"].fill_(-1.0)
    d = pt.infer_gaussian(head, "a", mode=mode)
    mu0 = mode in ("random_gaussian", "random_mu")
    s1 = mode in ("random_gaussian", "random_sigma")
    assert torch.equal(d.mu, torch.zeros(3) if mu0 else torch.full((3,), 2.0))
    assert torch.allclose(d.sigma, torch.ones(3) if s1 else torch.full((3,), math.exp(-1.0)))


def test_unknown_mode():
    head = pt.PerturbationHead({"a": 3})
    with pytest.raises(ConfigError):
        pt.infer_gaussian(head, "a", mode="bogus")
    with pytest.raises(ConfigError):
        pt.draw(pt.infer_gaussian(head, "a"), (2, 3), mode="bogus")


def test_degenerate_sigma():
    d = pt.GaussianPerturbation(torch.tensor([0.3, -1.2], dtype=torch.float64),
                                torch.full((2,), -40.0, dtype=torch.float64))
    e = pt.sample(d, seed=0).e
    assert (e - d.mu).abs().max() < 1e-15


def test_seeded_standard_normal_oracle():
    d = pt.GaussianPerturbation(torch.zeros(5), torch.zeros(5))
    oracle = torch.randn(5, generator=torch.Generator().manual_seed(7))
    assert torch.equal(pt.sample(d, seed=7).e, oracle)


def test_monte_carlo_mean_and_variance():
    d = pt.GaussianPerturbation(torch.tensor([2.0], dtype=torch.float64),
                                torch.tensor([math.log(0.5)], dtype=torch.float64))
    e = pt.sample(d, seed=1, shape=(100_000, 1)).e
    assert abs(float(e.mean()) - 2.0) < 0.01
    assert abs(float(e.var()) / 0.25 - 1) < 0.01


def test_softplus_zero():
    h = torch.randn(4, 3, dtype=torch.float64)
    assert torch.allclose(pt.apply(h, torch.zeros_like(h)), h + math.log(2))


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(-30, 30), log_sigma=st.floats(-5, 3), seed=st.integers(0, 2**31 - 1),
       mode=st.sampled_from(pt.MODES))
def test_positivity(mu, log_sigma, seed, mode):
    head = pt.PerturbationHead({"a": 4}).double()
    with torch.no_grad():
        head.mu["a"].fill_(mu)
        head.log_sigma["a"].fill_(log_sigma)
    h = torch.randn(3, 4, dtype=torch.float64)
    d = pt.infer_gaussian(head, "a", mode=mode)
    e = pt.draw(d, h.shape, mode, torch.Generator().manual_seed(seed))
    # strictly positive shift; after float rounding h+ can only tie h when softplus(e) << ulp(h)
    assert (F.softplus(e) > 0).all()
    assert (pt.apply(h, e) >= h).all()
    assert (pt.apply(h, e) > h)[F.softplus(e) > 1e-12].all()


def test_deterministic_mode_is_softplus_mu_and_replays():
    head = pt.PerturbationHead({"a": 3})
    with torch.no_grad():
        head.mu["a"].copy_(torch.tensor([-1.0, 0.0, 2.0]))
    h = torch.randn(2, 3, 5, 5)
    d = pt.infer_gaussian(head, "a", mode="deterministic")
    a = pt.perturb(h, d, "deterministic", torch.Generator().manual_seed(0))
    b = pt.perturb(h, d, "deterministic", torch.Generator().manual_seed(99))
    assert torch.equal(a, b)
    assert torch.allclose(a - h, F.softplus(head.mu["a"]).detach().reshape(1, 3, 1, 1).expand_as(h))


def test_channelwise_broadcast():
    d = pt.GaussianPerturbation(torch.tensor([0.0, 100.0]), torch.full((2,), -40.0))
    e = pt.sample(d, seed=0, shape=(3, 2, 4, 4)).e
    assert e[:, 0].abs().max() < 1e-15 and (e[:, 1] - 100).abs().max() < 1e-12


def test_determinism():
    d = pt.GaussianPerturbation(torch.randn(4), torch.randn(4))
    assert torch.equal(pt.sample(d, seed=3, shape=(2, 4)).e, pt.sample(d, seed=3, shape=(2, 4)).e)
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    assert torch.equal(pt.draw(d, (2, 4), "full", g1), pt.draw(d, (2, 4), "full", g2))


def test_reparameterization_gradient_quadratic():
    # E[f(h+)] with f(v) = sum (v - 1)^2, estimated with common random numbers
    mu = torch.tensor([0.3, -0.5], dtype=torch.float64, requires_grad=True)
    ls = torch.tensor([-0.2, 0.4], dtype=torch.float64, requires_grad=True)
    h = torch.tensor([0.1, 0.7], dtype=torch.float64)

    def mc():
        e = pt.sample(pt.GaussianPerturbation(mu, ls), seed=11, shape=(10_000, 2)).e
        return ((pt.apply(h, e) - 1.0) ** 2).sum(-1).mean()

    mc().backward()
    assert rel_err(mu.grad, fd_grad(mc, mu.data, 1e-4)) < 0.05
    assert rel_err(ls.grad, fd_grad(mc, ls.data, 1e-4)) < 0.05


def test_kl_to_standard_normal():
    d = pt.GaussianPerturbation(torch.zeros(3), torch.zeros(3))
    assert float(pt.kl_to_standard_normal(d)) == 0.0
    d = pt.GaussianPerturbation(torch.tensor([1.0]), torch.tensor([0.0]))
    assert math.isclose(float(pt.kl_to_standard_normal(d)), 0.5, rel_tol=1e-6)


def test_ascent_moves_params_along_finite_difference_gradient(toy_mlp):
    aux_model = aug.AuxModel(toy_mlp).double()
    settings_ = aug.AugmentSettings(mixup_mode="off", relax=0.0)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(6, 4, dtype=torch.float64, generator=g)
    y = one_hot(torch.tensor([0, 1, 0, 1, 1, 0]), 2, torch.float64)

    def objective():
        return aug.ada_objective(toy_mlp, aux_model, x, y, settings_, torch.Generator().manual_seed(42))

    fd_mu = fd_grad(objective, aux_model.phi_p.mu["fc1"].data)
    fd_ls = fd_grad(objective, aux_model.phi_p.log_sigma["fc1"].data)
    lr = 0.1
    aug.maximize_aux(toy_mlp, aux_model, x, y, 1, lr, settings_, torch.Generator().manual_seed(42))
    d = pt.infer_gaussian(aux_model.phi_p, "fc1")
    assert rel_err(d.mu.detach(), lr * fd_mu) < 1e-3
    assert rel_err(d.log_sigma.detach(), lr * fd_ls) < 1e-3
