"""A tour of the two stochastic pieces: the feature perturbation and the label mixup."""
import torch

from sdgen import mixup as mx
from sdgen import perturbation as pt
from sdgen.backbone import one_hot

# A per-channel Gaussian over feature offsets. The draw is reparameterized,
# so gradients flow back to mu and log_sigma.
mu = torch.tensor([0.0, 1.0, -1.0], requires_grad=True)
log_sigma = torch.tensor([-1.0, 0.0, 0.5], requires_grad=True)
dist = pt.GaussianPerturbation(mu, log_sigma)

h = torch.zeros(4, 3)
s = pt.sample(dist, seed=0, shape=h.shape)
h_plus = pt.apply(h, s.e)
print("h+ (offsets go through softplus, so every entry is positive):")
print(h_plus)

h_plus.sum().backward()
print("d sum / d mu:", mu.grad)
print("d sum / d log_sigma:", log_sigma.grad)

# Sample statistics of a large draw match the parameters.
big = pt.sample(pt.GaussianPerturbation(torch.tensor([2.0]), torch.tensor([0.5]).log()), seed=1,
                shape=(200_000, 1)).e
print("mean %.4f (2.0)  std %.4f (0.5)" % (big.mean(), big.std()))

# Label side: smooth, then mix clean and perturbed pairs.
y = one_hot(torch.tensor([0, 1, 2, 1]), 3)
y_tilde = mx.smooth_label(y, rho=0.8, tau=1.0, seed=0)
print("smoothed labels:")
print(y_tilde)

params = mx.MixupParams(torch.tensor(2.0), torch.tensor(2.0), torch.tensor(1.0))
lam = mx.sample_lambda(params, 4, seed=0)
pair = mx.mix(h, h_plus.detach(), y, y_tilde, lam)
print("lambda:", lam)
print("mixed labels still sum to one:", pair.y_mixed.sum(-1))
print("and keep the original argmax:", pair.y_mixed.argmax(-1).tolist())
