"""Layers with a factorized Gaussian posterior on every weight (Bayes by Backprop).

Each weight is ``mu + exp(log_sigma) * eps`` with a fresh ``eps`` per forward pass,
drawn from torch's global generator. The prior is ``N(0, prior_std^2)``.
"""

import contextlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_LOG_SIGMA = -5.0


def gaussian_kl(mu: torch.Tensor, log_sigma: torch.Tensor, prior_std: float = 1.0) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, prior_std^2)) summed over every entry."""
    sigma_sq = torch.exp(2 * log_sigma)
    return torch.sum(
        math.log(prior_std) - log_sigma + (sigma_sq + mu**2) / (2 * prior_std**2) - 0.5
    )


class BayesianLayer(nn.Module):
    """Holds the posterior of ``template``'s weight and bias, initialized from its means."""

    def __init__(self, template: nn.Module, prior_std: float = 1.0):
        super().__init__()
        self.prior_std = prior_std
        self.use_mean = False
        self.weight_mu = nn.Parameter(template.weight.detach().clone())
        self.weight_log_sigma = nn.Parameter(torch.full_like(template.weight, INIT_LOG_SIGMA))
        self.bias_mu = nn.Parameter(template.bias.detach().clone())
        self.bias_log_sigma = nn.Parameter(torch.full_like(template.bias, INIT_LOG_SIGMA))

    def sample(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.use_mean:
            return self.weight_mu, self.bias_mu
        weight = self.weight_mu + torch.exp(self.weight_log_sigma) * torch.randn_like(self.weight_mu)
        bias = self.bias_mu + torch.exp(self.bias_log_sigma) * torch.randn_like(self.bias_mu)
        return weight, bias

    def kl(self) -> torch.Tensor:
        return gaussian_kl(self.weight_mu, self.weight_log_sigma, self.prior_std) + gaussian_kl(
            self.bias_mu, self.bias_log_sigma, self.prior_std
        )


class BayesianConv2d(BayesianLayer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, prior_std=1.0):
        super().__init__(nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding), prior_std)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        weight, bias = self.sample()
        return F.conv2d(x, weight, bias, self.stride, self.padding)


class BayesianConvTranspose2d(BayesianLayer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, prior_std=1.0):
        super().__init__(nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding), prior_std)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        weight, bias = self.sample()
        return F.conv_transpose2d(x, weight, bias, self.stride, self.padding)


class BayesianLinear(BayesianLayer):
    def __init__(self, in_features, out_features, prior_std=1.0):
        super().__init__(nn.Linear(in_features, out_features), prior_std)

    def forward(self, x):
        weight, bias = self.sample()
        return F.linear(x, weight, bias)


def weight_kl(module: nn.Module) -> torch.Tensor:
    """Posterior-to-prior KL over every Bayesian layer inside ``module``."""
    terms = [m.kl() for m in module.modules() if isinstance(m, BayesianLayer)]
    if not terms:
        return torch.zeros((), dtype=next(module.parameters()).dtype)
    return torch.stack(terms).sum()


@contextlib.contextmanager
def posterior_mean(module: nn.Module):
    """Evaluate with every Bayesian weight fixed at its posterior mean."""
    layers = [m for m in module.modules() if isinstance(m, BayesianLayer)]
    for layer in layers:
        layer.use_mean = True
    try:
        yield module
    finally:
        for layer in layers:
            layer.use_mean = False
