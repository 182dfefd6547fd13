"""Quantization, likelihood models, channel-conditional parameter prediction,
and channel-entropy analytics.

Latents are modeled per element as a discretized Gaussian whose mean/scale
come from the hyper side-information plus previously coded channel slices;
the hyper-latent itself uses a learned per-channel factorized model. All
likelihoods are clamped to [1e-9, 1] before any log, which keeps entropy
maps nonnegative by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_MIN = 0.11
LIKELIHOOD_MIN = 1e-9


class _LowerBound(torch.autograd.Function):
    """clamp(x, min=bound) whose backward lets gradients push x back above
    the bound; a plain clamp would freeze every saturated element, so an
    overconfident scale prediction could never recover during training."""

    @staticmethod
    def forward(ctx, x, bound: float):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp(min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


@dataclass
class GaussianParams:
    """Per-element mean and scale of the latent's conditional Gaussian."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have identical shapes")


def quantize(v: torch.Tensor, mu: torch.Tensor | None = None, mode: str = "train",
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Quantize ``v``: additive uniform noise in training, mean-offset rounding in eval.

    ``mode="none"`` passes the values through unchanged (used to disable
    quantization for gradient checks).
    """
    if mode == "train":
        noise = torch.rand(v.shape, dtype=v.dtype, device=v.device,
                           generator=generator) - 0.5
        return v + noise
    if mode == "eval":
        if mu is None:
            return torch.round(v)
        return torch.round(v - mu) + mu
    if mode == "none":
        return v
    raise ValueError(f"unknown quantization mode {mode!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return torch.special.ndtr(x)


def discretized_gaussian(v_hat: torch.Tensor, mu: torch.Tensor,
                         sigma: torch.Tensor) -> torch.Tensor:
    """Unit-bin Gaussian mass Phi((v-mu+.5)/sigma) - Phi((v-mu-.5)/sigma), unclamped.

    Evaluated on the lower tail via |v-mu| so the difference never cancels
    against values near 1; this also makes the mass exactly symmetric in
    the residual.
    """
    sigma = sigma.clamp(min=SIGMA_MIN)
    centered = torch.abs(v_hat - mu)
    return (_std_normal_cdf((0.5 - centered) / sigma)
            - _std_normal_cdf((-0.5 - centered) / sigma))


def gaussian_likelihood(v_hat: torch.Tensor, params: GaussianParams | None = None,
                        mu: torch.Tensor | None = None,
                        sigma: torch.Tensor | None = None) -> torch.Tensor:
    """Discretized-Gaussian likelihood clamped to [1e-9, 1]."""
    if params is not None:
        mu, sigma = params.mu, params.sigma
    if mu is None or sigma is None:
        raise ValueError("provide either params or mu and sigma")
    p = discretized_gaussian(v_hat, mu, sigma).clamp(max=1.0)
    return lower_bound(p, LIKELIHOOD_MIN)


def rate_bits(p: torch.Tensor) -> torch.Tensor:
    """Elementwise code length -log2(p) in bits."""
    return -torch.log2(p)


# ---------------------------------------------------------------------------
# Factorized prior for the hyper-latent

_PRIOR_FILTERS = (3, 3, 3)
_PRIOR_INIT_SCALE = 10.0


class FactorizedPrior(nn.Module):
    """Learned per-channel monotone CDF for the quantized hyper-latent.

    Each channel gets a small monotone network (positive matrices, bounded
    gating) whose sigmoid output is the CDF; the symbol probability is the
    CDF difference over the unit bin.
    """

    def __init__(self, channels: int, filters=_PRIOR_FILTERS, init_scale=_PRIOR_INIT_SCALE):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            matrix = torch.full((channels, dims[k + 1], dims[k]), init)
            self._matrices.append(nn.Parameter(matrix))
            bias = torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if k < len(self.filters):
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))
        with torch.no_grad():
            # random biases break unit symmetry but drag the median around;
            # re-center it so a fresh model peaks at zero, where the
            # hyper-latent is quantized
            shift = self._logits(torch.zeros(channels, 1, 1))
            self._biases[-1] -= shift

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: (channels, 1, n) -> (channels, 1, n)
        u = x
        for k in range(len(self.filters) + 1):
            u = F.softplus(self._matrices[k]) @ u + self._biases[k]
            if k < len(self.filters):
                u = u + torch.tanh(self._factors[k]) * torch.tanh(u)
        return u

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel CDF at x of shape (channels, n)."""
        return torch.sigmoid(self._logits(x[:, None, :]))[:, 0, :]

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Unit-bin probability of z_hat (B, C, h, w), clamped to [1e-9, 1]."""
        b, c, h, w = z_hat.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        flat = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        # evaluate both sigmoids on the side that avoids catastrophic
        # cancellation; an exactly-centered bin can use either side
        sign = -torch.sign(lower + upper).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return lower_bound(p.clamp(max=1.0), LIKELIHOOD_MIN)


def factorized_likelihood(z_hat: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    return prior.likelihood(z_hat)


# ---------------------------------------------------------------------------
# Channel slices

@dataclass
class SliceLayout:
    num_slices: int
    channels_per_slice: list[int]

    @property
    def total_channels(self) -> int:
        return sum(self.channels_per_slice)

    def boundaries(self) -> list[int]:
        offsets = [0]
        for c in self.channels_per_slice:
            offsets.append(offsets[-1] + c)
        return offsets


def slice_layout(m: int, num_slices: int) -> SliceLayout:
    """Split M channels into num_slices groups; a remainder goes to the last slice."""
    if num_slices < 1:
        raise ValueError("num_slices must be >= 1")
    if num_slices > m:
        raise ValueError(f"num_slices={num_slices} exceeds channel count M={m}")
    base = m // num_slices
    channels = [base] * num_slices
    channels[-1] += m - base * num_slices
    return SliceLayout(num_slices=num_slices, channels_per_slice=channels)


class SlicePredictor(nn.Module):
    """Conditional Gaussian parameters for one slice from side info + prior slices."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.act = nn.GELU()
        self.head_mu = nn.Conv2d(hidden, out_channels, 1)
        self.head_scale = nn.Conv2d(hidden, out_channels, 1)
        # start wide (~2.5): a fresh model should not price residuals in the
        # saturated likelihood tail; training narrows the scale from above
        nn.init.constant_(self.head_scale.bias, 2.3)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.act(self.conv2(self.act(self.conv1(x))))
        mu = self.head_mu(h)
        # softplus offset realizes the sigma >= 0.11 floor smoothly
        sigma = SIGMA_MIN + F.softplus(self.head_scale(h))
        return mu, sigma


class ChannelContextModel(nn.Module):
    """Slice-sequential entropy parameter prediction.

    Slice i sees the hyper side information plus the already-quantized
    slices 0..i-1 and nothing else, which is what makes sequential decoding
    possible.
    """

    def __init__(self, m: int, num_slices: int):
        super().__init__()
        self.layout = slice_layout(m, num_slices)
        hidden = max(32, m // 2)
        self.predictors = nn.ModuleList()
        seen = 0
        for c in self.layout.channels_per_slice:
            self.predictors.append(SlicePredictor(2 * m + seen, hidden, c))
            seen += c

    @property
    def num_slices(self) -> int:
        return self.layout.num_slices

    def predict_slice(self, s_mean: torch.Tensor, s_scale: torch.Tensor,
                      previous_slices: list[torch.Tensor], i: int
                      ) -> tuple[torch.Tensor, torch.Tensor]:
        """(mu_i, sigma_i) for slice i given quantized slices 0..i-1 in order."""
        if not 0 <= i < self.num_slices:
            raise ValueError(f"slice index {i} out of range")
        if len(previous_slices) != i:
            raise ValueError(f"slice {i} requires exactly {i} previous slices, "
                             f"got {len(previous_slices)}")
        for j, prev in enumerate(previous_slices):
            expect = self.layout.channels_per_slice[j]
            if prev.shape[1] != expect:
                raise ValueError(f"previous slice {j} has {prev.shape[1]} channels, "
                                 f"expected {expect}")
        x = torch.cat([s_mean, s_scale] + list(previous_slices), dim=1)
        return self.predictors[i](x)

    def forward(self, y: torch.Tensor, s_mean: torch.Tensor, s_scale: torch.Tensor,
                mode: str = "train", generator: torch.Generator | None = None):
        """Quantize y slice by slice and return (y_hat, GaussianParams)."""
        bounds = self.layout.boundaries()
        y_hat_slices: list[torch.Tensor] = []
        mus, sigmas = [], []
        for i in range(self.num_slices):
            y_i = y[:, bounds[i]:bounds[i + 1]]
            mu_i, sigma_i = self.predict_slice(s_mean, s_scale, y_hat_slices, i)
            y_hat_slices.append(quantize(y_i, mu_i, mode=mode, generator=generator))
            mus.append(mu_i)
            sigmas.append(sigma_i)
        y_hat = torch.cat(y_hat_slices, dim=1)
        return y_hat, GaussianParams(mu=torch.cat(mus, 1), sigma=torch.cat(sigmas, 1))


def charm_predict_slice(model: ChannelContextModel, s_mean, s_scale,
                        previous_slices, i) -> GaussianParams:
    mu, sigma = model.predict_slice(s_mean, s_scale, previous_slices, i)
    return GaussianParams(mu=mu, sigma=sigma)


# ---------------------------------------------------------------------------
# Channel-entropy analytics

@dataclass
class ChannelEntropyRanking:
    mean_entropy: np.ndarray  # bits per channel
    order: np.ndarray  # channel indices, descending entropy, ties by index

    def __post_init__(self):
        self.mean_entropy = np.asarray(self.mean_entropy, dtype=np.float64)
        self.order = np.asarray(self.order, dtype=np.int64)


def rank_channels_topk(mean_entropy: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest entropies, descending; ties break to the lower index."""
    mean_entropy = np.asarray(mean_entropy, dtype=np.float64)
    if mean_entropy.ndim != 1:
        raise ValueError("mean_entropy must be a vector")
    if not 1 <= k <= mean_entropy.shape[0]:
        raise ValueError(f"K={k} out of range [1, {mean_entropy.shape[0]}]")
    order = np.argsort(-mean_entropy, kind="stable")
    return order[:k]


def mean_channel_entropy(likelihoods: torch.Tensor) -> np.ndarray:
    """Average -log2 likelihood per channel over batch and spatial dims (bits)."""
    e = rate_bits(likelihoods.clamp(LIKELIHOOD_MIN, 1.0))
    dims = [d for d in range(e.dim()) if d != e.dim() - 3]
    return e.mean(dim=dims).detach().cpu().numpy().astype(np.float64)


def channel_entropy_profile(y_hat: torch.Tensor, params: GaussianParams
                            ) -> tuple[np.ndarray, ChannelEntropyRanking]:
    """Entropy map (C, h, w) in bits plus the descending channel ranking."""
    if y_hat.dim() == 4:
        if y_hat.shape[0] != 1:
            raise ValueError("entropy profiles are per image; pass a single item")
        y_hat = y_hat[0]
        params = GaussianParams(mu=params.mu[0], sigma=params.sigma[0])
    p = gaussian_likelihood(y_hat, params=params)
    entropy_map = rate_bits(p).detach().cpu().numpy().astype(np.float64)
    mean_entropy = entropy_map.mean(axis=(1, 2))
    order = np.argsort(-mean_entropy, kind="stable")
    return entropy_map, ChannelEntropyRanking(mean_entropy=mean_entropy, order=order)
