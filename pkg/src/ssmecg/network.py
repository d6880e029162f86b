"""S4 blocks and the six-block ECG backbone.

Activations are kept channel-major, ``(batch, H, L)``, so the FFT convolution
runs along the contiguous axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ssm import discretize_torch, fft_causal_conv, hippo_init, kernel_torch


@dataclass
class NetworkConfig:
    d_model: int = 256
    d_state: int = 64
    n_blocks: int = 6
    dropout: float = 0.2
    embedding_dim: int = 256
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    window_len: int | None = 1000

    def __post_init__(self):
        if self.d_model < 1 or self.d_state < 1 or self.n_blocks < 1:
            raise ValueError("d_model, d_state and n_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` (erf form, not the tanh approximation)."""
    return F.gelu(x, approximate="none")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).float()


class ChannelAffine(nn.Module):
    """Position-wise affine map over the channel axis of ``(batch, C, L)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(_uniform(rng, (d_out, d_in), d_in))
        self.bias = nn.Parameter(_uniform(rng, (d_out,), d_in))

    def forward(self, x):
        return torch.matmul(self.weight, x) + self.bias[:, None]


class Linear(nn.Module):
    """Affine map on the last axis, initialised from a numpy generator."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(_uniform(rng, (d_out, d_in), d_in))
        self.bias = nn.Parameter(_uniform(rng, (d_out,), d_in))

    def forward(self, x):
        return x @ self.weight.T + self.bias


class ChannelLayerNorm(nn.Module):
    def __init__(self, d_model: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mean) * torch.rsqrt(var + self.eps) * self.weight[:, None] + self.bias[:, None]


class S4Layer(nn.Module):
    """H independent SSM channels followed by a position-wise channel mix.

    Each channel owns a dense ``A`` (N x N), ``B``, ``C`` and a log step size.
    ``D`` is identically zero and has no parameter.
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        init = hippo_init(d_state, d_model, rng=rng, dt_min=dt_min, dt_max=dt_max)
        self.A = nn.Parameter(torch.from_numpy(init["A"]).float())
        self.B = nn.Parameter(torch.from_numpy(init["B"]).float())
        self.C = nn.Parameter(torch.from_numpy(init["C"]).float())
        self.log_delta = nn.Parameter(torch.from_numpy(np.log(init["delta"])).float())
        self.mix = ChannelAffine(d_model, d_model, rng)

    def ssm_kernel(self, L: int) -> torch.Tensor:
        A_bar, B_bar = discretize_torch(self.A, self.B, torch.exp(self.log_delta))
        return kernel_torch(A_bar, B_bar, self.C, L)

    def forward(self, u):
        if not torch.isfinite(u).all():
            raise ValueError("non-finite input to S4 layer")
        y = fft_causal_conv(u, self.ssm_kernel(u.shape[-1]))
        return self.mix(y)


class S4Block(nn.Module):
    """``x + proj(dropout(gelu(s4(norm(x)))))``."""

    def __init__(self, d_model: int, d_state: int, dropout: float, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.norm = ChannelLayerNorm(d_model)
        self.s4 = S4Layer(d_model, d_state, rng, dt_min=dt_min, dt_max=dt_max)
        self.dropout = dropout
        self.proj = ChannelAffine(d_model, d_model, rng)

    def forward(self, x):
        z = gelu(self.s4(self.norm(x)))
        z = F.dropout(z, p=self.dropout, training=self.training)
        return x + self.proj(z)


class S4Backbone(nn.Module):
    """Linear encoder, ``n_blocks`` residual S4 blocks, mean pool, linear decoder.

    Input is ``(batch, L)`` single-lead windows; output is ``(batch, embedding_dim)``.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or NetworkConfig()
        rng = np.random.default_rng(seed)
        c = self.config
        self.encoder = ChannelAffine(1, c.d_model, rng)
        self.blocks = nn.ModuleList(
            S4Block(c.d_model, c.d_state, c.dropout, rng, dt_min=c.dt_min, dt_max=c.dt_max)
            for _ in range(c.n_blocks)
        )
        self.decoder = Linear(c.d_model, c.embedding_dim, rng)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled block output, ``(batch, d_model)``; everything before the decoder."""
        if x.ndim != 2:
            raise ValueError(f"expected (batch, L) windows, got shape {tuple(x.shape)}")
        if self.config.window_len is not None and x.shape[1] != self.config.window_len:
            raise ValueError(f"expected windows of length {self.config.window_len}, got {x.shape[1]}")
        h = self.encoder(x.unsqueeze(1))
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.features(x))

    def backbone_parameters(self):
        """Parameters frozen in projector mode (encoder and blocks)."""
        yield from self.encoder.parameters()
        yield from self.blocks.parameters()


class LinearHead(nn.Module):
    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        super().__init__()
        self.fc = Linear(d_in, d_out, np.random.default_rng(seed))

    def forward(self, z):
        return self.fc(z)


class MLPHead(nn.Module):
    """Two affine maps with a GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, z):
        return self.fc2(gelu(self.fc1(z)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
