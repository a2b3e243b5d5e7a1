"""1D ConvNeXt-v2-style signal encoder.

Leads enter as input channels of a patchify stem; four stages of depthwise-conv
blocks with global response normalization produce a token sequence for
cross-attention, and a single-query attention pooler yields the unit-norm
embedding used by the contrastive objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import INIT_STD, NORM_EPS, init_weights, l2_normalize


@dataclass(frozen=True)
class ConvNeXt1DConfig:
    in_leads: int = 12
    stem_kernel: int = 4
    stem_stride: int = 4
    depths: tuple[int, int, int, int] = (3, 3, 9, 3)
    widths: tuple[int, int, int, int] = (96, 192, 384, 768)
    dw_kernel: int = 7
    mlp_ratio: float = 4.0
    embed_dim: int = 256
    variant: str = "tiny"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.depths) != 4 or len(self.widths) != 4:
            raise ValueError("depths and widths must both have 4 stages")
        if any(d < 1 for d in self.depths) or any(w < 1 for w in self.widths):
            raise ValueError("depths and widths must be positive")
        if self.dw_kernel % 2 != 1:
            raise ValueError("dw_kernel must be odd")
        if min(self.in_leads, self.stem_kernel, self.stem_stride, self.embed_dim) < 1:
            raise ValueError("in_leads, stem_kernel, stem_stride, embed_dim must be positive")

    @classmethod
    def tiny(cls, **overrides) -> "ConvNeXt1DConfig":
        return cls(depths=(3, 3, 9, 3), widths=(96, 192, 384, 768), variant="tiny", **overrides)

    @classmethod
    def base(cls, **overrides) -> "ConvNeXt1DConfig":
        return cls(depths=(3, 3, 27, 3), widths=(128, 256, 512, 1024), variant="base", **overrides)


def token_length(config: ConvNeXt1DConfig, n_samples: int) -> int:
    """Output sequence length: the floor chain through the stem then three stride-2 stages."""
    length = (n_samples - config.stem_kernel) // config.stem_stride + 1
    for _ in range(3):
        length = (length - 2) // 2 + 1
    return length


@dataclass
class SignalEncoding:
    """Token sequence for cross-attention plus the pooled unit-norm embedding."""

    tokens: torch.Tensor  # [B, T', widths[3]]
    pooled: torch.Tensor  # [B, embed_dim], unit-norm rows


class GRN1d(nn.Module):
    """Global response normalization over the token axis (channels-last input)."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gx = torch.norm(x, p=2, dim=1, keepdim=True)  # [B, 1, C]
        nx = gx / (gx.mean(dim=-1, keepdim=True) + NORM_EPS)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock1d(nn.Module):
    """Depthwise conv, norm, pointwise expansion, GELU, GRN, pointwise projection, residual."""

    def __init__(self, dim: int, dw_kernel: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.dwconv = nn.Conv1d(dim, dim, dw_kernel, padding=dw_kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=NORM_EPS)
        self.pwconv1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.grn = GRN1d(hidden)
        self.pwconv2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        x = self.dwconv(x).transpose(1, 2)  # [B, T, C]
        x = self.pwconv2(self.grn(self.act(self.pwconv1(self.norm(x)))))
        return residual + x.transpose(1, 2)


class Downsample1d(nn.Module):
    """Stage transition: channels-last norm then stride-2 conv."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim_in, eps=NORM_EPS)
        self.conv = nn.Conv1d(dim_in, dim_out, kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.norm(x.transpose(1, 2)).transpose(1, 2))


class ConvNeXt1dTrunk(nn.Module):
    def __init__(self, config: ConvNeXt1DConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Conv1d(config.in_leads, config.widths[0], config.stem_kernel, stride=config.stem_stride)
        self.stem_norm = nn.LayerNorm(config.widths[0], eps=NORM_EPS)
        stages: list[nn.Module] = []
        for i, (depth, width) in enumerate(zip(config.depths, config.widths)):
            if i > 0:
                stages.append(Downsample1d(config.widths[i - 1], width))
            stages.extend(ConvNeXtBlock1d(width, config.dw_kernel, config.mlp_ratio) for _ in range(depth))
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.stem_norm(x.transpose(1, 2)).transpose(1, 2)
        return self.stages(x).transpose(1, 2)  # [B, T', widths[3]]


class AttentionPool(nn.Module):
    """Single learned query attending over the final tokens, projected and L2-normalized."""

    def __init__(self, width: int, embed_dim: int):
        super().__init__()
        self.query = nn.Parameter(torch.empty(width))
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width, eps=NORM_EPS)
        self.proj = nn.Linear(width, embed_dim)
        nn.init.trunc_normal_(self.query, std=INIT_STD)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)
        scores = (k @ self.query.to(k.dtype)) / math.sqrt(k.shape[-1])  # [B, T]
        attn = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("bt,btc->bc", attn, v)
        return l2_normalize(self.proj(self.norm(pooled)))


class SignalEncoder(nn.Module):
    """Full signal tower: ConvNeXt trunk, token norm, attention pooling."""

    def __init__(self, config: ConvNeXt1DConfig):
        super().__init__()
        self.config = config
        self.trunk = ConvNeXt1dTrunk(config)
        self.token_norm = nn.LayerNorm(config.widths[3], eps=NORM_EPS)
        self.pool = AttentionPool(config.widths[3], config.embed_dim)

    def forward(self, x: torch.Tensor) -> SignalEncoding:
        if x.ndim != 3 or x.shape[1] != self.config.in_leads:
            raise ValueError(f"expected input [B, {self.config.in_leads}, n_samples], got {tuple(x.shape)}")
        if x.shape[2] < self.config.stem_stride * 8:
            raise ValueError(f"need at least {self.config.stem_stride * 8} samples, got {x.shape[2]}")
        if not torch.isfinite(x).all():
            raise ValueError("signal batch contains non-finite values")
        tokens = self.token_norm(self.trunk(x))
        return SignalEncoding(tokens=tokens, pooled=self.pool(tokens))


def build_signal_encoder(config: ConvNeXt1DConfig, seed: int | None = None) -> SignalEncoder:
    """Construct with the shared deterministic init (trunc-normal 0.02, zero biases)."""
    if seed is not None:
        torch.manual_seed(seed)
    encoder = SignalEncoder(config)
    encoder.apply(init_weights)
    return encoder


def count_params(config: ConvNeXt1DConfig) -> int:
    """Exact trainable parameter count of the signal tower."""
    encoder = SignalEncoder(config)
    return sum(p.numel() for p in encoder.parameters() if p.requires_grad)


def count_trunk_params(config: ConvNeXt1DConfig) -> int:
    """Parameter count of the convolutional trunk alone (the backbone named by the variant)."""
    encoder = SignalEncoder(config)
    return sum(p.numel() for p in encoder.trunk.parameters() if p.requires_grad)
