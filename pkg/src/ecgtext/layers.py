"""Shared neural building blocks: attention, MLP, deterministic initialization.

All modules run in whatever dtype their parameters carry, so gradient checks
can execute the full stack in float64.
"""

from __future__ import annotations

import math

import torch
from torch import nn

NORM_EPS = 1e-6
INIT_STD = 0.02


def init_weights(module: nn.Module) -> None:
    """Init convention for the whole model family: truncated normal weights, zero biases.

    Use via `model.apply(init_weights)` after seeding the global RNG.
    """
    if isinstance(module, (nn.Linear, nn.Conv1d)):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.padding_idx is not None:
            with torch.no_grad():
                module.weight[module.padding_idx].zero_()
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head attention: self-attention by default, cross-attention when kv_dim is set."""

    def __init__(self, width: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} must be divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.kv_proj = nn.Linear(kv_dim if kv_dim is not None else width, 2 * width)
        self.out_proj = nn.Linear(width, width)

    def forward(
        self,
        x: torch.Tensor,
        kv: torch.Tensor | None = None,
        causal: bool = False,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, q_len, _ = x.shape
        source = x if kv is None else kv
        k_len = source.shape[1]
        q = self.q_proj(x).view(b, q_len, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv_proj(source).chunk(2, dim=-1)
        k = k.view(b, k_len, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, k_len, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if causal:
            future = torch.triu(torch.ones(q_len, k_len, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, q_len, -1)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, width: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(width * ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block with optional cross-attention after self-attention."""

    def __init__(
        self,
        width: int,
        heads: int,
        mlp_ratio: float = 4.0,
        cross_dim: int | None = None,
        causal: bool = False,
    ):
        super().__init__()
        self.causal = causal
        self.norm_attn = nn.LayerNorm(width, eps=NORM_EPS)
        self.attn = Attention(width, heads)
        if cross_dim is not None:
            self.norm_cross = nn.LayerNorm(width, eps=NORM_EPS)
            self.cross_attn = Attention(width, heads, kv_dim=cross_dim)
        else:
            self.norm_cross = None
            self.cross_attn = None
        self.norm_mlp = nn.LayerNorm(width, eps=NORM_EPS)
        self.mlp = MLP(width, mlp_ratio)

    def forward(
        self,
        x: torch.Tensor,
        kv: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        x = x + self.attn(self.norm_attn(x), causal=self.causal, key_padding_mask=key_padding_mask)
        if self.cross_attn is not None:
            if kv is None:
                raise ValueError("cross-attention block requires key/value tokens")
            x = x + self.cross_attn(self.norm_cross(x), kv=kv)
        return x + self.mlp(self.norm_mlp(x))


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)
