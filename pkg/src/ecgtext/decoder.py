"""Autoregressive captioning decoder.

Causal self-attention over text with cross-attention over the signal token
sequence in every layer; the output projection is tied to the token embedding.
Teacher forcing at training time, greedy decoding for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import NORM_EPS, TransformerBlock, init_weights
from .text_encoder import BOS_ID, EOS_ID


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    max_len: int = 128
    vocab_size: int = 0  # bound to the built vocabulary by the trainer
    cross_dim: int = 768  # width of the signal token sequence

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if min(self.layers, self.heads, self.width, self.max_len, self.cross_dim) < 1:
            raise ValueError("all dimensions must be positive")


class CaptionDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        if config.vocab_size < 5:
            raise ValueError("vocab_size must cover the special tokens")
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.width)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, config.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.width, config.heads, cross_dim=config.cross_dim, causal=True)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.width, eps=NORM_EPS)

    def forward(self, ecg_tokens: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits [B, L, V]; position i sees text inputs <= i and all ECG tokens."""
        if text_ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {text_ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ecg_tokens.shape[0] != text_ids.shape[0]:
            raise ValueError("batch sizes of ecg_tokens and text_ids differ")
        if ecg_tokens.shape[-1] != self.config.cross_dim:
            raise ValueError(f"ecg token width {ecg_tokens.shape[-1]} != cross_dim {self.config.cross_dim}")
        x = self.token_emb(text_ids) + self.pos_emb[: text_ids.shape[1]]
        for block in self.blocks:
            x = block(x, kv=ecg_tokens)
        x = self.final_norm(x)
        return x @ self.token_emb.weight.t()  # weight-tied output projection


@torch.no_grad()
def greedy_decode(decoder: CaptionDecoder, ecg_tokens: torch.Tensor, max_len: int | None = None) -> list[int]:
    """Argmax decoding for one signal: starts at BOS, stops at EOS or max_len ids."""
    if ecg_tokens.ndim == 2:
        ecg_tokens = ecg_tokens.unsqueeze(0)
    if ecg_tokens.shape[0] != 1:
        raise ValueError("greedy_decode expects a single signal")
    max_len = decoder.config.max_len if max_len is None else min(max_len, decoder.config.max_len)
    ids = [BOS_ID]
    device = ecg_tokens.device
    while len(ids) < max_len:
        logits = decoder(ecg_tokens, torch.tensor([ids], dtype=torch.long, device=device))
        ids.append(int(logits[0, -1].argmax()))
        if ids[-1] == EOS_ID:
            break
    return ids


def build_decoder(config: DecoderConfig, seed: int | None = None) -> CaptionDecoder:
    if seed is not None:
        torch.manual_seed(seed)
    decoder = CaptionDecoder(config)
    decoder.apply(init_weights)
    with torch.no_grad():
        nn.init.trunc_normal_(decoder.pos_emb, std=0.02)
    return decoder
