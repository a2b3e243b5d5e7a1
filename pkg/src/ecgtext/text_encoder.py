"""Word-level tokenizer and bidirectional transformer text encoder.

The encoder reads the sequence with a CLS summary token in place of the leading
BOS and projects the CLS state to the shared embedding dimension. A pretrained
biomedical encoder can be dropped in behind the same contract: token ids in,
unit-norm vectors out.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .layers import NORM_EPS, TransformerBlock, init_weights, l2_normalize

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
CLS_ID = 4
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<cls>")

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)?")


def word_tokens(text: str) -> list[str]:
    """Lowercased, punctuation-separated word tokens."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # index = id; positions 0..4 are the special tokens
    token_to_id: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with the special tokens {SPECIAL_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocab(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Count word tokens over the corpus; order by frequency desc then lexicographic."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    counts: dict[str, int] = {}
    for text in corpus:
        for token in word_tokens(text):
            counts[token] = counts.get(token, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(tokens=SPECIAL_TOKENS + tuple(kept))


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """BOS + word ids + EOS, truncated so EOS stays last, right-padded to max_len.

    Returns (ids, mask) where mask marks non-PAD positions.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2 (BOS and EOS)")
    ids = [BOS_ID] + [vocab.id_for(t) for t in word_tokens(text)]
    ids = ids[: max_len - 1] + [EOS_ID]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out, out != PAD_ID


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Space-joined tokens, specials dropped."""
    return " ".join(vocab.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS))


def save_vocab(vocab: Vocabulary, path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(vocab.tokens)), encoding="utf-8")
    return path


def load_vocab(path: str | Path) -> Vocabulary:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        token, idx = line.split("\t")
        pairs.append((int(idx), token))
    pairs.sort()
    return Vocabulary(tokens=tuple(t for _, t in pairs))


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    max_len: int = 128
    vocab_size: int = 0  # bound to the built vocabulary by the trainer
    embed_dim: int = 256

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if min(self.layers, self.heads, self.width, self.max_len, self.embed_dim) < 1:
            raise ValueError("all dimensions must be positive")


class TextEncoder(nn.Module):
    """Bidirectional transformer over non-PAD positions; CLS state -> unit-norm embedding."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        if config.vocab_size < len(SPECIAL_TOKENS):
            raise ValueError("vocab_size must cover the special tokens")
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.width, padding_idx=PAD_ID)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, config.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.width, config.heads) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.width, eps=NORM_EPS)
        self.proj = nn.Linear(config.width, config.embed_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ValueError("ids and mask must share shape [B, L]")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        ids = ids.clone()
        ids[:, 0] = CLS_ID  # summary slot replaces the leading BOS
        x = self.token_emb(ids) + self.pos_emb[: ids.shape[1]]
        key_padding = ~mask.bool()
        key_padding = key_padding & (torch.arange(ids.shape[1], device=ids.device) != 0)  # CLS always visible
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding)
        return l2_normalize(self.proj(self.final_norm(x[:, 0])))


def build_text_encoder(config: TextEncoderConfig, seed: int | None = None) -> TextEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    encoder = TextEncoder(config)
    encoder.apply(init_weights)
    with torch.no_grad():
        nn.init.trunc_normal_(encoder.pos_emb, std=0.02)
    return encoder
