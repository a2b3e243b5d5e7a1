"""Training objectives: symmetric contrastive alignment plus caption cross-entropy.

The contrastive term averages the ECG->text and text->ECG InfoNCE directions
over the batch; matched pairs sit on the diagonal of the similarity matrix.
The captioning term is teacher-forced cross-entropy averaged over non-padding
target positions.  Both are combined by `total_loss` with scalar weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .text_encoder import PAD_ID

SIGMA_MIN = 0.01
SIGMA_MAX = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float = 1.0
    lambda_cap: float = 1.0
    sigma_init: float = 0.07

    def __post_init__(self):
        if self.lambda_con < 0 or self.lambda_cap < 0:
            raise ValueError("loss weights must be non-negative")
        if not SIGMA_MIN <= self.sigma_init <= SIGMA_MAX:
            raise ValueError(f"sigma_init must lie in [{SIGMA_MIN}, {SIGMA_MAX}]")


class LearnableTemperature(nn.Module):
    """Softmax temperature stored as log(sigma) so gradient steps stay positive."""

    def __init__(self, sigma_init: float = 0.07):
        super().__init__()
        if not SIGMA_MIN <= sigma_init <= SIGMA_MAX:
            raise ValueError(f"sigma_init must lie in [{SIGMA_MIN}, {SIGMA_MAX}]")
        self.log_sigma = nn.Parameter(torch.tensor(math.log(sigma_init)))

    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp().clamp(SIGMA_MIN, SIGMA_MAX)


def _check_embeddings(name: str, x: torch.Tensor) -> None:
    if x.ndim != 2:
        raise ValueError(f"{name} must be [batch, dim], got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    norms = x.norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
        raise ValueError(f"{name} rows must be unit-normalized")


def contrastive_loss(signal_emb: torch.Tensor, text_emb: torch.Tensor, sigma: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of matched (signal, text) embedding pairs.

    Computes -1/N * sum_i [log softmax_j(S_i.T_j / sigma)_i + log softmax_j(S_j.T_i / sigma)_i],
    i.e. both retrieval directions share one similarity matrix.  A batch of one
    pair has nothing to contrast against and scores exactly zero.
    """
    _check_embeddings("signal_emb", signal_emb)
    _check_embeddings("text_emb", text_emb)
    if signal_emb.shape != text_emb.shape:
        raise ValueError("signal and text embeddings must have matching shapes")
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
    elif sigma <= 0:
        raise ValueError("sigma must be positive")
    logits = signal_emb.double() @ text_emb.double().t() / sigma
    n = logits.shape[0]
    diag = torch.arange(n, device=logits.device)
    # log softmax via logsumexp in float64 keeps the identity cases exact.
    ecg_to_text = logits.logsumexp(dim=1) - logits[diag, diag]
    text_to_ecg = logits.logsumexp(dim=0) - logits[diag, diag]
    loss = (ecg_to_text + text_to_ecg).sum() / n
    return loss.to(signal_emb.dtype)


def captioning_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Next-token cross-entropy averaged over non-padding target positions.

    `logits[:, i]` predicts `target_ids[:, i+1]`, so the last logit position and
    the first target position are dropped before scoring.
    """
    if logits.ndim != 3:
        raise ValueError(f"logits must be [batch, len, vocab], got shape {tuple(logits.shape)}")
    if logits.shape[:2] != target_ids.shape:
        raise ValueError("logits and target_ids disagree on batch/sequence shape")
    if logits.shape[1] < 2:
        raise ValueError("need at least two positions to form next-token targets")
    shifted_logits = logits[:, :-1].double()
    targets = target_ids[:, 1:]
    mask = targets != PAD_ID
    if not mask.any():
        raise ValueError("all target positions are padding; nothing to score")
    log_probs = shifted_logits - shifted_logits.logsumexp(dim=-1, keepdim=True)
    token_nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    loss = (token_nll * mask).sum() / mask.sum()
    return loss.to(logits.dtype)


def total_loss(
    contrastive: torch.Tensor,
    captioning: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return weights.lambda_con * contrastive + weights.lambda_cap * captioning
