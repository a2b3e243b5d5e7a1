"""Joint pretraining loop for the signal encoder, text encoder, and decoder.

Single-process reference implementation: AdamW with decoupled weight decay on
matrix-shaped parameters only, global gradient-norm clipping, linear warmup
followed by step decay, and deterministic per-epoch data order derived from
(seed, epoch).  The resulting `Checkpoint` bundles parameters, optimizer
moments, vocabulary, configs, and loss history in one self-describing file, so
a resumed run replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_blobs, save_blobs
from .decoder import CaptionDecoder, DecoderConfig, build_decoder
from .losses import LearnableTemperature, LossWeights, captioning_loss, contrastive_loss, total_loss
from .records import ECGTextPair, batch_iterator
from .signal_encoder import ConvNeXt1DConfig, SignalEncoder, build_signal_encoder
from .text_encoder import (
    TextEncoder,
    TextEncoderConfig,
    Vocabulary,
    build_text_encoder,
    build_vocab,
    tokenize,
)

logger = logging.getLogger(__name__)

VARIANTS = ("tiny", "base")


class PretrainError(RuntimeError):
    """Raised when the optimization loop hits a non-recoverable state."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 5
    base_lr: float = 5e-5
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    # The decay boundaries count from the end of warmup (epochs 15, 25 under the
    # defaults).  Set decay_from_start to count them from epoch 0 instead.
    decay_from_start: bool = False
    batch_size: int = 48
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    variant: str = "tiny"
    freeze_text_encoder: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    signal: ConvNeXt1DConfig = field(default_factory=ConvNeXt1DConfig.tiny)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0 or not 0 < self.lr_decay_factor <= 1 or self.lr_decay_every < 1:
            raise ValueError("learning-rate schedule parameters must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (contrastive loss needs negatives)")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("weight_decay must be >= 0 and grad_clip > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.signal.embed_dim != self.text.embed_dim:
            raise ValueError("signal and text encoders must share the joint embedding dim")
        if self.decoder.cross_dim != self.signal.widths[-1]:
            raise ValueError("decoder cross_dim must equal the final signal width")
        if self.decoder.max_len < self.text.max_len:
            raise ValueError("decoder max_len must cover tokenized descriptions")


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Learning rate for the given 0-based update step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be positive")
    epoch = step / steps_per_epoch
    if epoch < config.warmup_epochs:
        return config.base_lr * epoch / config.warmup_epochs
    since = epoch if config.decay_from_start else epoch - config.warmup_epochs
    n_decays = int(since // config.lr_decay_every)
    return config.base_lr * config.lr_decay_factor**n_decays


class MultimodalModel(nn.Module):
    """Signal tower, text tower, caption decoder, and the shared temperature."""

    def __init__(
        self,
        signal_encoder: SignalEncoder,
        text_encoder: TextEncoder,
        decoder: CaptionDecoder,
        temperature: LearnableTemperature,
    ):
        super().__init__()
        self.signal_encoder = signal_encoder
        self.text_encoder = text_encoder
        self.decoder = decoder
        self.temperature = temperature

    def forward(
        self, signals: torch.Tensor, text_ids: torch.Tensor, text_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (signal embeddings, text embeddings, caption logits)."""
        encoded = self.signal_encoder(signals)
        text_emb = self.text_encoder(text_ids, text_mask)
        logits = self.decoder(encoded.tokens, text_ids)
        return encoded.pooled, text_emb, logits


def build_model(config: TrainConfig, vocab: Vocabulary) -> MultimodalModel:
    """Fresh model with initialization fully determined by config.seed."""
    torch.manual_seed(config.seed)
    signal_encoder = build_signal_encoder(config.signal)
    text_encoder = build_text_encoder(replace(config.text, vocab_size=len(vocab)))
    decoder = build_decoder(replace(config.decoder, vocab_size=len(vocab)))
    return MultimodalModel(signal_encoder, text_encoder, decoder, LearnableTemperature(config.weights.sigma_init))


def _trainable_named_params(model: MultimodalModel) -> list[tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in sorted(model.named_parameters()) if p.requires_grad]


def _build_optimizer(model: MultimodalModel, config: TrainConfig) -> tuple[torch.optim.AdamW, list[str]]:
    """Weight decay goes to parameters with >= 2 dims; biases, norms, and the
    temperature stay undecayed.  Returns the optimizer plus the parameter names
    in torch's state-dict index order for serialization."""
    named = _trainable_named_params(model)
    decay = [(n, p) for n, p in named if p.ndim >= 2]
    no_decay = [(n, p) for n, p in named if p.ndim < 2]
    groups = [
        {"params": [p for _, p in decay], "weight_decay": config.weight_decay},
        {"params": [p for _, p in no_decay], "weight_decay": 0.0},
    ]
    optimizer = torch.optim.AdamW(groups, lr=config.base_lr, betas=(0.9, 0.999), eps=1e-8)
    return optimizer, [n for n, _ in decay] + [n for n, _ in no_decay]


def collate(
    batch: Sequence[ECGTextPair], vocab: Vocabulary, max_len: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[str]]:
    """Stack a batch; signals of unequal length are cropped to the batch minimum."""
    leads = {pair.record.n_leads for pair in batch}
    if len(leads) != 1:
        raise ValueError(f"batch mixes lead counts {sorted(leads)}")
    n = min(pair.record.n_samples for pair in batch)
    signals = torch.from_numpy(np.stack([pair.record.signal[:, :n] for pair in batch]))
    ids_list, mask_list = zip(*(tokenize(pair.description, vocab, max_len) for pair in batch))
    ids = torch.from_numpy(np.stack(ids_list))
    mask = torch.from_numpy(np.stack(mask_list))
    return signals, ids, mask, [pair.record.record_id for pair in batch]


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + 7_919 * epoch) % 2**63


@dataclass
class Checkpoint:
    """Complete training state: enough to rebuild the model or continue the run."""

    config: TrainConfig
    vocab: Vocabulary
    epoch: int
    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    torch_rng: np.ndarray
    loss_history: list[dict[str, float]]

    def to_model(self) -> MultimodalModel:
        model = build_model(self.config, self.vocab)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.model_state.items()}
        model.load_state_dict(state)
        return model

    def save(self, path: str | Path) -> Path:
        blobs: dict[str, np.ndarray] = {"rng.torch": self.torch_rng}
        for name, arr in self.model_state.items():
            blobs[f"model.{name}"] = arr
        for name, arr in self.optimizer_state.items():
            blobs[f"opt.{name}"] = arr
        meta = {
            "format": "ecgtext-checkpoint",
            "config": dataclasses.asdict(self.config),
            "vocab": list(self.vocab.tokens),
            "epoch": self.epoch,
            "loss_history": self.loss_history,
        }
        save_blobs(path, blobs, meta)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blobs, meta = load_blobs(path)
        model_state = {k[len("model.") :]: v for k, v in blobs.items() if k.startswith("model.")}
        optimizer_state = {k[len("opt.") :]: v for k, v in blobs.items() if k.startswith("opt.")}
        return cls(
            config=config_from_dict(meta["config"]),
            vocab=Vocabulary(tokens=tuple(meta["vocab"])),
            epoch=meta["epoch"],
            model_state=model_state,
            optimizer_state=optimizer_state,
            torch_rng=blobs["rng.torch"],
            loss_history=meta["loss_history"],
        )


def config_from_dict(data: dict) -> TrainConfig:
    """Inverse of dataclasses.asdict for TrainConfig (tuples restored)."""
    signal = dict(data["signal"])
    signal["depths"] = tuple(signal["depths"])
    signal["widths"] = tuple(signal["widths"])
    scalar = {k: v for k, v in data.items() if k not in ("signal", "text", "decoder", "weights")}
    return TrainConfig(
        **scalar,
        signal=ConvNeXt1DConfig(**signal),
        text=TextEncoderConfig(**data["text"]),
        decoder=DecoderConfig(**data["decoder"]),
        weights=LossWeights(**data["weights"]),
    )


def _snapshot_model(model: MultimodalModel) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().copy() for name, tensor in model.state_dict().items()}


def _snapshot_optimizer(optimizer: torch.optim.AdamW, param_names: list[str]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    state = optimizer.state_dict()["state"]
    for idx, name in enumerate(param_names):
        if idx not in state:  # no update has touched this parameter yet
            continue
        entry = state[idx]
        out[f"{name}.exp_avg"] = entry["exp_avg"].cpu().numpy().copy()
        out[f"{name}.exp_avg_sq"] = entry["exp_avg_sq"].cpu().numpy().copy()
        out[f"{name}.step"] = np.array(int(entry["step"]), dtype=np.int64)
    return out


def _restore_optimizer(
    optimizer: torch.optim.AdamW, param_names: list[str], saved: dict[str, np.ndarray]
) -> None:
    state_dict = optimizer.state_dict()
    for idx, name in enumerate(param_names):
        if f"{name}.step" not in saved:
            continue
        state_dict["state"][idx] = {
            "step": torch.tensor(float(saved[f"{name}.step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(saved[f"{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(saved[f"{name}.exp_avg_sq"].copy()),
        }
    optimizer.load_state_dict(state_dict)


def pretrain(
    pairs: Sequence[ECGTextPair],
    config: TrainConfig,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train on (signal, description) pairs and return the final checkpoint.

    Each epoch runs floor(N / batch_size) updates (the short batch is dropped)
    over a shuffled order that depends only on (config.seed, epoch), so resuming
    from a saved epoch reproduces the uninterrupted trajectory exactly.
    """
    if len(pairs) < 2:
        raise ValueError("pretraining needs at least two pairs")
    updates_per_epoch = len(pairs) // config.batch_size
    if updates_per_epoch < 1:
        raise ValueError(f"batch_size {config.batch_size} exceeds the corpus size {len(pairs)}")

    if resume is not None:
        # Extending the run is the point of resuming, so epochs may differ; every
        # other knob must match or the replayed trajectory would be meaningless.
        if replace(resume.config, epochs=config.epochs) != config:
            raise ValueError("resume checkpoint was produced under a different config")
        if resume.epoch >= config.epochs:
            raise ValueError(f"checkpoint already covers {resume.epoch} epochs")
        model = resume.to_model()
        vocab = resume.vocab
        torch.set_rng_state(torch.from_numpy(resume.torch_rng.copy()))
        start_epoch = resume.epoch
        loss_history = [dict(entry) for entry in resume.loss_history]
    else:
        vocab = build_vocab([pair.description for pair in pairs])
        model = build_model(config, vocab)
        start_epoch = 0
        loss_history = []

    if config.freeze_text_encoder:
        for param in model.text_encoder.parameters():
            param.requires_grad_(False)

    optimizer, param_names = _build_optimizer(model, config)
    if resume is not None:
        _restore_optimizer(optimizer, param_names, resume.optimizer_state)
    trainable = [p for _, p in _trainable_named_params(model)]

    model.train()
    for epoch in range(start_epoch, config.epochs):
        sums = {"total": 0.0, "contrastive": 0.0, "captioning": 0.0}
        batches = batch_iterator(
            pairs, config.batch_size, shuffle=True, seed=_epoch_seed(config.seed, epoch), drop_last=True
        )
        for step, batch in enumerate(batches):
            lr = lr_at(epoch * updates_per_epoch + step, updates_per_epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            signals, ids, mask, record_ids = collate(batch, vocab, config.text.max_len)
            try:
                sig_emb, txt_emb, logits = model(signals, ids, mask)
                con = contrastive_loss(sig_emb, txt_emb, model.temperature.sigma())
                cap = captioning_loss(logits, ids)
                loss = total_loss(con, cap, config.weights)
            except ValueError as exc:
                raise PretrainError(
                    f"breakdown at epoch {epoch} step {step}: {exc}; batch records: {record_ids}"
                ) from exc
            if not torch.isfinite(loss):
                raise PretrainError(
                    f"non-finite loss at epoch {epoch} step {step}; batch records: {record_ids}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            sums["total"] += float(loss.detach())
            sums["contrastive"] += float(con.detach())
            sums["captioning"] += float(cap.detach())
        entry = {key: value / updates_per_epoch for key, value in sums.items()}
        entry["epoch"] = epoch
        entry["updates"] = updates_per_epoch
        loss_history.append(entry)
        logger.info(
            "epoch %d: total %.4f (contrastive %.4f, captioning %.4f)",
            epoch,
            entry["total"],
            entry["contrastive"],
            entry["captioning"],
        )

    return Checkpoint(
        config=config,
        vocab=vocab,
        epoch=config.epochs,
        model_state=_snapshot_model(model),
        optimizer_state=_snapshot_optimizer(optimizer, param_names),
        torch_rng=torch.get_rng_state().numpy().copy(),
        loss_history=loss_history,
    )
