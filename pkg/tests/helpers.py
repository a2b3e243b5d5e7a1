"""Shared builders for fast two-class training fixtures."""

from ecgtext.decoder import DecoderConfig
from ecgtext.records import ECGTextPair, SyntheticSpec, synthesize_ecg
from ecgtext.signal_encoder import ConvNeXt1DConfig
from ecgtext.text_encoder import TextEncoderConfig
from ecgtext.trainer import TrainConfig


def make_pairs(n: int, seed: int = 0) -> list[ECGTextPair]:
    """Two-lead slow/fast records with per-record description text."""
    pairs = []
    for i in range(n):
        slow = i % 2 == 0
        spec = SyntheticSpec(
            heart_rate_bpm=50.0 if slow else 110.0,
            duration_s=2.0,
            sampling_rate_hz=50,
            noise_std=0.05,
            lead_scale=(1.0, 0.8),
        )
        record = synthesize_ecg(
            spec, seed=seed * 1000 + i, record_id=f"t-{i:03d}", labels=["SLOW" if slow else "FAST"]
        )
        pairs.append(
            ECGTextPair(record=record, description=f"{'slow' if slow else 'fast'} sinus rate variant {i}")
        )
    return pairs


def tiny_config(**overrides) -> TrainConfig:
    """Smallest config that exercises every architectural component."""
    defaults = dict(
        epochs=4,
        warmup_epochs=1,
        base_lr=1e-3,
        lr_decay_factor=0.1,
        lr_decay_every=2,
        batch_size=8,
        seed=0,
        variant="tiny",
        signal=ConvNeXt1DConfig(in_leads=2, depths=(1, 1, 1, 1), widths=(8, 8, 16, 16), embed_dim=16),
        text=TextEncoderConfig(layers=1, heads=2, width=16, max_len=16, embed_dim=16),
        decoder=DecoderConfig(layers=1, heads=2, width=16, max_len=16, cross_dim=16),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)
