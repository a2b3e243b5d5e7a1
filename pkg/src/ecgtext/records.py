"""ECG records, manifests, synthetic waveforms, batching, and pair misalignment.

Signals are dense float32 matrices of shape [n_leads, n_samples] in millivolts.
On disk they are raw 32-bit little-endian IEEE-754 floats, lead-major, so that
manifest round trips are bit-exact across platforms.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SEXES = ("male", "female", "unknown")
SOURCE_TAGS = ("cqa_generated", "manual", "synthetic")

SIGNAL_DTYPE = np.dtype("<f4")  # on-disk and in-memory signal dtype


class ManifestError(ValueError):
    """A manifest entry or its signal file is missing, corrupt, or inconsistent."""


@dataclass(frozen=True)
class ECGRecord:
    """One multi-lead ECG recording with optional demographics and labels."""

    record_id: str
    signal: np.ndarray
    sampling_rate_hz: int = 500
    age_years: int | None = None
    sex: str | None = None
    labels: tuple[str, ...] = ()
    machine_report: str | None = None

    def __post_init__(self):
        sig = np.ascontiguousarray(self.signal, dtype=SIGNAL_DTYPE)
        if sig.ndim != 2 or sig.shape[0] < 1 or sig.shape[1] < 1:
            raise ValueError(f"record {self.record_id!r}: signal must be a [n_leads, n_samples] matrix")
        if not np.isfinite(sig).all():
            raise ValueError(f"record {self.record_id!r}: signal contains non-finite values")
        sig.flags.writeable = False
        object.__setattr__(self, "signal", sig)
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))
        if not self.record_id:
            raise ValueError("record_id must be nonempty")
        if self.sampling_rate_hz <= 0:
            raise ValueError(f"record {self.record_id!r}: sampling_rate_hz must be positive")
        if self.age_years is not None and self.age_years < 0:
            raise ValueError(f"record {self.record_id!r}: age_years must be non-negative")
        if self.sex is not None and self.sex not in SEXES:
            raise ValueError(f"record {self.record_id!r}: sex must be one of {SEXES}")

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz


@dataclass(frozen=True)
class ECGTextPair:
    """An ECG record joined with its textual description; unit of pretraining."""

    record: ECGRecord
    description: str
    source_tag: str = "synthetic"

    def __post_init__(self):
        if not self.description or not self.description.strip():
            raise ValueError(f"pair for {self.record.record_id!r}: description must be nonempty")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}")


@dataclass(frozen=True)
class WaveParams:
    """Gaussian bump for one wave of the beat template."""

    amplitude_mv: float
    center_s: float  # offset from beat onset
    width_s: float

    def __post_init__(self):
        if self.width_s <= 0:
            raise ValueError("wave width_s must be positive")


DEFAULT_WAVES: dict[str, WaveParams] = {
    "P": WaveParams(0.15, 0.10, 0.035),
    "Q": WaveParams(-0.15, 0.20, 0.012),
    "R": WaveParams(1.20, 0.22, 0.016),
    "S": WaveParams(-0.25, 0.245, 0.014),
    "T": WaveParams(0.35, 0.42, 0.060),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gaussian-bump synthetic ECG generator."""

    heart_rate_bpm: float = 60.0
    duration_s: float = 10.0
    sampling_rate_hz: int = 500
    noise_std: float = 0.0
    wave_params: Mapping[str, WaveParams] = field(default_factory=lambda: dict(DEFAULT_WAVES))
    lead_scale: tuple[float, ...] = tuple(1.0 - 0.04 * i for i in range(12))

    def __post_init__(self):
        if self.heart_rate_bpm <= 0 or self.duration_s <= 0:
            raise ValueError("heart_rate_bpm and duration_s must be positive")
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling_rate_hz must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.duration_s * self.heart_rate_bpm / 60.0 < 1.0:
            raise ValueError("spec must cover at least one beat")
        if len(self.lead_scale) < 1:
            raise ValueError("lead_scale must have at least one lead")
        object.__setattr__(self, "wave_params", dict(self.wave_params))
        object.__setattr__(self, "lead_scale", tuple(float(s) for s in self.lead_scale))

    @property
    def n_leads(self) -> int:
        return len(self.lead_scale)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sampling_rate_hz))

    @property
    def n_beats(self) -> int:
        return int(round(self.heart_rate_bpm * self.duration_s / 60.0))


def synthesize_ecg(
    spec: SyntheticSpec,
    seed: int,
    record_id: str | None = None,
    age_years: int | None = None,
    sex: str | None = None,
    labels: Sequence[str] = (),
    machine_report: str | None = None,
) -> ECGRecord:
    """Render a deterministic synthetic ECG: per beat, one Gaussian bump per wave.

    The waveform is identical for a fixed (spec, seed); metadata arguments only
    annotate the returned record.
    """
    n = spec.n_samples
    t = np.arange(n, dtype=np.float64) / spec.sampling_rate_hz
    period = 60.0 / spec.heart_rate_bpm
    base = np.zeros(n, dtype=np.float64)
    for k in range(spec.n_beats):
        onset = k * period
        for wave in spec.wave_params.values():
            c = onset + wave.center_s
            base += wave.amplitude_mv * np.exp(-0.5 * ((t - c) / wave.width_s) ** 2)
    signal = np.outer(np.asarray(spec.lead_scale, dtype=np.float64), base)
    if spec.noise_std > 0:
        rng = np.random.default_rng(seed)
        signal = signal + rng.normal(0.0, spec.noise_std, size=signal.shape)
    return ECGRecord(
        record_id=record_id if record_id is not None else f"synth-{seed:08d}",
        signal=signal.astype(SIGNAL_DTYPE),
        sampling_rate_hz=spec.sampling_rate_hz,
        age_years=age_years,
        sex=sex,
        labels=tuple(labels),
        machine_report=machine_report,
    )


def crop_record(record: ECGRecord, duration_s: float, offset_s: float = 0.0) -> ECGRecord:
    """Take a fixed-length segment starting at offset_s (leading segment by default)."""
    start = int(round(offset_s * record.sampling_rate_hz))
    length = int(round(duration_s * record.sampling_rate_hz))
    if start < 0 or length < 1 or start + length > record.n_samples:
        raise ValueError(
            f"record {record.record_id!r}: segment [{offset_s}s, +{duration_s}s) outside recording"
        )
    return dataclasses.replace(record, signal=record.signal[:, start : start + length])


def decimate_record(record: ECGRecord, factor: int) -> ECGRecord:
    """Integer-factor decimation (every factor-th sample, no filtering)."""
    if factor < 1 or record.sampling_rate_hz % factor != 0:
        raise ValueError("factor must divide the sampling rate")
    return dataclasses.replace(
        record,
        signal=np.ascontiguousarray(record.signal[:, ::factor]),
        sampling_rate_hz=record.sampling_rate_hz // factor,
    )


def inject_misalignment(pairs: Sequence[ECGTextPair], ratio: float, seed: int) -> list[ECGTextPair]:
    """Deliberately mis-pair a fraction of descriptions.

    Exactly floor(ratio * N) pairs are chosen uniformly at random and their
    descriptions are permuted among themselves by a derangement, so every
    selected pair ends up with a wrong description. (A single selected pair
    cannot be deranged; it borrows the description of an unselected donor
    instead, which keeps the mismatch count exact.) Unselected pairs are
    returned unchanged. Deterministic for a fixed seed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    pairs = list(pairs)
    n = len(pairs)
    m = math.floor(ratio * n)
    if m == 0:
        return pairs
    if n < 2:
        raise ValueError("need at least 2 pairs to misalign")
    rng = np.random.default_rng(seed)
    selected = rng.choice(n, size=m, replace=False)
    if m == 1:
        others = np.setdiff1d(np.arange(n), selected)
        donors = [pairs[int(rng.choice(others))]]
    else:
        perm = _derangement(m, rng)
        donors = [pairs[selected[perm[i]]] for i in range(m)]
    out = pairs
    for i in range(m):
        out[selected[i]] = dataclasses.replace(
            pairs[selected[i]], description=donors[i].description, source_tag=donors[i].source_tag
        )
    return out


def _derangement(m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of range(m) with no fixed point (rejection sampling)."""
    while True:
        perm = rng.permutation(m)
        if not np.any(perm == np.arange(m)):
            return perm


def batch_iterator(
    pairs: Sequence[ECGTextPair],
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    drop_last: bool = False,
) -> Iterator[list[ECGTextPair]]:
    """Yield batches covering every pair exactly once per epoch.

    With shuffle on, the order is a fixed function of the seed. The final short
    batch is kept unless drop_last is set (pretraining drops it, evaluation keeps it).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(pairs)
    if n == 0:
        return
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield [pairs[i] for i in idx]


# --- manifest and description files -----------------------------------------

_MANIFEST_FIELDS = (
    "record_id",
    "signal_path",
    "n_leads",
    "n_samples",
    "sampling_rate_hz",
    "age_years",
    "sex",
    "labels",
    "machine_report",
)


def save_manifest(
    records: Sequence[ECGRecord],
    out_dir: str | Path,
    manifest_name: str = "manifest.jsonl",
    signal_dir: str = "signals",
) -> Path:
    """Write one JSON line per record plus raw float32 signal files; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / signal_dir).mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    lines = []
    for rec in records:
        if rec.record_id in seen:
            raise ManifestError(f"duplicate record_id {rec.record_id!r}")
        seen.add(rec.record_id)
        rel = f"{signal_dir}/{rec.record_id}.f32"
        rec.signal.astype(SIGNAL_DTYPE).tofile(out_dir / rel)
        lines.append(
            json.dumps(
                {
                    "record_id": rec.record_id,
                    "signal_path": rel,
                    "n_leads": rec.n_leads,
                    "n_samples": rec.n_samples,
                    "sampling_rate_hz": rec.sampling_rate_hz,
                    "age_years": rec.age_years,
                    "sex": rec.sex,
                    "labels": list(rec.labels),
                    "machine_report": rec.machine_report,
                },
                sort_keys=True,
            )
        )
    manifest_path = out_dir / manifest_name
    manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest_path


def load_manifest(path: str | Path) -> list[ECGRecord]:
    """Load records in manifest order, validating shapes against the declared metadata."""
    path = Path(path)
    base = path.parent
    records: list[ECGRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        missing = [f for f in _MANIFEST_FIELDS if f not in entry]
        if missing:
            raise ManifestError(f"{path}:{line_no}: missing fields {missing}")
        rid = entry["record_id"]
        if rid in seen:
            raise ManifestError(f"duplicate record_id {rid!r} in manifest")
        seen.add(rid)
        sig_path = Path(entry["signal_path"])
        if not sig_path.is_absolute():
            sig_path = base / sig_path
        if not sig_path.exists():
            raise ManifestError(f"record {rid!r}: signal file {sig_path} does not exist")
        raw = np.fromfile(sig_path, dtype=SIGNAL_DTYPE)
        expected = entry["n_leads"] * entry["n_samples"]
        if raw.size != expected:
            raise ManifestError(
                f"record {rid!r}: signal file holds {raw.size} floats, manifest declares "
                f"{entry['n_leads']} x {entry['n_samples']} = {expected}"
            )
        try:
            records.append(
                ECGRecord(
                    record_id=rid,
                    signal=raw.reshape(entry["n_leads"], entry["n_samples"]),
                    sampling_rate_hz=entry["sampling_rate_hz"],
                    age_years=entry["age_years"],
                    sex=entry["sex"],
                    labels=tuple(entry["labels"]),
                    machine_report=entry["machine_report"],
                )
            )
        except ValueError as exc:
            raise ManifestError(f"record {rid!r}: {exc}") from exc
    return records


def save_descriptions(descriptions: Mapping[str, str], path: str | Path) -> Path:
    """Write `record_id<TAB>description` lines; embedded tabs/newlines become spaces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rid, text in descriptions.items():
            clean = " ".join(str(text).split())
            fh.write(f"{rid}\t{clean}\n")
    return path


def load_descriptions(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{line_no}: expected record_id<TAB>description")
        rid, text = line.split("\t", 1)
        out[rid] = text
    return out


def pair_records(
    records: Sequence[ECGRecord],
    descriptions: Mapping[str, str],
    source_tag: str = "cqa_generated",
) -> list[ECGTextPair]:
    """Join records with their descriptions; every record must have one."""
    missing = [r.record_id for r in records if r.record_id not in descriptions]
    if missing:
        raise ValueError(f"no description for records: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return [ECGTextPair(r, descriptions[r.record_id], source_tag) for r in records]
