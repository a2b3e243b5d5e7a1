"""Self-contained synthetic benchmark: four rhythm/morphology classes with
knowledge-derived descriptions, sized so a full pretrain-probe-evaluate cycle
runs in minutes on a laptop CPU.

Signals come from the Gaussian-bump generator at 100 Hz; descriptions come from
the retrieval pipeline with the deterministic mock client, so the text side
exercises the same code path as a real corpus. A built-in knowledge base seeds
one document per class plus reference material on other common findings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .evaluate import AblationCorpus, TaskSpec, linear_probe, prompt_for
from .losses import LossWeights
from .rag import (
    KnowledgeBase,
    MockGenerationClient,
    QueryContext,
    build_knowledge_base,
    generate_description,
)
from .records import (
    ECGRecord,
    ECGTextPair,
    SyntheticSpec,
    WaveParams,
    pair_records,
    synthesize_ecg,
)
from .signal_encoder import ConvNeXt1DConfig
from .text_encoder import TextEncoderConfig
from .decoder import DecoderConfig
from .trainer import TrainConfig, pretrain


@dataclass(frozen=True)
class BenchmarkClass:
    code: str
    sentence: str  # first sentence of the class document; doubles as the prompt body
    hr_range: tuple[float, float]
    wave_overrides: Mapping[str, WaveParams] = field(default_factory=dict)


# Wave widths are broadened relative to clinical timing so the shapes stay
# well-resolved on the 100 Hz sample grid.
_BASE_WAVES: dict[str, WaveParams] = {
    "P": WaveParams(0.15, 0.10, 0.040),
    "Q": WaveParams(-0.20, 0.18, 0.025),
    "R": WaveParams(1.20, 0.22, 0.030),
    "S": WaveParams(-0.30, 0.26, 0.025),
    "T": WaveParams(0.35, 0.42, 0.060),
}

BENCHMARK_CLASSES: tuple[BenchmarkClass, ...] = (
    BenchmarkClass(
        code="NORM",
        sentence="Normal sinus rhythm with a regular heart rate between 60 and 100 beats per minute.",
        hr_range=(62.0, 78.0),
    ),
    BenchmarkClass(
        code="BRAD",
        sentence="Sinus bradycardia with a slow heart rate below 60 beats per minute.",
        hr_range=(40.0, 52.0),
    ),
    BenchmarkClass(
        code="TACH",
        sentence="Sinus tachycardia with a fast heart rate above 100 beats per minute.",
        hr_range=(108.0, 126.0),
    ),
    BenchmarkClass(
        code="WIDE",
        sentence="Wide QRS complexes with prolonged ventricular depolarization and a broad R wave.",
        hr_range=(62.0, 78.0),
        wave_overrides={
            "R": WaveParams(1.00, 0.22, 0.070),
            "S": WaveParams(-0.50, 0.31, 0.050),
            "T": WaveParams(-0.25, 0.50, 0.070),
        },
    ),
)

# Knowledge documents: one per benchmark class (its first sentence is the class
# sentence above) plus reference material so retrieval has distractors to rank.
DEFAULT_DOCUMENTS: dict[str, str] = {
    "norm": (
        "Normal sinus rhythm with a regular heart rate between 60 and 100 beats per minute. "
        "The NORM code denotes a tracing with ordinary P wave, QRS, and T wave timing. "
        "Sinus rhythm originates in the sinoatrial node and conducts down the usual pathway."
    ),
    "brad": (
        "Sinus bradycardia with a slow heart rate below 60 beats per minute. "
        "The BRAD code marks fewer QRS complexes per unit time with preserved P wave morphology. "
        "It is common in trained athletes and during sleep."
    ),
    "tach": (
        "Sinus tachycardia with a fast heart rate above 100 beats per minute. "
        "The TACH code marks closely spaced QRS complexes driven from the sinus node. "
        "It often accompanies exertion, fever, anemia, or stress."
    ),
    "wide": (
        "Wide QRS complexes with prolonged ventricular depolarization and a broad R wave. "
        "The WIDE pattern reflects slowed conduction through the ventricular myocardium. "
        "Discordant T waves commonly accompany the widened complex."
    ),
    "rbbb": (
        "Right bundle branch block produces a prolonged QRS duration and an M-shaped RSR' "
        "pattern in leads V1 to V3. "
        "The RBBB code requires a QRS width above 120 milliseconds. "
        "Secondary ST segment and T wave changes appear in the right precordial leads."
    ),
    "afib": (
        "Atrial fibrillation shows an irregularly irregular ventricular response with no "
        "discernible P waves. "
        "The AFIB baseline carries coarse or fine fibrillatory undulations. "
        "Ventricular rates depend on atrioventricular nodal conduction."
    ),
    "stemi": (
        "Acute ST elevation myocardial infarction shows convex ST segment elevation in a "
        "coronary territory. "
        "The STEMI pattern includes reciprocal ST depression and evolving Q waves. "
        "Hyperacute T waves may precede the ST changes."
    ),
    "paced": (
        "A paced rhythm shows pacing spikes followed by wide QRS complexes. "
        "The PACED pattern depends on electrode position and capture. "
        "Atrial, ventricular, and dual chamber modes produce distinct spike timing."
    ),
}

SAMPLING_RATE_HZ = 100
DURATION_S = 8.0
NOISE_STD = 0.05
SHIFTED_NOISE_STD = 0.12  # held-out acquisition-noise shift for distribution comparisons
SEGMENT_SECONDS = 4.0


def benchmark_knowledge_base() -> KnowledgeBase:
    """Knowledge base over the built-in documents (one chunk per document)."""
    return build_knowledge_base(DEFAULT_DOCUMENTS)


def benchmark_task() -> TaskSpec:
    return TaskSpec(
        kind="multilabel-diagnosis",
        classes=tuple(c.code for c in BENCHMARK_CLASSES),
        prompts=tuple(prompt_for(c.sentence.rstrip(".")) for c in BENCHMARK_CLASSES),
        segment_seconds=SEGMENT_SECONDS,
    )


def class_spec(bench_class: BenchmarkClass, heart_rate: float, noise_std: float) -> SyntheticSpec:
    waves = dict(_BASE_WAVES)
    waves.update(bench_class.wave_overrides)
    return SyntheticSpec(
        heart_rate_bpm=heart_rate,
        duration_s=DURATION_S,
        sampling_rate_hz=SAMPLING_RATE_HZ,
        noise_std=noise_std,
        wave_params=waves,
    )


def make_records(
    n: int,
    seed: int,
    noise_std: float = NOISE_STD,
    id_prefix: str = "bench",
    classes: Sequence[BenchmarkClass] = BENCHMARK_CLASSES,
) -> list[ECGRecord]:
    """n records cycling through the classes, with jittered rate and demographics."""
    if not classes:
        raise ValueError("classes must be nonempty")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        bench_class = classes[i % len(classes)]
        low, high = bench_class.hr_range
        heart_rate = float(rng.uniform(low, high))
        spec = class_spec(bench_class, heart_rate, noise_std)
        records.append(
            synthesize_ecg(
                spec,
                seed=int(rng.integers(2**31)),
                record_id=f"{id_prefix}-{i:05d}",
                age_years=int(rng.integers(20, 90)),
                sex="male" if rng.integers(2) else "female",
                labels=[bench_class.code],
                machine_report=f"Ventricular rate {heart_rate:.0f} beats per minute.",
            )
        )
    return records


def describe_records(records: Sequence[ECGRecord], kb: KnowledgeBase, k: int = 4) -> dict[str, str]:
    """Descriptions for every record via retrieval plus the mock client."""
    client = MockGenerationClient()
    out = {}
    for record in records:
        context = QueryContext(
            labels=record.labels,
            age_years=record.age_years,
            sex=record.sex,
            machine_report=record.machine_report,
        )
        out[record.record_id] = generate_description(context, kb, client, k=k).text
    return out


def micro_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """Laptop-scale configuration: same architecture family, shrunk widths/depths."""
    defaults = dict(
        epochs=18,
        warmup_epochs=2,
        base_lr=2e-3,
        lr_decay_factor=0.1,
        lr_decay_every=8,
        batch_size=48,
        weight_decay=0.01,
        grad_clip=1.0,
        seed=seed,
        variant="tiny",
        signal=ConvNeXt1DConfig(depths=(1, 1, 2, 1), widths=(16, 32, 64, 128), embed_dim=64),
        text=TextEncoderConfig(layers=2, heads=4, width=64, max_len=48, embed_dim=64),
        decoder=DecoderConfig(layers=2, heads=4, width=64, max_len=48, cross_dim=128),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def ablation_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """Gentler schedule for ablation sweeps: lower peak rate, longer run.

    At the micro scale the default rate is hot enough that corrupted pairs can
    collapse individual features in an all-or-nothing way, which turns sweep
    curves into coin flips.  A quarter of the rate with more epochs degrades
    gradually, so trend comparisons across grid points stay meaningful.
    """
    defaults = dict(base_lr=5e-4, epochs=40, warmup_epochs=3, lr_decay_every=34)
    defaults.update(overrides)
    return micro_train_config(seed=seed, **defaults)


STRESS_NOISE_STD = 0.30  # far above the training noise; separates representations
# by how robustly they transfer rather than by raw in-distribution fit


def component_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """Schedule for comparing loss components, between the hot micro default and
    the gentle sweep schedule.

    At the hot default every objective variant saturates the probe and the
    comparison is invisible; at the sweep schedule single-objective models drift
    apart across seeds.  The intermediate rate keeps all variants in a regime
    where the joint objective's advantage is measurable.
    """
    defaults = dict(base_lr=1.3e-3, epochs=30, warmup_epochs=3, lr_decay_every=24)
    defaults.update(overrides)
    return micro_train_config(seed=seed, **defaults)


def compare_loss_components(
    bench: Benchmark, seeds: Sequence[int] = (0, 1, 2), **config_overrides
) -> dict[str, list[float]]:
    """Probe AUC under acquisition-noise stress for three pretraining objectives.

    Pretrains the benchmark corpus with the full objective, without the
    captioning term, and without the contrastive term, once per seed, and
    probes each checkpoint on a high-noise evaluation split.  Returns one AUC
    per seed keyed by variant; averaging over seeds and comparing the means is
    the intended reading (3 * len(seeds) training runs in total).
    """
    if not seeds:
        raise ValueError("seeds must be nonempty")
    stress_records = make_records(
        len(bench.eval_records), seed=7, noise_std=STRESS_NOISE_STD, id_prefix="stress"
    )
    stress_labels = [r.labels for r in stress_records]
    variants = {
        "full": LossWeights(),
        "without_captioning": LossWeights(lambda_cap=0.0),
        "without_contrastive": LossWeights(lambda_con=0.0),
    }
    out: dict[str, list[float]] = {name: [] for name in variants}
    for name, weights in variants.items():
        for seed in seeds:
            config = component_train_config(seed=seed, weights=weights, **config_overrides)
            checkpoint = pretrain(bench.pretrain_pairs, config)
            _, report = linear_probe(
                bench.probe_records,
                bench.probe_labels,
                bench.task,
                checkpoint,
                eval_records=stress_records,
                eval_labels=stress_labels,
            )
            out[name].append(report.macro_auc)
    return out


@dataclass
class Benchmark:
    """All splits plus the task and micro config for one benchmark instance."""

    pretrain_pairs: list[ECGTextPair]
    probe_records: list[ECGRecord]
    probe_labels: list[tuple[str, ...]]
    eval_records: list[ECGRecord]
    eval_labels: list[tuple[str, ...]]
    shifted_records: list[ECGRecord]  # same classes, higher acquisition noise
    task: TaskSpec
    config: TrainConfig
    knowledge_base: KnowledgeBase

    def ablation_corpus(self) -> AblationCorpus:
        return AblationCorpus(
            pretrain_pairs=self.pretrain_pairs,
            probe_records=self.probe_records,
            probe_labels=self.probe_labels,
            eval_records=self.eval_records,
            eval_labels=self.eval_labels,
            task=self.task,
            mmd_test_records=self.shifted_records,
        )


def build_benchmark(
    n_pretrain: int = 512,
    n_probe: int = 128,
    n_eval: int = 128,
    seed: int = 0,
) -> Benchmark:
    """Generate a disjoint pretrain/probe/eval benchmark with one shared task.

    The shifted split mirrors the eval split at a higher noise level; it stands
    in for an out-of-distribution acquisition site in distribution-distance
    analyses.
    """
    kb = benchmark_knowledge_base()
    pretrain_records = make_records(n_pretrain, seed=seed, id_prefix="pre")
    pairs = pair_records(pretrain_records, describe_records(pretrain_records, kb))
    probe_records = make_records(n_probe, seed=seed + 1, id_prefix="probe")
    eval_records = make_records(n_eval, seed=seed + 2, id_prefix="eval")
    shifted_records = make_records(n_eval, seed=seed + 3, noise_std=SHIFTED_NOISE_STD, id_prefix="shift")
    return Benchmark(
        pretrain_pairs=pairs,
        probe_records=probe_records,
        probe_labels=[r.labels for r in probe_records],
        eval_records=eval_records,
        eval_labels=[r.labels for r in eval_records],
        shifted_records=shifted_records,
        task=benchmark_task(),
        config=micro_train_config(seed=seed),
        knowledge_base=kb,
    )
