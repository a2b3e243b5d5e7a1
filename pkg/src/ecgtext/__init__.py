"""Multimodal pretraining for 12-lead ECG: a convolutional signal encoder and a
transformer text encoder aligned contrastively, with an auxiliary caption
decoder, plus knowledge-backed description generation and downstream
zero-shot / probing / fine-tuning evaluation."""

from .records import (
    DEFAULT_WAVES,
    ECGRecord,
    ECGTextPair,
    SyntheticSpec,
    WaveParams,
    batch_iterator,
    crop_record,
    decimate_record,
    inject_misalignment,
    load_descriptions,
    load_manifest,
    pair_records,
    save_descriptions,
    save_manifest,
    synthesize_ecg,
)
from .rag import (
    GeneratedDescription,
    HashedNGramEmbedder,
    KnowledgeBase,
    KnowledgeChunk,
    MockGenerationClient,
    QueryContext,
    build_knowledge_base,
    build_prompt,
    chunk_document,
    generate_description,
    load_knowledge_base,
    retrieve,
    save_knowledge_base,
)
from .signal_encoder import ConvNeXt1DConfig, SignalEncoder, build_signal_encoder, count_params, token_length
from .text_encoder import (
    TextEncoder,
    TextEncoderConfig,
    Vocabulary,
    build_text_encoder,
    build_vocab,
    detokenize,
    tokenize,
)
from .decoder import CaptionDecoder, DecoderConfig, build_decoder, greedy_decode
from .losses import LearnableTemperature, LossWeights, captioning_loss, contrastive_loss, total_loss
from .trainer import Checkpoint, MultimodalModel, TrainConfig, build_model, lr_at, pretrain
from .evaluate import (
    EvalReport,
    FineTuneConfig,
    ProbeConfig,
    TaskSpec,
    embed_records,
    fine_tune,
    linear_probe,
    metric_auc,
    mmd,
    run_ablation,
    zero_shot_classify,
)
from .benchmark import Benchmark, build_benchmark, micro_train_config

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_WAVES",
    "ECGRecord",
    "ECGTextPair",
    "SyntheticSpec",
    "WaveParams",
    "batch_iterator",
    "crop_record",
    "decimate_record",
    "inject_misalignment",
    "load_descriptions",
    "load_manifest",
    "pair_records",
    "save_descriptions",
    "save_manifest",
    "synthesize_ecg",
    "GeneratedDescription",
    "HashedNGramEmbedder",
    "KnowledgeBase",
    "KnowledgeChunk",
    "MockGenerationClient",
    "QueryContext",
    "build_knowledge_base",
    "build_prompt",
    "chunk_document",
    "generate_description",
    "load_knowledge_base",
    "retrieve",
    "save_knowledge_base",
    "ConvNeXt1DConfig",
    "SignalEncoder",
    "build_signal_encoder",
    "count_params",
    "token_length",
    "TextEncoder",
    "TextEncoderConfig",
    "Vocabulary",
    "build_text_encoder",
    "build_vocab",
    "detokenize",
    "tokenize",
    "CaptionDecoder",
    "DecoderConfig",
    "build_decoder",
    "greedy_decode",
    "LearnableTemperature",
    "LossWeights",
    "captioning_loss",
    "contrastive_loss",
    "total_loss",
    "Checkpoint",
    "MultimodalModel",
    "TrainConfig",
    "build_model",
    "lr_at",
    "pretrain",
    "EvalReport",
    "FineTuneConfig",
    "ProbeConfig",
    "TaskSpec",
    "embed_records",
    "fine_tune",
    "linear_probe",
    "metric_auc",
    "mmd",
    "run_ablation",
    "zero_shot_classify",
    "Benchmark",
    "build_benchmark",
    "micro_train_config",
    "__version__",
]
