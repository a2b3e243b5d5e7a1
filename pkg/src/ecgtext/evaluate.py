"""Downstream evaluation: zero-shot scoring, linear probes, fine-tuning,
ranking metrics, distribution discrepancy, and ablation sweeps.

Labels travel as class-name collections and are binarized against the task's
class list.  AUC follows the Mann-Whitney formulation (ties share rank), so it
is invariant to any strictly monotone rescaling of the scores.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import scipy.stats
import torch
from torch import nn

from .losses import captioning_loss, contrastive_loss, total_loss
from .records import ECGRecord, ECGTextPair, crop_record, inject_misalignment
from .text_encoder import build_vocab, tokenize
from .trainer import (
    Checkpoint,
    MultimodalModel,
    TrainConfig,
    _snapshot_model,
    build_model,
    collate,
    pretrain,
)

logger = logging.getLogger(__name__)

TaskKind = Literal["multilabel-diagnosis", "single-label-identification"]


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    classes: tuple[str, ...]
    prompts: tuple[str, ...] = ()  # aligned with classes; required for zero-shot
    segment_seconds: float | None = None  # evaluate on the leading segment when set

    def __post_init__(self):
        if self.kind not in ("multilabel-diagnosis", "single-label-identification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if len(self.classes) < 2:
            raise ValueError("a task needs at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if self.prompts and len(self.prompts) != len(self.classes):
            raise ValueError("prompts must align one-to-one with classes")
        if self.prompts and any(not p.strip() for p in self.prompts):
            raise ValueError("prompts must be nonempty")


def prompt_for(class_description: str) -> str:
    """Standard zero-shot prompt wording for a class description."""
    return f"ECG showing {class_description}."


@dataclass(frozen=True)
class EvalReport:
    setting: Literal["zero-shot", "linear-probe", "fine-tune"]
    per_class_auc: dict[str, float]
    macro_auc: float
    macro_f1: float
    accuracy: float
    n_eval: int

    def __post_init__(self):
        for name, value in [("macro_auc", self.macro_auc), ("macro_f1", self.macro_f1), ("accuracy", self.accuracy)]:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def lines(self) -> list[str]:
        out = [
            f"setting\t{self.setting}",
            f"n_eval\t{self.n_eval}",
            f"macro_auc\t{self.macro_auc:.6f}",
            f"macro_f1\t{self.macro_f1:.6f}",
            f"accuracy\t{self.accuracy:.6f}",
        ]
        out.extend(f"auc[{name}]\t{auc:.6f}" for name, auc in self.per_class_auc.items())
        return out


# --- metrics ------------------------------------------------------------------


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC for one class; tied scores contribute 0.5 per pair."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs at least one positive and one negative")
    ranks = scipy.stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Column-wise AUC; degenerate columns (single-class labels) come back NaN."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same shape")
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        column = labels[:, c].astype(bool)
        if column.any() and not column.all():
            out[c] = binary_auc(scores[:, c], column)
    return out


def metric_auc(scores: np.ndarray, binary_labels: np.ndarray) -> float:
    """Macro AUC over the classes that have both positives and negatives."""
    values = per_class_auc(scores, binary_labels)
    valid = ~np.isnan(values)
    if not valid.any():
        raise EvalError("no class has both positive and negative examples")
    if not valid.all():
        logger.warning("excluding %d degenerate class(es) from macro AUC", int((~valid).sum()))
    return float(values[valid].mean())


def macro_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    """Macro F1 over classes that appear in predictions or labels."""
    pred = np.atleast_2d(np.asarray(pred)).astype(bool)
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    if pred.shape != labels.shape:
        raise ValueError("pred and labels must have the same shape")
    scores = []
    for c in range(pred.shape[1]):
        tp = int((pred[:, c] & labels[:, c]).sum())
        fp = int((pred[:, c] & ~labels[:, c]).sum())
        fn = int((~pred[:, c] & labels[:, c]).sum())
        if tp + fp + fn == 0:
            continue  # class absent everywhere: no signal either way
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def mmd(x: np.ndarray, y: np.ndarray) -> float:
    """Squared maximum mean discrepancy, biased V-statistic, Gaussian kernel.

    The bandwidth is the median pairwise distance over the pooled samples
    (median heuristic); an all-zero median falls back to 1.0 with a warning.
    Identical sample sets give exactly 0 and the statistic is symmetric.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample sets must share dimensionality")
    pooled = np.vstack([x, y])
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1)
    tri = np.sqrt(sq[np.triu_indices(len(pooled), k=1)])
    bandwidth = float(np.median(tri)) if tri.size else 0.0
    if bandwidth <= 0.0:
        logger.warning("median pairwise distance is zero; falling back to bandwidth 1.0")
        bandwidth = 1.0
    kernel = np.exp(-sq / (2.0 * bandwidth**2))
    n, m = len(x), len(y)
    k_xx = kernel[:n, :n].mean()
    k_yy = kernel[n:, n:].mean()
    k_xy = kernel[:n, n:].mean()
    return float(max(k_xx + k_yy - 2.0 * k_xy, 0.0))


# --- embedding helpers ---------------------------------------------------------


def _segment(records: Sequence[ECGRecord], seconds: float | None) -> list[ECGRecord]:
    if seconds is None:
        return list(records)
    return [crop_record(r, seconds) for r in records]


@torch.no_grad()
def embed_records(
    model: MultimodalModel,
    records: Sequence[ECGRecord],
    segment_seconds: float | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Pooled, unit-norm signal embeddings, [n_records, d]."""
    model.eval()
    cropped = _segment(records, segment_seconds)
    chunks = []
    for start in range(0, len(cropped), batch_size):
        batch = cropped[start : start + batch_size]
        n = min(r.n_samples for r in batch)
        signals = torch.from_numpy(np.stack([r.signal[:, :n] for r in batch]))
        chunks.append(model.signal_encoder(signals).pooled.numpy())
    return np.concatenate(chunks, axis=0)


@torch.no_grad()
def embed_prompts(model: MultimodalModel, checkpoint: Checkpoint, prompts: Sequence[str]) -> np.ndarray:
    """Unit-norm text embeddings of the given prompts, [n_prompts, d]."""
    model.eval()
    max_len = checkpoint.config.text.max_len
    ids_list, mask_list = zip(*(tokenize(p, checkpoint.vocab, max_len) for p in prompts))
    ids = torch.from_numpy(np.stack(ids_list))
    mask = torch.from_numpy(np.stack(mask_list))
    return model.text_encoder(ids, mask).numpy()


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities [len(a), len(b)]; normalization is explicit,
    so rescaling either side by any positive factor cannot change the result."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.clip(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12, None)
    b = b / np.clip(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12, None)
    return a @ b.T


def labels_to_matrix(labels: Sequence, task: TaskSpec) -> np.ndarray:
    """Binary [n, n_classes] matrix from label collections (or single names)."""
    index = {name: i for i, name in enumerate(task.classes)}
    out = np.zeros((len(labels), len(task.classes)), dtype=np.int64)
    for row, entry in enumerate(labels):
        names = [entry] if isinstance(entry, str) else list(entry)
        if task.kind == "single-label-identification" and len(names) != 1:
            raise EvalError(f"record {row} must carry exactly one identity label")
        for name in names:
            if name not in index:
                raise EvalError(f"label {name!r} is not a task class")
            out[row, index[name]] = 1
    return out


def _report(
    setting: Literal["zero-shot", "linear-probe", "fine-tune"],
    task: TaskSpec,
    scores: np.ndarray,
    probs: np.ndarray,
    label_matrix: np.ndarray,
    keep: np.ndarray | None = None,
) -> EvalReport:
    """Assemble an EvalReport; `keep` masks classes eligible for macro averages."""
    aucs = per_class_auc(scores, label_matrix)
    valid = ~np.isnan(aucs)
    if keep is not None:
        valid &= keep
    if not valid.any():
        raise EvalError("no class is eligible for macro metrics")
    dropped = int((~valid).sum())
    if dropped:
        logger.warning("excluding %d class(es) from macro metrics", dropped)
    if task.kind == "single-label-identification":
        pred_idx = scores.argmax(axis=1)
        pred = np.zeros_like(label_matrix)
        pred[np.arange(len(pred)), pred_idx] = 1
        accuracy = float((pred_idx == label_matrix.argmax(axis=1)).mean())
    else:
        pred = (probs >= 0.5).astype(np.int64)
        accuracy = float((pred == label_matrix).mean())
    return EvalReport(
        setting=setting,
        per_class_auc={task.classes[c]: float(aucs[c]) for c in np.flatnonzero(valid)},
        macro_auc=float(aucs[valid].mean()),
        macro_f1=macro_f1(pred[:, valid], label_matrix[:, valid]),
        accuracy=accuracy,
        n_eval=len(label_matrix),
    )


# --- zero-shot -----------------------------------------------------------------


def zero_shot_classify(
    records: Sequence[ECGRecord], task: TaskSpec, checkpoint: Checkpoint
) -> np.ndarray:
    """Cosine similarity of each record's embedding to each class prompt, [n, C]."""
    if not task.prompts:
        raise EvalError("zero-shot classification needs prompts on the task")
    model = checkpoint.to_model()
    signal_emb = embed_records(model, records, task.segment_seconds)
    prompt_emb = embed_prompts(model, checkpoint, task.prompts)
    return cosine_scores(signal_emb, prompt_emb)


def zero_shot_report(records: Sequence[ECGRecord], labels: Sequence, task: TaskSpec, checkpoint: Checkpoint) -> EvalReport:
    scores = zero_shot_classify(records, task, checkpoint)
    return _report("zero-shot", task, scores, (scores + 1.0) / 2.0, labels_to_matrix(labels, task))


# --- linear probe ----------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    max_rounds: int = 200
    tol: float = 1e-6
    l2: float = 1e-3  # ridge penalty on the weights; keeps separable fits finite


@dataclass
class ProbeHead:
    """Affine map from pooled embeddings to class scores."""

    weight: np.ndarray  # [C, d]
    bias: np.ndarray  # [C]
    classes: tuple[str, ...]

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        return np.asarray(embeddings, dtype=np.float64) @ self.weight.T + self.bias


def params_digest(module: nn.Module) -> str:
    """SHA-256 over all parameter bytes in state-dict name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _fit_head(
    embeddings: np.ndarray, label_matrix: np.ndarray, single_label: bool, config: ProbeConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch training of one affine layer to convergence (loss change < tol).

    Zero initialization plus a deterministic full-batch second-order optimizer
    keeps the result independent of any seed, which is the point of a probe.
    The ridge term makes the objective strictly convex, so the fit stays finite
    and unique even when the classes are linearly separable.
    """
    x = torch.from_numpy(np.asarray(embeddings, dtype=np.float64))
    head = nn.Linear(x.shape[1], label_matrix.shape[1], dtype=torch.float64)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    if single_label:
        target = torch.from_numpy(label_matrix.argmax(axis=1))

        def data_loss(logits: torch.Tensor) -> torch.Tensor:
            return nn.functional.cross_entropy(logits, target)

    else:
        target = torch.from_numpy(np.asarray(label_matrix, dtype=np.float64))

        def data_loss(logits: torch.Tensor) -> torch.Tensor:
            return nn.functional.binary_cross_entropy_with_logits(logits, target)

    def loss_fn() -> torch.Tensor:
        return data_loss(head(x)) + 0.5 * config.l2 * head.weight.square().sum()

    optimizer = torch.optim.LBFGS(head.parameters(), lr=1.0, max_iter=20, line_search_fn="strong_wolfe")

    def closure():
        optimizer.zero_grad()
        loss = loss_fn()
        loss.backward()
        return loss

    previous = float("inf")
    for _ in range(config.max_rounds):
        loss = float(optimizer.step(closure).detach())
        if abs(previous - loss) < config.tol:
            break
        previous = loss
    return head.weight.detach().numpy().copy(), head.bias.detach().numpy().copy()


def linear_probe(
    train_records: Sequence[ECGRecord],
    train_labels: Sequence,
    task: TaskSpec,
    checkpoint: Checkpoint,
    probe_config: ProbeConfig = ProbeConfig(),
    eval_records: Sequence[ECGRecord] | None = None,
    eval_labels: Sequence | None = None,
) -> tuple[ProbeHead, EvalReport]:
    """Train an affine head on frozen embeddings; the encoder provably never moves.

    The report covers (eval_records, eval_labels) when given, otherwise the
    training split.  Classes with no positive training example are excluded
    from macro averages with a warning.
    """
    model = checkpoint.to_model()
    digest_before = params_digest(model)
    train_matrix = labels_to_matrix(train_labels, task)
    trained = train_matrix.any(axis=0)
    if not trained.all():
        missing = [task.classes[c] for c in np.flatnonzero(~trained)]
        logger.warning("classes absent from probe training labels: %s", ", ".join(missing))
    train_emb = embed_records(model, train_records, task.segment_seconds)
    single = task.kind == "single-label-identification"
    weight, bias = _fit_head(train_emb, train_matrix, single, probe_config)
    head = ProbeHead(weight=weight, bias=bias, classes=task.classes)

    if eval_records is None:
        eval_emb, eval_matrix = train_emb, train_matrix
    else:
        eval_emb = embed_records(model, eval_records, task.segment_seconds)
        eval_matrix = labels_to_matrix(eval_labels, task)
    logits = head.scores(eval_emb)
    probs = _softmax(logits) if single else _sigmoid(logits)
    if params_digest(model) != digest_before:
        raise EvalError("probe training mutated encoder parameters")
    report = _report("linear-probe", task, logits, probs, eval_matrix, keep=trained)
    return head, report


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


# --- fine-tune -------------------------------------------------------------------


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-5
    head_lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


class FineTunedClassifier(nn.Module):
    """Signal encoder plus affine head, trained jointly."""

    def __init__(self, encoder, head: nn.Linear, classes: tuple[str, ...]):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.classes = classes

    def forward(self, signals: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(signals).pooled)


def fine_tune(
    train_records: Sequence[ECGRecord],
    train_labels: Sequence,
    task: TaskSpec,
    checkpoint: Checkpoint,
    ft_config: FineTuneConfig = FineTuneConfig(),
    eval_records: Sequence[ECGRecord] | None = None,
    eval_labels: Sequence | None = None,
) -> tuple[FineTunedClassifier, EvalReport]:
    """Jointly optimize the signal encoder and a classification head.

    The head starts from the converged linear-probe solution on the frozen
    embeddings, so fine-tuning refines the probe rather than re-deriving it.
    The head gets its own (larger) learning rate.
    """
    model = checkpoint.to_model()
    torch.manual_seed(ft_config.seed)
    train_matrix = labels_to_matrix(train_labels, task)
    trained = train_matrix.any(axis=0)
    single = task.kind == "single-label-identification"
    train_emb = embed_records(model, train_records, task.segment_seconds)
    probe_w, probe_b = _fit_head(train_emb, train_matrix, single, ProbeConfig())
    head = nn.Linear(checkpoint.config.signal.embed_dim, len(task.classes))
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(probe_w))
        head.bias.copy_(torch.from_numpy(probe_b))
    classifier = FineTunedClassifier(model.signal_encoder, head, task.classes)
    cropped = _segment(train_records, task.segment_seconds)

    optimizer = torch.optim.AdamW(
        [
            {"params": classifier.encoder.parameters(), "lr": ft_config.lr},
            {"params": classifier.head.parameters(), "lr": ft_config.head_lr},
        ],
        weight_decay=ft_config.weight_decay,
    )
    classifier.train()
    rng = np.random.default_rng(ft_config.seed)
    n = len(cropped)
    for _ in range(ft_config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, ft_config.batch_size):
            idx = order[start : start + ft_config.batch_size]
            length = min(cropped[i].n_samples for i in idx)
            signals = torch.from_numpy(np.stack([cropped[i].signal[:, :length] for i in idx]))
            logits = classifier(signals)
            if single:
                loss = nn.functional.cross_entropy(logits, torch.from_numpy(train_matrix[idx].argmax(axis=1)))
            else:
                loss = nn.functional.binary_cross_entropy_with_logits(
                    logits, torch.from_numpy(train_matrix[idx].astype(np.float32))
                )
            if not torch.isfinite(loss):
                raise EvalError("non-finite fine-tuning loss")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(classifier.parameters(), ft_config.grad_clip)
            optimizer.step()

    classifier.eval()
    if eval_records is None:
        eval_recs, eval_matrix = train_records, train_matrix
    else:
        eval_recs, eval_matrix = eval_records, labels_to_matrix(eval_labels, task)
    with torch.no_grad():
        pieces = []
        segs = _segment(eval_recs, task.segment_seconds)
        for start in range(0, len(segs), 64):
            chunk = segs[start : start + 64]
            length = min(r.n_samples for r in chunk)
            signals = torch.from_numpy(np.stack([r.signal[:, :length] for r in chunk]))
            pieces.append(classifier(signals).numpy())
    logits = np.concatenate(pieces, axis=0).astype(np.float64)
    probs = _softmax(logits) if single else _sigmoid(logits)
    report = _report("fine-tune", task, logits, probs, eval_matrix, keep=trained)
    return classifier, report


# --- ablations -------------------------------------------------------------------


@dataclass
class AblationCorpus:
    """Everything an ablation sweep needs: a pretraining pool plus a probe task."""

    pretrain_pairs: list[ECGTextPair]
    probe_records: list[ECGRecord]
    probe_labels: list
    eval_records: list[ECGRecord]
    eval_labels: list
    task: TaskSpec
    mmd_test_records: list[ECGRecord] | None = None  # datasize sweeps only
    mmd_sample_size: int = 512


@dataclass
class AblationPoint:
    x: float
    auc: float | None = None
    mmd: float | None = None
    error: str | None = None


@dataclass
class AblationResult:
    kind: Literal["misalignment", "datasize"]
    points: list[AblationPoint]
    baseline_auc: float | None = None  # probe AUC of a randomly initialized encoder

    def table(self) -> str:
        header = "x\tauc\tmmd\terror"
        rows = [header]
        if self.baseline_auc is not None:
            rows.append(f"# random-init baseline auc\t{self.baseline_auc:.6f}")
        for p in self.points:
            rows.append(
                "\t".join(
                    [
                        f"{p.x:g}",
                        "" if p.auc is None else f"{p.auc:.6f}",
                        "" if p.mmd is None else f"{p.mmd:.6f}",
                        p.error or "",
                    ]
                )
            )
        return "\n".join(rows) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.table(), encoding="utf-8")
        return path


def _probe_auc(checkpoint: Checkpoint, corpus: AblationCorpus) -> float:
    _, report = linear_probe(
        corpus.probe_records,
        corpus.probe_labels,
        corpus.task,
        checkpoint,
        eval_records=corpus.eval_records,
        eval_labels=corpus.eval_labels,
    )
    return report.macro_auc


def random_init_checkpoint(pairs: Sequence[ECGTextPair], config: TrainConfig) -> Checkpoint:
    """An untrained model packaged as a checkpoint (epoch 0, empty optimizer)."""
    vocab = build_vocab([p.description for p in pairs])
    model = build_model(config, vocab)
    return Checkpoint(
        config=config,
        vocab=vocab,
        epoch=0,
        model_state=_snapshot_model(model),
        optimizer_state={},
        torch_rng=torch.get_rng_state().numpy().copy(),
        loss_history=[],
    )


DEFAULT_UPDATE_BUDGET = 800  # roughly one 1k-corpus schedule at batch 48


def _budgeted_config(base: TrainConfig, size: int, update_budget: int) -> TrainConfig:
    """Rescale a schedule so a size-`size` corpus gets ~update_budget optimizer steps.

    Keeping the number of updates comparable across datasize grid points isolates
    the effect of data quantity from that of optimization length.  Both schedule
    milestones (warmup end, decay start) are matched in UPDATE count rather than
    rescaled in epochs: a large corpus packs the whole budget into a few epochs,
    so whole-epoch rescaling would burn most of the budget ramping up and then
    never reach the decay phase at all.
    """
    batch_size = min(base.batch_size, size)
    updates_per_epoch = max(size // batch_size, 1)
    epochs = max(math.ceil(update_budget / updates_per_epoch), 2)
    warmup_updates = update_budget * base.warmup_epochs / base.epochs
    warmup = min(max(round(warmup_updates / updates_per_epoch), 0), epochs - 1)
    decay_updates = update_budget * base.lr_decay_every / base.epochs
    decay_every = max(round(decay_updates / updates_per_epoch), 1)
    return replace(
        base, batch_size=batch_size, epochs=epochs, warmup_epochs=warmup, lr_decay_every=decay_every
    )


def run_ablation(
    kind: Literal["misalignment", "datasize"],
    grid: Sequence[float],
    base_config: TrainConfig,
    corpus: AblationCorpus,
    update_budget: int = DEFAULT_UPDATE_BUDGET,
) -> AblationResult:
    """Sweep one knob, pretraining from scratch at each grid point.

    misalignment: grid entries are description-shuffle ratios in [0, 1]; every
    point trains with base_config as-is.
    datasize: grid entries are pretraining pool sizes (0 = random init); each
    point trains for ~update_budget optimizer steps (schedule rescaled per
    point) and also reports MMD between fixed pretrain/test embedding samples.
    A failed grid point is recorded and the sweep continues.
    """
    if kind not in ("misalignment", "datasize"):
        raise ValueError(f"unknown ablation kind {kind!r}")
    if not grid:
        raise ValueError("grid must be nonempty")
    if update_budget < 1:
        raise ValueError("update_budget must be positive")
    result = AblationResult(kind=kind, points=[])
    if kind == "misalignment":
        result.baseline_auc = _probe_auc(random_init_checkpoint(corpus.pretrain_pairs, base_config), corpus)
    for x in grid:
        point = AblationPoint(x=float(x))
        result.points.append(point)
        try:
            if kind == "misalignment":
                pairs = inject_misalignment(corpus.pretrain_pairs, float(x), seed=base_config.seed)
                checkpoint = pretrain(pairs, base_config)
            else:
                size = int(x)
                if size < 0 or size > len(corpus.pretrain_pairs):
                    raise ValueError(f"datasize {size} outside the pool (0..{len(corpus.pretrain_pairs)})")
                if size == 1:
                    raise ValueError("datasize 1 cannot form a contrastive batch")
                if size == 0:
                    checkpoint = random_init_checkpoint(corpus.pretrain_pairs, base_config)
                else:
                    config = _budgeted_config(base_config, size, update_budget)
                    checkpoint = pretrain(corpus.pretrain_pairs[:size], config)
            point.auc = _probe_auc(checkpoint, corpus)
            if kind == "datasize":
                if corpus.mmd_test_records is None:
                    raise ValueError("datasize ablation needs mmd_test_records on the corpus")
                model = checkpoint.to_model()
                k = corpus.mmd_sample_size
                pretrain_sample = [p.record for p in corpus.pretrain_pairs[:k]]
                test_sample = corpus.mmd_test_records[:k]
                point.mmd = mmd(
                    embed_records(model, pretrain_sample, corpus.task.segment_seconds),
                    embed_records(model, test_sample, corpus.task.segment_seconds),
                )
        except Exception as exc:  # deliberate: one bad point must not kill the sweep
            logger.warning("ablation point %s failed: %s", x, exc)
            point.error = f"{type(exc).__name__}: {exc}"
    return result


def pair_loss_report(checkpoint: Checkpoint, pairs: Sequence[ECGTextPair]) -> dict[str, float]:
    """Held-out total/contrastive/captioning losses for a trained checkpoint."""
    model = checkpoint.to_model()
    model.eval()
    config = checkpoint.config
    with torch.no_grad():
        signals, ids, mask, _ = collate(list(pairs), checkpoint.vocab, config.text.max_len)
        sig_emb, txt_emb, logits = model(signals, ids, mask)
        con = contrastive_loss(sig_emb, txt_emb, model.temperature.sigma())
        cap = captioning_loss(logits, ids)
        return {
            "contrastive": float(con),
            "captioning": float(cap),
            "total": float(total_loss(con, cap, config.weights)),
        }
