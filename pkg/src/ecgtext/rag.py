"""Knowledge-backed ECG description generation.

Builds a vector knowledge base from domain documents, retrieves chunks by
cosine similarity for a record's condition labels or machine report, and
assembles an enriched description through a pluggable generation client.
The default embedder and client are deterministic and fully local so the
pipeline runs offline; production embedding/LLM services plug in behind the
same two interfaces.
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_KB_MAGIC = b"ECGKB001"


class EmptyKnowledgeBaseError(ValueError):
    """Retrieval was attempted against a knowledge base with no chunks."""


class TransportError(RuntimeError):
    """A remote embedding/generation call failed in a retryable way; carries the provider message."""


class GenerationError(RuntimeError):
    """Description generation failed; includes the prompt for replay."""

    def __init__(self, message: str, prompt: str):
        super().__init__(f"{message}\n--- prompt for replay ---\n{prompt}")
        self.prompt = prompt


class Embedder(Protocol):
    """Maps text to a fixed-dimension vector; implementations must be deterministic."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class GenerationClient(Protocol):
    """Turns an assembled prompt into description text."""

    def generate(self, prompt: str) -> str: ...


class HashedNGramEmbedder:
    """Deterministic local embedder: signed character n-gram hashing, L2-normalized.

    Uses blake2b so vectors are stable across processes and platforms.
    """

    def __init__(self, dim: int = 2048, ngram_sizes: Sequence[int] = (3, 4, 5)):
        if dim < 2:
            raise ValueError("dim must be at least 2")
        self.dim = dim
        self.ngram_sizes = tuple(ngram_sizes)

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        body = " " + " ".join(text.lower().split()) + " "
        grams = [body[i : i + n] for n in self.ngram_sizes for i in range(max(len(body) - n + 1, 0))]
        if not grams:
            grams = [body]
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            bucket = value % self.dim
            sign = 1.0 if (value >> 63) & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float32)


def embed_text(text: str, embedder: Embedder) -> np.ndarray:
    """Embed nonempty text to a unit-norm vector of the embedder's dimension."""
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    vec = np.asarray(embedder.embed(text), dtype=np.float32)
    if vec.ndim != 1 or vec.shape[0] != embedder.dim:
        raise ValueError(f"embedder returned shape {vec.shape}, expected ({embedder.dim},)")
    if not np.isfinite(vec).all():
        raise ValueError("embedder returned non-finite values")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("embedder returned the zero vector")
    return vec / norm


def chunk_document(text: str, chunk_chars: int = 800, overlap_chars: int = 100) -> list[str]:
    """Split text into overlapping windows of at most chunk_chars characters.

    Consecutive chunks share exactly overlap_chars characters, so the source is
    recovered by concatenating the first chunk with every later chunk minus its
    leading overlap. A window end is snapped backward to the last sentence or
    whitespace boundary found in the final 20% of the window.
    """
    if chunk_chars < 1:
        raise ValueError("chunk_chars must be positive")
    if not 0 <= overlap_chars < chunk_chars:
        raise ValueError("overlap_chars must satisfy 0 <= overlap_chars < chunk_chars")
    if not text:
        return []
    chunks: list[str] = []
    start = 0
    while True:
        end = start + chunk_chars
        if end >= len(text):
            chunks.append(text[start:])
            return chunks
        snapped = _snap_boundary(text, start, end, chunk_chars)
        if snapped - overlap_chars > start:
            end = snapped
        chunks.append(text[start:end])
        start = end - overlap_chars


def _snap_boundary(text: str, start: int, end: int, chunk_chars: int) -> int:
    """Last sentence/whitespace boundary inside the final 20% of the window, or the hard end."""
    floor = start + int(0.8 * chunk_chars)
    window = text[floor:end]
    for pattern in (r"[.!?]\s", r"\s"):
        matches = list(re.finditer(pattern, window))
        if matches:
            return floor + matches[-1].end()
    return end


@dataclass(frozen=True)
class KnowledgeChunk:
    """A text fragment with its unit-norm retrieval embedding."""

    chunk_id: int
    source: str
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        if not self.text:
            raise ValueError("chunk text must be nonempty")
        emb = np.asarray(self.embedding, dtype=np.float32)
        if abs(float(np.linalg.norm(emb)) - 1.0) > 1e-6:
            raise ValueError(f"chunk {self.chunk_id}: embedding must be unit-norm")
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)


@dataclass
class KnowledgeBase:
    """Immutable-after-build collection of chunks plus the embedder used to query it."""

    chunks: list[KnowledgeChunk]
    embedder: Embedder

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def dim(self) -> int:
        return self.embedder.dim

    def matrix(self) -> np.ndarray:
        return np.stack([c.embedding for c in self.chunks]) if self.chunks else np.zeros((0, self.dim), np.float32)


def build_knowledge_base(
    documents: dict[str, str],
    embedder: Embedder | None = None,
    chunk_chars: int = 800,
    overlap_chars: int = 100,
) -> KnowledgeBase:
    """Chunk and embed documents (name -> text); chunk ids equal insertion order."""
    embedder = embedder or HashedNGramEmbedder()
    chunks: list[KnowledgeChunk] = []
    for source in documents:
        for piece in chunk_document(documents[source], chunk_chars, overlap_chars):
            if not piece.strip():
                continue
            chunks.append(KnowledgeChunk(len(chunks), source, piece, embed_text(piece, embedder)))
    return KnowledgeBase(chunks, embedder)


def load_documents_dir(docs_dir: str | Path) -> dict[str, str]:
    """Read every *.txt file under a directory, sorted by name."""
    docs_dir = Path(docs_dir)
    docs = {p.name: p.read_text(encoding="utf-8") for p in sorted(docs_dir.glob("*.txt"))}
    if not docs:
        raise ValueError(f"no .txt documents found under {docs_dir}")
    return docs


def save_knowledge_base(kb: KnowledgeBase, path: str | Path) -> Path:
    """Persist as a single binary file: header (dim, count) then per-chunk source/text/floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_KB_MAGIC)
        fh.write(struct.pack("<II", kb.dim, len(kb.chunks)))
        for chunk in kb.chunks:
            for blob in (chunk.source.encode("utf-8"), chunk.text.encode("utf-8")):
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)
            fh.write(chunk.embedding.astype("<f4").tobytes())
    return path


def load_knowledge_base(path: str | Path, embedder: Embedder | None = None) -> KnowledgeBase:
    embedder = embedder or HashedNGramEmbedder()
    data = Path(path).read_bytes()
    if data[: len(_KB_MAGIC)] != _KB_MAGIC:
        raise ValueError(f"{path}: not a knowledge base file")
    offset = len(_KB_MAGIC)
    dim, count = struct.unpack_from("<II", data, offset)
    offset += 8
    if dim != embedder.dim:
        raise ValueError(f"{path}: stored dim {dim} does not match embedder dim {embedder.dim}")
    chunks: list[KnowledgeChunk] = []
    for chunk_id in range(count):
        fields = []
        for _ in range(2):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            fields.append(data[offset : offset + length].decode("utf-8"))
            offset += length
        emb = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        chunks.append(KnowledgeChunk(chunk_id, fields[0], fields[1], emb))
    return KnowledgeBase(chunks, embedder)


def retrieve(query: str, k: int, kb: KnowledgeBase) -> list[tuple[KnowledgeChunk, float]]:
    """Top-k chunks by cosine similarity, descending; ties broken by ascending chunk_id."""
    if k < 1:
        raise ValueError("k must be positive")
    if len(kb) == 0:
        raise EmptyKnowledgeBaseError("knowledge base has no chunks")
    q = embed_text(query, kb.embedder)
    # float64 scores: float32 rounding noise would reorder near-tied chunks
    sims = kb.matrix().astype(np.float64) @ q.astype(np.float64)
    order = sorted(range(len(kb)), key=lambda i: (-sims[i], i))[: min(k, len(kb))]
    return [(kb.chunks[i], float(sims[i])) for i in order]


# --- description assembly ----------------------------------------------------

@dataclass(frozen=True)
class QueryContext:
    """What is known about a record before description generation."""

    labels: tuple[str, ...] = ()
    age_years: int | None = None
    sex: str | None = None
    machine_report: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels and not (self.machine_report and self.machine_report.strip()):
            raise ValueError("context needs at least one label or a machine report")


@dataclass(frozen=True)
class GeneratedDescription:
    text: str
    retrieved_chunk_ids: tuple[int, ...]
    prompt: str
    used_knowledge: bool = True


_PROMPT_HEADER = "Write a waveform description for the 12-lead ECG of the patient below."
_PROMPT_FOOTER = "Describe the expected waveform features for each lead, mentioning every condition once."
_REPORT_TAG = "report"


def demographics_sentence(age_years: int | None, sex: str | None) -> str | None:
    """Fixed demographics phrasing; None when neither age nor a known sex is present."""
    sex = sex if sex in ("male", "female") else None
    if age_years is None and sex is None:
        return None
    if age_years is not None and sex is not None:
        return f"{age_years}-year-old {sex} patient."
    if age_years is not None:
        return f"{age_years}-year-old patient."
    return f"{sex} patient."


def build_prompt(context: QueryContext, notes: list[tuple[str, KnowledgeChunk]]) -> str:
    """The exact prompt sent to the generation client. Notes are (tag, chunk) pairs."""
    demo = demographics_sentence(context.age_years, context.sex)
    lines = [_PROMPT_HEADER]
    lines.append(f"Patient: {demo}" if demo else "Patient: none recorded.")
    lines.append(f"Conditions: {', '.join(context.labels) if context.labels else 'none listed'}")
    if context.machine_report:
        lines.append(f"Report: {' '.join(context.machine_report.split())}")
    lines.append("Reference notes:")
    if notes:
        for tag, chunk in notes:
            lines.append(f"[{tag}] {' '.join(chunk.text.split())}")
    else:
        lines.append("(none)")
    lines.append(_PROMPT_FOOTER)
    return "\n".join(lines)


def first_sentence(text: str) -> str:
    """First sentence, including its terminator; whole text when none is found."""
    flat = " ".join(text.split())
    match = re.search(r"[.!?](?=\s|$)", flat)
    return flat[: match.end()] if match else flat


class MockGenerationClient:
    """Deterministic template-filling client for offline runs.

    Emits the first sentence of the best-matching note for each condition,
    then the machine-report measurements, then the demographics sentence.
    Findings lead so that condition wording sits at similar positions in every
    produced text, and the note sentence stands alone (no label prefix) so the
    description reads as prose; labels with no matching note fall back to the
    bare label.  Parses the fixed prompt layout produced by build_prompt.
    """

    def generate(self, prompt: str) -> str:
        patient = _prompt_field(prompt, "Patient: ")
        conditions = _prompt_field(prompt, "Conditions: ")
        report = _prompt_field(prompt, "Report: ")
        notes = _prompt_notes(prompt)
        parts: list[str] = []
        labels = [] if conditions in (None, "none listed") else [c.strip() for c in conditions.split(",")]
        for label in labels:
            matched = notes.get(label)
            parts.append(first_sentence(matched) if matched else f"{label}.")
        if labels:
            if report:
                parts.append(report)
        else:
            matched = notes.get(_REPORT_TAG)
            if matched:
                parts.append(f"Reported findings: {first_sentence(matched)}")
            else:
                parts.append(f"Reported findings: {report}" if report else "No conditions listed.")
        if patient and patient != "none recorded.":
            parts.append(patient)
        return " ".join(parts)


def _prompt_field(prompt: str, prefix: str) -> str | None:
    for line in prompt.splitlines():
        if line.startswith(prefix):
            return line[len(prefix) :]
    return None


def _prompt_notes(prompt: str) -> dict[str, str]:
    """First note text per tag, in prompt order."""
    notes: dict[str, str] = {}
    for line in prompt.splitlines():
        match = re.match(r"\[(.+?)\] (.+)", line)
        if match and match.group(1) not in notes:
            notes[match.group(1)] = match.group(2)
    return notes


def generate_description(
    context: QueryContext,
    kb: KnowledgeBase,
    client: GenerationClient,
    k: int = 4,
) -> GeneratedDescription:
    """Retrieve per-label knowledge and assemble a description via the client.

    One retrieval query is issued per label (plus one for the machine report when
    no labels are present); results are unioned in query order. When nothing is
    retrieved the description is built from labels and demographics alone and
    flagged with used_knowledge=False.
    """
    queries: list[tuple[str, str]] = [(label, label) for label in context.labels]
    if not queries and context.machine_report:
        queries.append((_REPORT_TAG, context.machine_report))
    notes: list[tuple[str, KnowledgeChunk]] = []
    seen_ids: set[int] = set()
    chunk_ids: list[int] = []
    for tag, query in queries:
        if len(kb) == 0:
            continue
        for chunk, _sim in retrieve(query, k, kb):
            notes.append((tag, chunk))
            if chunk.chunk_id not in seen_ids:
                seen_ids.add(chunk.chunk_id)
                chunk_ids.append(chunk.chunk_id)
    prompt = build_prompt(context, notes)
    try:
        text = client.generate(prompt)
    except TransportError:
        raise
    except Exception as exc:
        raise GenerationError(f"generation client failed: {exc}", prompt) from exc
    if not text or not text.strip():
        raise GenerationError("generation client returned empty text", prompt)
    return GeneratedDescription(
        text=text,
        retrieved_chunk_ids=tuple(chunk_ids),
        prompt=prompt,
        used_knowledge=bool(chunk_ids),
    )
