"""Command-line entry point.

Subcommands cover the full experiment lifecycle: synthetic data generation,
knowledge-base construction, description generation, pretraining, downstream
evaluation, ablation sweeps, and plotting.  Every run writes its outputs under
--out together with a run_manifest.json recording the command, effective
config, seed, source revision, and timestamps.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import datetime
import json
import logging
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import yaml

from . import benchmark as bench
from .evaluate import (
    EvalReport,
    FineTuneConfig,
    TaskSpec,
    fine_tune,
    linear_probe,
    run_ablation,
    zero_shot_report,
)
from .rag import (
    HashedNGramEmbedder,
    MockGenerationClient,
    QueryContext,
    build_knowledge_base,
    generate_description,
    load_documents_dir,
    load_knowledge_base,
    save_knowledge_base,
)
from .records import (
    load_descriptions,
    load_manifest,
    pair_records,
    save_descriptions,
    save_manifest,
)
from .trainer import Checkpoint, TrainConfig, config_from_dict, pretrain

logger = logging.getLogger(__name__)


class CliError(ValueError):
    """Invalid arguments or inputs (exit code 1)."""


# --- run manifest ---------------------------------------------------------------


def _source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class RunManifest:
    """Provenance record for one CLI run; written atomically at run end."""

    def __init__(self, command: str, args: argparse.Namespace, config_snapshot: dict | None = None):
        self.payload = {
            "command": command,
            "argv": [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func"],
            "config": config_snapshot or {},
            "seed": getattr(args, "seed", None),
            "source_revision": _source_revision(),
            "started": _now(),
            "finished": None,
            "outputs": [],
        }

    def add_output(self, path: str | Path) -> None:
        self.payload["outputs"].append(str(path))

    def write(self, out_dir: str | Path) -> Path:
        self.payload["finished"] = _now()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / "run_manifest.json"
        with tempfile.NamedTemporaryFile(
            "w", dir=out_dir, prefix=".run_manifest.", suffix=".tmp", delete=False, encoding="utf-8"
        ) as fh:
            json.dump(self.payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
            tmp_name = fh.name
        Path(tmp_name).replace(target)
        return target


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# --- config handling --------------------------------------------------------------


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise CliError(f"malformed config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping at top level")
    return data


def _deep_update(base: dict, override: dict, path: str = "") -> dict:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value, where)
        else:
            base[key] = value
    return base


def train_config_from_file(
    file_config: dict, args: argparse.Namespace, micro_default: bool = False
) -> TrainConfig:
    """Merge defaults <- config-file [train] section <- CLI flags."""
    base_config = bench.micro_train_config() if micro_default else TrainConfig()
    merged = dataclasses.asdict(base_config)
    section = copy.deepcopy(file_config.get("train", {}))
    if not isinstance(section, dict):
        raise CliError("config key 'train' must be a mapping")
    variant = section.pop("variant", None) or getattr(args, "variant", None)
    if variant is not None:
        if variant not in ("tiny", "base"):
            raise CliError(f"unknown variant {variant!r}")
        merged["variant"] = variant
        if variant == "base" and "signal" not in section:
            merged["signal"] = dataclasses.asdict(
                dataclasses.replace(
                    type(base_config.signal).base(), embed_dim=base_config.signal.embed_dim
                )
            )
            merged["decoder"]["cross_dim"] = merged["signal"]["widths"][-1]
    _deep_update(merged, section, "train")
    for flag in ("epochs", "batch_size", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            merged[flag] = value
    if getattr(args, "lr", None) is not None:
        merged["base_lr"] = args.lr
    try:
        return config_from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def task_from_config(file_config: dict) -> TaskSpec:
    """Task section of the config, defaulting to the built-in benchmark task."""
    section = file_config.get("task")
    if section is None:
        return bench.benchmark_task()
    try:
        return TaskSpec(
            kind=section["kind"],
            classes=tuple(section["classes"]),
            prompts=tuple(section.get("prompts", ())),
            segment_seconds=section.get("segment_seconds"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid task config: {exc}") from exc


def _load_pairs(args: argparse.Namespace, file_config: dict):
    data = file_config.get("data", {})
    manifest = getattr(args, "manifest", None) or data.get("manifest")
    descriptions = getattr(args, "descriptions", None) or data.get("descriptions")
    if not manifest or not descriptions:
        raise CliError("need --manifest and --descriptions (flags or config data section)")
    return pair_records(load_manifest(manifest), load_descriptions(descriptions))


# --- subcommands -------------------------------------------------------------------


def cmd_synth_data(args: argparse.Namespace) -> int:
    if not 1 <= args.classes <= len(bench.BENCHMARK_CLASSES):
        raise CliError(f"--classes must be 1..{len(bench.BENCHMARK_CLASSES)}")
    manifest = RunManifest("synth-data", args)
    records = bench.make_records(
        args.n,
        seed=args.seed,
        noise_std=args.noise_std,
        id_prefix=args.prefix,
        classes=bench.BENCHMARK_CLASSES[: args.classes],
    )
    out_dir = Path(args.out)
    manifest_path = save_manifest(records, out_dir)
    descriptions = bench.describe_records(records, bench.benchmark_knowledge_base())
    desc_path = save_descriptions(descriptions, out_dir / "descriptions.tsv")
    manifest.add_output(manifest_path)
    manifest.add_output(desc_path)
    manifest.write(out_dir)
    print(f"wrote {len(records)} records to {manifest_path} and descriptions to {desc_path}")
    return 0


def cmd_build_kb(args: argparse.Namespace) -> int:
    manifest = RunManifest("cqa build-kb", args)
    documents = load_documents_dir(args.docs) if args.docs else dict(bench.DEFAULT_DOCUMENTS)
    if not documents:
        raise CliError(f"no *.txt documents under {args.docs}")
    kb = build_knowledge_base(
        documents,
        embedder=HashedNGramEmbedder(dim=args.dim),
        chunk_chars=args.chunk_chars,
        overlap_chars=args.overlap_chars,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kb_path = save_knowledge_base(kb, out_dir / "kb.bin")
    manifest.add_output(kb_path)
    manifest.write(out_dir)
    print(f"indexed {len(kb)} chunks from {len(documents)} documents into {kb_path}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    manifest = RunManifest("cqa generate", args)
    kb = load_knowledge_base(args.kb, embedder=HashedNGramEmbedder(dim=args.dim))
    records = load_manifest(args.manifest)
    client = MockGenerationClient()
    descriptions = {}
    for record in records:
        context = QueryContext(
            labels=record.labels,
            age_years=record.age_years,
            sex=record.sex,
            machine_report=record.machine_report,
        )
        descriptions[record.record_id] = generate_description(context, kb, client, k=args.k).text
    out_dir = Path(args.out)
    desc_path = save_descriptions(descriptions, out_dir / "descriptions.tsv")
    manifest.add_output(desc_path)
    manifest.write(out_dir)
    print(f"generated {len(descriptions)} descriptions into {desc_path}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    file_config = load_config_file(args.config)
    config = train_config_from_file(file_config, args)
    manifest = RunManifest("pretrain", args, dataclasses.asdict(config))
    pairs = _load_pairs(args, file_config)
    resume = Checkpoint.load(args.resume) if args.resume else None
    checkpoint = pretrain(pairs, config, resume=resume)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = checkpoint.save(out_dir / "checkpoint.bin")
    history_path = out_dir / "loss_history.tsv"
    lines = ["epoch\ttotal\tcontrastive\tcaptioning"]
    lines += [
        f"{e['epoch']}\t{e['total']:.6f}\t{e['contrastive']:.6f}\t{e['captioning']:.6f}"
        for e in checkpoint.loss_history
    ]
    history_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.add_output(ckpt_path)
    manifest.add_output(history_path)
    manifest.write(out_dir)
    final = checkpoint.loss_history[-1]["total"] if checkpoint.loss_history else float("nan")
    print(f"pretrained {config.epochs} epochs on {len(pairs)} pairs; final loss {final:.4f} -> {ckpt_path}")
    return 0


def _write_report(report: EvalReport, out_dir: Path, manifest: RunManifest) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.tsv"
    report_path.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    manifest.add_output(report_path)
    manifest.write(out_dir)
    print("\n".join(report.lines()))


def cmd_eval(args: argparse.Namespace) -> int:
    file_config = load_config_file(args.config)
    task = task_from_config(file_config)
    manifest = RunManifest(f"eval {args.mode}", args)
    checkpoint = Checkpoint.load(args.checkpoint)
    eval_records = load_manifest(args.manifest)
    eval_labels = [r.labels for r in eval_records]
    if args.mode == "zeroshot":
        report = zero_shot_report(eval_records, eval_labels, task, checkpoint)
    else:
        if not args.train_manifest:
            raise CliError(f"eval {args.mode} needs --train-manifest")
        train_records = load_manifest(args.train_manifest)
        train_labels = [r.labels for r in train_records]
        if args.mode == "probe":
            _, report = linear_probe(
                train_records, train_labels, task, checkpoint,
                eval_records=eval_records, eval_labels=eval_labels,
            )
        else:
            _, report = fine_tune(
                train_records, train_labels, task, checkpoint,
                ft_config=FineTuneConfig(seed=args.seed),
                eval_records=eval_records, eval_labels=eval_labels,
            )
    _write_report(report, Path(args.out), manifest)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    file_config = load_config_file(args.config)
    config = train_config_from_file(file_config, args, micro_default=True)
    manifest = RunManifest(f"ablate {args.kind}", args, dataclasses.asdict(config))
    try:
        grid = [float(g) for g in args.grid.split(",") if g.strip() != ""]
    except ValueError as exc:
        raise CliError(f"--grid must be comma-separated numbers: {exc}") from exc
    if not grid:
        raise CliError("--grid must be nonempty")
    pool = args.pairs if args.kind == "misalignment" else max(int(g) for g in grid)
    if args.kind == "datasize" and pool < 1:
        raise CliError("datasize grid needs at least one nonzero size")
    corpus = bench.build_benchmark(
        n_pretrain=max(pool, config.batch_size), n_probe=args.probe, n_eval=args.eval_n, seed=args.seed
    ).ablation_corpus()
    result = run_ablation(args.kind, grid, config, corpus, update_budget=args.update_budget)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = result.write(out_dir / "ablation.tsv")
    manifest.add_output(table_path)
    manifest.write(out_dir)
    print(result.table(), end="")
    failed = [p for p in result.points if p.error]
    if failed:
        logger.warning("%d of %d grid points failed", len(failed), len(result.points))
        return 2
    return 0


def _read_table(path: Path) -> tuple[list[float], list[float | None], list[float | None], float | None]:
    xs: list[float] = []
    aucs: list[float | None] = []
    mmds: list[float | None] = []
    baseline = None
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("x\t"):
        raise CliError(f"{path} is not an ablation table")
    for line in lines[1:]:
        if line.startswith("#"):
            baseline = float(line.rsplit("\t", 1)[1])
            continue
        x, auc, mmd_value, _error = line.split("\t")
        xs.append(float(x))
        aucs.append(float(auc) if auc else None)
        mmds.append(float(mmd_value) if mmd_value else None)
    return xs, aucs, mmds, baseline


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    manifest = RunManifest("plot", args)
    xs, aucs, mmds, baseline = _read_table(Path(args.table))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    have_auc = [(x, a) for x, a in zip(xs, aucs) if a is not None]
    ax.plot([x for x, _ in have_auc], [a for _, a in have_auc], "o-", color="tab:blue", label="probe AUC")
    if baseline is not None:
        ax.axhline(baseline, linestyle="--", color="gray", label="random init")
    ax.set_xlabel(args.xlabel)
    ax.set_ylabel("macro AUC")
    have_mmd = [(x, m) for x, m in zip(xs, mmds) if m is not None]
    if have_mmd:
        ax2 = ax.twinx()
        ax2.plot([x for x, _ in have_mmd], [m for _, m in have_mmd], "s--", color="tab:red", label="MMD")
        ax2.set_ylabel("MMD")
    ax.legend(loc="best")
    fig.tight_layout()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig_path = out_dir / args.name
    fig.savefig(fig_path)
    plt.close(fig)
    manifest.add_output(fig_path)
    manifest.write(out_dir)
    print(f"wrote {fig_path}")
    return 0


# --- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; our contract is 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgtext", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled corpus with descriptions")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--noise-std", type=float, default=bench.NOISE_STD)
    p.add_argument("--prefix", default="synth")
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    cqa = sub.add_parser("cqa", help="knowledge base and description generation")
    cqa_sub = cqa.add_subparsers(dest="cqa_command", required=True, parser_class=_Parser)
    p = cqa_sub.add_parser("build-kb", help="index documents into a knowledge base")
    p.add_argument("--docs", help="directory of *.txt documents (default: built-in corpus)")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--chunk-chars", type=int, default=800)
    p.add_argument("--overlap-chars", type=int, default=100)
    _add_common(p)
    p.set_defaults(func=cmd_build_kb)
    p = cqa_sub.add_parser("generate", help="write descriptions for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--k", type=int, default=4)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="joint contrastive-captioning pretraining")
    p.add_argument("--manifest")
    p.add_argument("--descriptions")
    p.add_argument("--config", help="YAML config (train/data/task sections)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--variant", choices=("tiny", "base"))
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    p.add_argument("mode", choices=("zeroshot", "probe", "finetune"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="held-out records to score")
    p.add_argument("--train-manifest", help="training records for probe/finetune")
    p.add_argument("--config", help="YAML config with a task section")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pretrain-probe sweeps over one knob")
    p.add_argument("kind", choices=("misalignment", "datasize"))
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--config", help="YAML config (train section; micro defaults)")
    p.add_argument("--pairs", type=int, default=512, help="pretraining pool size (misalignment)")
    p.add_argument("--probe", type=int, default=64, help="probe training set size")
    p.add_argument("--eval-n", type=int, default=128, help="evaluation set size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render an ablation table to a vector graphic")
    p.add_argument("--table", required=True)
    p.add_argument("--name", default="ablation.svg")
    p.add_argument("--xlabel", default="grid value")
    _add_common(p)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        logger.exception("run failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
