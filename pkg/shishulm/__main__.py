"""ShishuLM toolkit command line."""

import sys
from argparse import ArgumentParser, Namespace
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from loguru import logger

from . import BenchMode, __version__
from .analysis.emd import FAMILIES, MAX_SAMPLES, r_scores
from .analysis.probe import (
    DEFAULT_GENERATED,
    DEFAULT_PROMPT_LENGTHS,
    SCALE_ALPHAS,
    CosineMode,
    collect_io_pairs,
    probe_model,
    scale_invariance_rows,
)
from .bench.memory import MEMORY_COLUMNS, compare_memory
from .bench.timing import DEFAULT_LENGTHS, LATENCY_COLUMNS, BenchConfig, compare_latency
from .model.config import ModelConfig
from .model.params import count_parameters, enumerate_schedule_readings
from .model.presets import PresetError, get_preset, preset_names
from .model.transformer import ShishuLM, build_model
from .protocols.checkpoint import MAGIC, load_checkpoint
from .protocols.config_file import ConfigFileError, config_hash, load_config, save_config
from .protocols.csv_report import provenance, write_rows
from .train.ablation import SUMMARY_FILE, AblationSpec, run_ablation
from .train.config import RunConfig, TrainError
from .train.data import ByteTokenizer, CorpusDataset
from .train.trainer import CHECKPOINT_FILE, METRICS_FILE, eval_perplexity, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Bad command line arguments or config contents"""


class CommandError(Exception):
    """A command could not complete"""


class ShishuArgumentParser(ArgumentParser):
    """ArgumentParser that exits with the usage error code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} {path} not found")
    return p


def _out_dir(args: Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path: str, seed: int) -> Tuple[ModelConfig, ShishuLM]:
    """Load a checkpoint, or build a fresh model from a model config file."""

    p = _require_file(path, "model file")
    with open(p, "rb") as f:
        is_checkpoint = f.read(len(MAGIC)) == MAGIC
    if is_checkpoint:
        return load_checkpoint(p)
    config = load_config(p, ModelConfig)
    return config, build_model(config, seed)


def _prompt_tokens(args: Namespace) -> List[int]:
    tokenizer = ByteTokenizer()
    if getattr(args, "prompt_file", None):
        return list(_require_file(args.prompt_file, "prompt file").read_bytes())
    return tokenizer.encode(args.prompt or "")


def cmd_train(args: Namespace) -> int:
    """Train a model from a run config on a text corpus."""

    corpus = _require_file(args.corpus, "corpus")
    run = load_config(args.config, RunConfig)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    try:
        run.train = replace(run.train, **overrides)
    except TrainError as e:
        raise UsageError(str(e)) from e
    if run.model.vocab_size < ByteTokenizer.vocab_size:
        raise UsageError(f"vocab_size {run.model.vocab_size} is smaller than the byte vocabulary")

    dataset = CorpusDataset.from_file(corpus, run.train.block_size)
    train_set, val_set = dataset.split(run.train.val_blocks)

    out = _out_dir(args)
    header = provenance(run.train.seed, config_hash(run), command="train")
    model = build_model(run.model, run.train.seed)
    rows = train(model, train_set, val_set, run.train, out, header)
    save_config(out / "run_config.json", run)

    print(f"{out / CHECKPOINT_FILE}: final train loss {rows[-1].train_loss:.4f}")
    print(f"{out / METRICS_FILE}: {len(rows)} steps")
    return EXIT_OK


def cmd_generate(args: Namespace) -> int:
    """Continue a prompt with a trained model."""

    _, model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    prompt = _prompt_tokens(args)
    if args.n > 0 and not prompt:
        raise UsageError("generation needs a non-empty prompt")

    generator = torch.Generator()
    generator.manual_seed(args.seed if args.seed is not None else 0)
    tokens = model.generate(prompt, args.n, args.temperature, args.top_k, generator)
    print(ByteTokenizer().decode(tokens))
    return EXIT_OK


def cmd_probe(args: Namespace) -> int:
    """Run the linearity probe at several prompt lengths."""

    checkpoint = _require_file(args.checkpoint, "checkpoint")
    config, model = load_checkpoint(checkpoint)
    prompt = _prompt_tokens(args)
    mode = CosineMode(args.cosine_mode)

    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    header = provenance(seed, config_hash(config), command="probe")
    written = 0
    for length in args.lengths:
        if length > len(prompt):
            logger.warning(f"prompt has {len(prompt)} tokens, skipping length {length}")
            continue
        if length + args.generated > config.max_seq_len:
            logger.warning(f"length {length} + {args.generated} exceeds max_seq_len, skipping")
            continue

        capture = collect_io_pairs(model, prompt[:length], args.generated)
        report = probe_model(
            model,
            prompt[:length],
            args.generated,
            args.include_generated,
            mode,
            checkpoint.name,
            capture,
        )
        report.to_csv(header).write(out / f"probe_T{length}.csv")
        write_rows(
            out / f"scale_invariance_T{length}.csv",
            ["layer", "eps", "max_deviation"],
            scale_invariance_rows(capture, [0.0, config.rms_norm_eps], SCALE_ALPHAS),
            header,
        )
        written += 1

    print(f"wrote {written} probe reports to {out}")
    return EXIT_OK


def cmd_emd(args: Namespace) -> int:
    """Score MLP weight similarity of a checkpoint."""

    config, model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    seed = args.seed if args.seed is not None else 0
    report = r_scores(model, args.max_samples, seed)

    out = _out_dir(args)
    header = provenance(seed, config_hash(config), command="emd", max_samples=args.max_samples)
    report.emd_csv(header).write(out / "emd.csv")
    report.r_max_csv(header).write(out / "r_max.csv")
    for family in FAMILIES:
        report.matrix_csv(family, header).write(out / f"emd_matrix_{family}.csv")

    for family, scores in report.families.items():
        r_max = scores.r_max
        print(f"{family}: r_max*100 = {'undefined' if r_max is None else f'{r_max * 100:.4f}'}")
    return EXIT_OK


def cmd_bench(args: Namespace) -> int:
    """Compare latency and estimated memory of a parent and a ShishuLM model."""

    seed = args.seed if args.seed is not None else 0
    parent_cfg, parent = _load_model(args.parent, seed)
    shishu_cfg, shishu = _load_model(args.shishu, seed)

    max_len = min(parent_cfg.max_seq_len, shishu_cfg.max_seq_len)
    lengths = args.lengths or [n for n in DEFAULT_LENGTHS if n <= max_len]
    if not lengths:
        raise UsageError(f"no default length fits max_seq_len {max_len}")

    cfg = BenchConfig(
        lengths=lengths,
        batch_size=args.batch_size,
        warmup=args.warmup,
        reps=args.reps,
        mode=BenchMode.INFERENCE,
        seed=seed,
    )

    out = _out_dir(args)
    header = provenance(
        seed,
        f"{config_hash(parent_cfg)}/{config_hash(shishu_cfg)}",
        command="bench",
        materialize_scores=not args.no_materialize_scores,
    )
    memory = compare_memory(
        parent_cfg, shishu_cfg, lengths, args.batch_size, not args.no_materialize_scores
    )
    write_rows(out / "memory.csv", MEMORY_COLUMNS, [r.to_row() for r in memory], header)
    if not args.memory_only:
        latency = compare_latency(parent, shishu, cfg)
        write_rows(out / "latency.csv", LATENCY_COLUMNS, [r.to_row() for r in latency], header)

    print(f"wrote benchmark tables to {out}")
    return EXIT_OK


def cmd_ablate(args: Namespace) -> int:
    """Train every entry of an ablation grid."""

    corpus = _require_file(args.corpus, "corpus")
    spec = load_config(args.spec, AblationSpec)
    if args.seed is not None:
        spec.train = replace(spec.train, seed=args.seed)

    dataset = CorpusDataset.from_file(corpus, spec.train.block_size)
    train_set, val_set = dataset.split(spec.train.val_blocks)

    out = _out_dir(args)
    header = provenance(spec.train.seed, config_hash(spec), command="ablate")
    results = run_ablation(spec, train_set, val_set, out, header)

    failed = [r.name for r in results if r.status != "ok"]
    print(f"{out / SUMMARY_FILE}: {len(results)} entries, {len(failed)} failed")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_count_params(args: Namespace) -> int:
    """Print the unique parameter count of a config or preset."""

    if args.preset:
        config = get_preset(args.preset)
    elif args.config:
        config = load_config(args.config, ModelConfig)
    else:
        raise UsageError("either --config or --preset is needed")

    print(f"{count_parameters(config):,}")
    if args.target is not None:
        for reading in enumerate_schedule_readings(config, args.target):
            norm = "shared norm" if reading.share_norm else "norm per layer"
            print(
                f"{reading.n_decoder} decoders + {reading.n_groups}x{reading.pair_size} "
                f"ShishuMLP ({norm}): {reading.parameters:,}"
            )
    return EXIT_OK


def cmd_eval(args: Namespace) -> int:
    """Print the perplexity of a checkpoint on a corpus."""

    corpus = _require_file(args.corpus, "corpus")
    config, model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    block_size = args.block_size or min(256, config.max_seq_len)

    dataset = CorpusDataset.from_file(corpus, block_size)
    if args.all:
        blocks = dataset
    else:
        _, blocks = dataset.split(args.val_blocks)

    ppl = eval_perplexity(model, blocks)
    print(f"perplexity {ppl:.4f} over {len(blocks)} blocks of {block_size}")
    return EXIT_OK


def build_parser() -> ArgumentParser:
    """Make the argument parser."""

    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the random seed")
    common.add_argument("--out-dir", default="out", help="output directory")
    common.add_argument("--format", choices=["csv"], default="csv", help="report format")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = ShishuArgumentParser(prog="shishulm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ShishuArgumentParser)

    p = sub.add_parser("train", parents=[common], help=cmd_train.__doc__)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--corpus", required=True, help="UTF-8 text file")
    p.add_argument("--steps", type=int, default=None, help="override total_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help=cmd_generate.__doc__)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="", help="prompt text")
    p.add_argument("--prompt-file", default=None, help="read the prompt from a file")
    p.add_argument("-n", type=int, default=64, help="tokens to generate")
    p.add_argument("--temperature", type=float, default=0.0, help="0 for greedy")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("probe", parents=[common], help=cmd_probe.__doc__)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--lengths", type=int, nargs="+", default=list(DEFAULT_PROMPT_LENGTHS))
    p.add_argument("-b", "--generated", type=int, default=DEFAULT_GENERATED)
    p.add_argument("--include-generated", action="store_true", help="fit over generated rows too")
    p.add_argument(
        "--cosine-mode", choices=[m.value for m in CosineMode], default=CosineMode.EMPIRICAL.value
    )
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("emd", parents=[common], help=cmd_emd.__doc__)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-samples", type=int, default=MAX_SAMPLES)
    p.set_defaults(func=cmd_emd)

    p = sub.add_parser("bench", parents=[common], help=cmd_bench.__doc__)
    p.add_argument("--parent", required=True, help="checkpoint or model config JSON")
    p.add_argument("--shishu", required=True, help="checkpoint or model config JSON")
    p.add_argument("--lengths", type=int, nargs="+", default=None)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--no-materialize-scores", action="store_true")
    p.add_argument("--memory-only", action="store_true", help="skip the latency runs")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common], help=cmd_ablate.__doc__)
    p.add_argument("--spec", required=True, help="ablation spec JSON")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", parents=[common], help=cmd_count_params.__doc__)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config", default=None, help="model config JSON")
    group.add_argument("--preset", choices=preset_names(), default=None)
    p.add_argument("--target", type=int, default=None, help="list layer plans with this count")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("eval", parents=[common], help=cmd_eval.__doc__)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-blocks", type=int, default=16)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--all", action="store_true", help="evaluate the whole corpus")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line; returns the exit code."""

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")

    try:
        return args.func(args)
    except (UsageError, ConfigFileError, PresetError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except Exception as e:  # pylint: disable=W0718
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
