"""
Command-line entry point: simulate | train | separate | eval | profile | gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
`TDANET_THREADS` caps BLAS and worker threads (the RTF benchmark always runs
on one thread).
"""

import argparse
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from .audio_io import read_wav, write_wav
from .checkpoint import BEST_MARKER, CheckpointStore, load_checkpoint
from .config import RunConfig, load_run_config, split_seeds, write_resolved_config
from .datagen import RECIPES, SPLITS, SeparationDataset, simulate_dataset
from .errors import ConfigError, TDANetError
from .evaluation import (
    ESTIMATE_MODES,
    RTF_PARITY_REPEATS,
    RTF_REPEATS,
    ablation_grid,
    cpu_rtf,
    evaluate_dataset,
    profile,
)
from .gradcheck import format_results, layer_suite, model_check
from .logger_config import logger, set_verbosity
from .presets import AblationPresets, ModelPresets
from .tdanet import TDANet
from .training import train_loop

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _threads() -> Optional[int]:
    value = os.getenv("TDANET_THREADS")
    if not value:
        return None
    if not value.isdigit() or int(value) < 1:
        raise ConfigError(f"TDANET_THREADS must be a positive integer, got '{value}'")
    return int(value)


def _resolve(args: argparse.Namespace, **fields) -> RunConfig:
    ablations = AblationPresets.parse(args.ablate) if args.ablate else None
    return load_run_config(args.config, args.preset, ablations, args.set or (), **fields)


def _checkpoint_stem(path: str) -> Path:
    """A checkpoint stem, or a training directory (its BEST marker, else `best`)."""
    target = Path(path)
    if target.is_dir():
        name = CheckpointStore(target).best() or "best"
        logger.debug(f"{target}/{BEST_MARKER} -> {name}")
        return target / name
    return target


def cmd_simulate(args: argparse.Namespace) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    manifest = simulate_dataset(args.recipe, counts, args.out, seed=args.seed, duration_s=args.duration,
                                workers=_threads(), codec=args.codec)
    write_resolved_config(args.out, RunConfig.create(seed=args.seed, manifest=str(manifest.path),
                                                     out_dir=str(args.out)))
    print(f"manifest: {manifest.path}")
    for split, count in manifest.counts().items():
        print(f"  {split:<6}{count:>6}")
    print(f"  recipe {manifest.recipe}, seed {manifest.seed}, {manifest.duration_s:g} s @ {manifest.sample_rate} Hz")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if not Path(args.manifest).exists():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    run = _resolve(args, manifest=str(args.manifest), out_dir=str(args.out), seed=args.seed)
    seeds = split_seeds(run.seed)
    write_resolved_config(args.out, run)
    model = TDANet(run.model, seed=seeds["init"], dropout_seed=seeds["dropout"])
    dataset = SeparationDataset(run.manifest, duration_s=args.duration)
    train_config = run.train.with_updates(seed=seeds["data"])
    result = train_loop(model, dataset, train_config, args.out, resume=args.resume, run_config=run)
    print(f"epochs run: {result.epochs_run}{' (early stop)' if result.stopped_early else ''}")
    print(f"best val loss: {result.best_val_loss:.4f}")
    print(f"checkpoints: {result.checkpoint_dir}")
    return EXIT_OK


def cmd_separate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(_checkpoint_stem(args.checkpoint))
    model = checkpoint.build_model()
    out = Path(args.out)
    write_resolved_config(out, RunConfig.create(model=checkpoint.config, seed=checkpoint.seed or 0,
                                                checkpoint=str(args.checkpoint), out_dir=str(out)))
    if args.input:
        wave, rate = read_wav(args.input)
        _write_estimates(out, model.separate(wave, rate), rate)
        print(f"wrote {model.config.speakers} estimates to {out}")
        return EXIT_OK

    examples = SeparationDataset(args.manifest).split(args.split)
    for index in range(len(examples)):
        example = examples[index]
        _write_estimates(out / f"{index:05d}", model.separate(example.mixture, example.sample_rate),
                         example.sample_rate)
    print(f"separated {len(examples)} {args.split} mixtures into {out}")
    return EXIT_OK


def _write_estimates(directory: Path, estimates: List, rate: int) -> None:
    for i, estimate in enumerate(estimates, start=1):
        write_wav(directory / f"spk{i}.wav", estimate, rate)


def cmd_eval(args: argparse.Namespace) -> int:
    if args.per_example and not args.out:
        raise ConfigError("eval --per-example needs --out to write per_example.csv")
    model = None
    if args.estimates == "model":
        if not args.checkpoint:
            raise ConfigError("eval --estimates model needs --checkpoint")
        model = load_checkpoint(_checkpoint_stem(args.checkpoint)).build_model()
    examples = SeparationDataset(args.manifest).split(args.split)
    report = evaluate_dataset(examples, args.estimates, model, workers=_threads())
    _emit(report, args)
    if args.per_example:
        report.per_example_frame().to_csv(Path(args.out) / "per_example.csv", index=False)
    return EXIT_OK


def _emit(report, args: argparse.Namespace, run: Optional[RunConfig] = None) -> None:
    print(report.to_json() if args.json else report.to_text(), end="")
    if not args.out:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    write_resolved_config(out, run or RunConfig.create(out_dir=str(out)))


def cmd_profile(args: argparse.Namespace) -> int:
    run = _resolve(args, seed=args.seed)
    report = profile(run.model, breakdown=args.breakdown)
    if args.rtf:
        seeds = split_seeds(run.seed)
        model = TDANet(run.model, seed=seeds["init"], dropout_seed=seeds["dropout"])
        repeats = args.repeats or (RTF_PARITY_REPEATS if args.paper_parity else RTF_REPEATS)
        report.rtf = cpu_rtf(model, repeats=repeats, warmup=args.warmup)
    _emit(report, args, run)
    if args.grid:
        grid = ablation_grid(run.model)
        print()
        print(grid.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = []
    if args.scale in ("layers", "all"):
        results += layer_suite(seed=args.seed)
    if args.scale in ("model", "all"):
        results.append(model_check(samples=args.samples, seed=args.seed))
    print(format_results(results), end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=ModelPresets.names(), help="Model preset")
    parser.add_argument("--config", help="Key-value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable)")
    parser.add_argument("--ablate", help=f"Comma-separated ablations: {', '.join(AblationPresets.names())}")
    parser.add_argument("--seed", type=int, help="Root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdanet", description="Top-down attention speech separation on numpy")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("simulate", parents=[common], help="Generate a synthetic mixture dataset")
    p.add_argument("--recipe", choices=sorted(RECIPES), default="lrs2_2mix_style")
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--test", type=int, default=3)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, help="Seconds per example (recipe default otherwise)")
    p.add_argument("--codec", choices=["float32", "pcm16"], default="float32")
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser("train", parents=[common], help="Train on a manifest")
    _add_model_options(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="Checkpoint and log directory")
    p.add_argument("--resume", action="store_true", help="Continue from OUT/last")
    p.add_argument("--duration", type=float, help="Truncate/zero-pad every example to this many seconds")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("separate", parents=[common], help="Separate a WAV file or a manifest split")
    p.add_argument("--checkpoint", required=True, help="Checkpoint stem or training directory")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="Mono WAV mixture")
    source.add_argument("--manifest", help="Batch mode over a manifest split")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = commands.add_parser("eval", parents=[common], help="SI-SNRi / SDRi over a manifest split")
    p.add_argument("--checkpoint", help="Checkpoint stem or training directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--estimates", choices=ESTIMATE_MODES, default="model")
    p.add_argument("--out", help="Write report.json, report.txt (and per_example.csv)")
    p.add_argument("--per-example", action="store_true", help="Also dump per-example metrics as CSV")
    p.add_argument("--json", action="store_true", help="Print JSON instead of text")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("profile", parents=[common], help="Parameter/MAC counts and CPU RTF")
    _add_model_options(p)
    p.add_argument("--rtf", action="store_true", help="Run the single-threaded RTF benchmark")
    p.add_argument("--paper-parity", action="store_true", help=f"{RTF_PARITY_REPEATS} RTF repeats")
    p.add_argument("--repeats", type=int, help="RTF repeats (overrides --paper-parity)")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--breakdown", action="store_true", help="Per-component params and MACs")
    p.add_argument("--grid", action="store_true", help="Static counts for every ablation")
    p.add_argument("--out", help="Write report.json and report.txt")
    p.add_argument("--json", action="store_true", help="Print JSON instead of text")
    p.set_defaults(func=cmd_profile)

    p = commands.add_parser("gradcheck", parents=[common], help="Finite-difference gradient verification")
    p.add_argument("--scale", choices=["layers", "model", "all"], default="all")
    p.add_argument("--samples", type=int, default=512, help="Waveform length for the model check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    set_verbosity(args.verbose)
    try:
        threads = _threads()
        with threadpool_limits(limits=threads) if threads else nullcontext():
            return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except TDANetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
