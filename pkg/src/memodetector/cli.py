#!/usr/bin/env python3
"""
memodetector - meme emotion understanding pipeline

Usage:
    memodetector synth                       Write a small synthetic corpus
    memodetector split --manifest M          Tag train/val/test splits (stratified)
    memodetector enhance --manifest M        Generate the ID/TM/CIM/CA enhancement texts
    memodetector validate --manifest M       Check manifest, config and cache coverage
    memodetector train --manifest M          Train one model (first seed unless --seed)
    memodetector eval --checkpoint C         Score a checkpoint on a split
    memodetector ablate --manifest M         Full model plus the five ablations
    memodetector compare --manifest M        Fusion-strategy and enhancement-strategy sweeps
    memodetector zeroshot --manifest M       Label memes by prompting the MLLM directly
    memodetector report [DIR ...]            Consolidated tables and bar charts
    memodetector config --show | --example   Effective or example configuration

Every configuration key can be overridden with a flag of the same name,
e.g. --encoder.variant toy --train.epochs 50. Everything a command writes
goes under --out (output.dir). --mock [echo|FIXTURE.json] replaces the MLLM
endpoint with a deterministic offline client.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .config_manager import CONFIG_SCHEMA, ConfigManager, RunConfig
from .enhancement_cache import EnhancementCache
from .enhancer import coverage_gaps, enhance_all, zero_shot_all
from .errors import MemoDetectorError
from .experiments import evaluation_split, run_ablations, run_variant_comparison
from .manifest import (
    DatasetManifest, Split, assign_splits, filter_language, load_manifest, parse_ratio,
    resolve_image_ref, split_view, write_manifest,
)
from .metrics import compute_metrics
from .mllm_client import MllmClient, MockMllmClient
from .report import build_report, format_table
from .synthetic import make_synthetic_dataset
from .training import evaluate, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(Exception):
    """A required flag is missing or malformed (exit code 2)"""
    pass


class MemoDetectorCLI:
    def __init__(self, config: ConfigManager, debug: bool = False, mock: Optional[str] = None):
        self.config = config
        self.debug = debug
        self.mock = mock
        self._run_config: Optional[RunConfig] = None

    @property
    def run_config(self) -> RunConfig:
        if self._run_config is None:
            self._run_config = self.config.to_run_config()
        return self._run_config

    @property
    def out_dir(self) -> Path:
        return Path(self.run_config.output_dir)

    def _require_manifest_path(self) -> Path:
        path = self.config.get("dataset.manifest")
        if not path:
            raise UsageError("--manifest (or dataset.manifest) is required")
        return Path(path)

    def _manifest(self, allow_missing_split: bool = False) -> DatasetManifest:
        manifest = load_manifest(self._require_manifest_path(), allow_missing_split=allow_missing_split)
        if self.run_config.dataset_name:
            manifest = replace(manifest, name=self.run_config.dataset_name)
        return manifest

    def _cache(self) -> EnhancementCache:
        return EnhancementCache(self.run_config.cache_path)

    def _client(self):
        config = self.run_config
        if self.mock is None:
            return MllmClient.from_config(config)
        if self.mock == "echo":
            return MockMllmClient(mode="echo", temperature=config.enhance_temperature,
                                  max_tokens=config.enhance_max_tokens)
        return MockMllmClient.from_fixture(self.mock, temperature=config.enhance_temperature,
                                           max_tokens=config.enhance_max_tokens)

    def cmd_synth(self, size: int, classes: int, image_size: int) -> int:
        """Write a synthetic corpus under --out"""
        if size < 1 or classes < 2:
            raise UsageError("--size must be positive and --classes at least 2")
        target = self.out_dir / "synthetic"
        path = make_synthetic_dataset(target, size=size, classes=classes, seed=self.run_config.split_seed,
                                      image_size=image_size, ratio=parse_ratio(self.run_config.split_ratio))
        print(f"[OK] Wrote {size} memes in {classes} classes")
        print(f"     Manifest: {path}")
        return 0

    def cmd_split(self, overwrite: bool = False) -> int:
        """Tag splits and write the manifest under --out; the input file is left alone"""
        source = self._require_manifest_path()
        manifest = self._manifest(allow_missing_split=True)
        try:
            ratio = parse_ratio(self.run_config.split_ratio)
        except ValueError as e:
            raise UsageError(str(e))
        manifest = assign_splits(manifest, ratio, seed=self.run_config.split_seed, overwrite=overwrite)

        # Relative image paths are made absolute so the written manifest works from --out
        instances = [
            inst if isinstance(inst.image_ref, bytes) else replace(inst, image_ref=str(resolve_image_ref(inst, manifest.root)))
            for inst in manifest.instances
        ]
        manifest = manifest.with_instances(instances)
        target = self.out_dir / source.name
        if target.resolve() == source.resolve():
            raise UsageError("--out must differ from the manifest's directory")
        write_manifest(manifest, target)

        counts = {split.value: len(split_view(manifest, split)) for split in Split}
        print(f"[OK] Split {len(manifest)} memes: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
        print(f"     Manifest: {target}")
        return 0

    def cmd_enhance(self) -> int:
        """Run the enhancement steps over the manifest; exit 1 if any (meme, step) failed"""
        manifest = filter_language(self._manifest(), self.run_config.dataset_language)
        config = self.run_config
        client = self._client()
        summary = enhance_all(client, manifest, self._cache(), steps=config.enhance_step_list,
                              workers=config.enhance_workers, max_image_bytes=config.enhance_max_image_bytes)
        print(f"{summary} calls={client.calls}")
        print(f"Cache: {config.cache_path}")
        if summary.failures:
            print(f"Error: {summary.failure_count} enhancement(s) failed:", file=sys.stderr)
            for meme_id, step in summary.failures:
                print(f"  {meme_id}/{step}", file=sys.stderr)
            return 1
        print("[OK] Enhancement complete")
        return 0

    def cmd_validate(self) -> int:
        """Check config, manifest and cache coverage; print the coverage matrix"""
        problems: List[str] = []
        problems.extend(f"config: {issue}" for issue in self.config.validate_config())
        if problems:
            for problem in problems:
                print(f"  [X] {problem}")
            print(f"Error: {len(problems)} problem(s) found", file=sys.stderr)
            return 1

        manifest = None
        if self.config.get("dataset.manifest"):
            try:
                manifest = filter_language(self._manifest(), self.run_config.dataset_language)
            except MemoDetectorError as e:
                problems.append(f"manifest: {e}")
            else:
                problems.extend(f"manifest: {issue}" for issue in manifest.validate(for_training=True))
        else:
            print("No manifest given; checked the configuration only")

        if manifest is not None:
            steps = self.run_config.steps
            cache = self._cache()
            gaps = set(coverage_gaps(cache, manifest.instances, steps))
            print(self._coverage_matrix(manifest, steps, gaps))
            total = len(manifest) * len(steps)
            percent = 100.0 * (total - len(gaps)) / total if total else 100.0
            print(f"coverage {percent:.0f}%" if percent in (0.0, 100.0) else f"coverage {percent:.1f}%")
            missing: Dict[str, List[str]] = {}
            for meme_id, step in sorted(gaps):
                missing.setdefault(step, []).append(meme_id)
            for step, ids in missing.items():
                problems.append(f"cache: {step} missing for {len(ids)} meme(s): {', '.join(ids)}")

        if problems:
            for problem in problems:
                print(f"  [X] {problem}")
            print(f"Error: {len(problems)} problem(s) found", file=sys.stderr)
            return 1
        print("[OK] All checks passed")
        return 0

    def _coverage_matrix(self, manifest: DatasetManifest, steps, gaps) -> str:
        width = max([len(m.id) for m in manifest.instances] + [4])
        lines = [f"{'meme':<{width}}  " + "  ".join(f"{s.value:>6}" for s in steps)]
        for meme in manifest.instances:
            cells = "  ".join(f"{'-' if (meme.id, s.value) in gaps else 'ok':>6}" for s in steps)
            lines.append(f"{meme.id:<{width}}  {cells}")
        return "\n".join(lines)

    def cmd_train(self) -> int:
        """Train with the first configured seed and write the run under --out/train"""
        config = self.run_config
        manifest = self._manifest()
        seed = config.seeds[0]
        out_dir = self.out_dir / "train" / f"seed-{seed}"
        result = train(config, manifest, config.cache_path, out_dir=out_dir, seed=seed)
        print(f"[OK] Trained {config.fusion_variant} ({result.parameter_count} parameters), seed {seed}")
        print(f"     Best epoch {result.best_epoch}, val macro-F1 {result.best_val_macro_f1:.4f}")
        print(f"     Checkpoint: {result.checkpoint_path}")
        print(f"     Epoch log:  {result.epoch_log_path}")
        return 0

    def cmd_eval(self, checkpoint: Optional[str], split: str) -> int:
        """Evaluate a checkpoint on a split"""
        if not checkpoint:
            raise UsageError("--checkpoint is required")
        if not Path(checkpoint).exists():
            raise UsageError(f"checkpoint {checkpoint} does not exist")
        manifest = self._manifest()
        out_dir = self.out_dir / "eval" / split
        report = evaluate(checkpoint, manifest, split, self.run_config.cache_path, out_dir=out_dir)
        self._print_metrics(report.headline(), report.count, split)
        print(f"     Results: {out_dir}")
        return 0

    def _print_metrics(self, headline: Dict[str, float], count: int, split: str):
        print(f"[OK] {split}: {count} memes")
        for name, value in headline.items():
            print(f"     {name:<16} {value:.4f}")

    def cmd_ablate(self) -> int:
        config = self.run_config
        result = run_ablations(config, self._manifest(), config.cache_path, out_dir=self.out_dir / "ablate")
        print(format_table(result.summary))
        print(f"[OK] {len(result)} configurations over {len(config.seeds)} seed(s): {result.metrics_path}")
        return 0

    def cmd_compare(self, sweep: str) -> int:
        config = self.run_config
        sweeps = ("fusion", "enhancement") if sweep == "both" else (sweep,)
        result = run_variant_comparison(config, self._manifest(), config.cache_path,
                                        out_dir=self.out_dir / "compare", sweeps=sweeps)
        print(format_table(result.summary))
        print(f"[OK] {len(result)} configurations over {len(config.seeds)} seed(s): {result.metrics_path}")
        return 0

    def cmd_zeroshot(self, split: Optional[str], chain_of_thought: bool) -> int:
        """Label memes by prompting the MLLM, without any trained model"""
        config = self.run_config
        manifest = filter_language(self._manifest(), config.dataset_language)
        split = Split(split) if split else evaluation_split(manifest)
        memes = split_view(manifest, split)
        if not memes:
            raise UsageError(f"no memes in split '{split.value}'")
        predictions = zero_shot_all(self._client(), manifest, memes, chain_of_thought,
                                    workers=config.enhance_workers, max_image_bytes=config.enhance_max_image_bytes)
        report = compute_metrics([p.label for p in predictions], [p.prediction for p in predictions],
                                 manifest.vocab.size)

        out_dir = self.out_dir / ("zeroshot-cot" if chain_of_thought else "zeroshot")
        out_dir.mkdir(parents=True, exist_ok=True)
        names = manifest.vocab.names
        with open(out_dir / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as f:
            for p in predictions:
                f.write(json.dumps({"id": p.meme_id, "label": names[p.label], "prediction": names[p.prediction],
                                    "parsed": p.parsed, "response": p.response}, ensure_ascii=False) + "\n")
        (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")

        self._print_metrics(report.headline(), report.count, split.value)
        unparsed = sum(1 for p in predictions if not p.parsed)
        if unparsed:
            print(f"     {unparsed} response(s) named no label and were counted as '{names[0]}'")
        print(f"     Results: {out_dir}")
        return 0

    def cmd_report(self, inputs: Sequence[str]) -> int:
        """Consolidate metrics.csv files into one table and per-dataset charts"""
        inputs = list(inputs) or [str(self.out_dir)]
        result = build_report(inputs, out_dir=self.out_dir / "report")
        print(format_table(result.table))
        for notice in result.notices:
            print(f"[!] {notice}")
        for chart in result.charts:
            print(f"[OK] Chart: {chart}")
        print(f"[OK] Table: {result.table_path}")
        return 0

    def cmd_config(self, show: bool = False, example: bool = False, save: Optional[str] = None) -> int:
        """Configuration management"""
        if example:
            print(self.config.example_config(), end="")
            return 0
        if save:
            path = self.config.save(save)
            print(f"[OK] Configuration saved to {path}")
            return 0
        if show:
            print(self.config.format_effective(), end="")
            issues = self.config.validate_config()
            if issues:
                print("\nConfiguration issues:", file=sys.stderr)
                for issue in issues:
                    print(f"  [X] {issue}", file=sys.stderr)
                return 1
            return 0
        raise UsageError("config needs --show, --example or --save PATH")


def configure_logging(level: str, debug: bool = False):
    """Root logger for the whole process; tqdm bars only show at INFO or below"""
    numeric = logging.DEBUG if debug else getattr(logging, level.upper(), logging.WARNING)
    root = logging.getLogger()
    root.setLevel(numeric)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("global options")
    group.add_argument("--config", help="configuration file (key = value with [section] headers)")
    group.add_argument("--out", help="output directory (overrides output.dir)")
    group.add_argument("--seed", type=int, help="run a single seed (overrides train.seeds)")
    group.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                       help="logging level (default: WARNING)")
    group.add_argument("--debug", action="store_true", help="shorthand for --log-level DEBUG")
    group.add_argument("--manifest", help="dataset manifest (overrides dataset.manifest)")
    group.add_argument("--mock", nargs="?", const="echo", metavar="echo|FIXTURE",
                       help="use the offline MLLM: 'echo' or a JSON fixture of canned replies")

    overrides = common.add_argument_group("configuration overrides")
    for key in CONFIG_SCHEMA:
        metavar = "|".join(key.choices) if key.choices else ("true|false" if key.type is bool else key.type.__name__.upper())
        overrides.add_argument(f"--{key.name}", dest=key.name, default=None, metavar=metavar,
                               help=f"{key.help} (default: {key.default!r})")
    return common


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  --{key.name:<28} {key.help}" for key in CONFIG_SCHEMA)
    parser = argparse.ArgumentParser(
        prog="memodetector",
        description="Meme emotion understanding with MLLM text enhancement and dual-stage fusion",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("Usage:")[1].strip() + "\n\nConfiguration keys (flags on every command):\n" + keys,
    )
    parser.add_argument("--version", "-V", action="version", version=f"memodetector {__version__}")
    common = _common_parser()
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    synth = subparsers.add_parser("synth", parents=[common], help="Write a synthetic corpus")
    synth.add_argument("--size", type=int, default=32, help="number of memes (default: 32)")
    synth.add_argument("--classes", type=int, default=4, help="number of classes (default: 4)")
    synth.add_argument("--image-size", type=int, default=32, help="image side in pixels (default: 32)")

    split = subparsers.add_parser("split", parents=[common], help="Assign train/val/test splits")
    split.add_argument("--overwrite", action="store_true", help="re-split memes that already have a split")

    subparsers.add_parser("enhance", parents=[common], help="Generate enhancement texts")
    subparsers.add_parser("validate", parents=[common], help="Check manifest, config and cache coverage")
    subparsers.add_parser("train", parents=[common], help="Train one model")

    evaluate_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate_parser.add_argument("--checkpoint", help="checkpoint.pt written by train")
    evaluate_parser.add_argument("--split", default="test", choices=[s.value for s in Split],
                                 help="split to score (default: test)")

    subparsers.add_parser("ablate", parents=[common], help="Run the ablation table")
    compare = subparsers.add_parser("compare", parents=[common], help="Run the fusion/enhancement sweeps")
    compare.add_argument("--sweep", default="both", choices=["fusion", "enhancement", "both"],
                         help="which sweep to run (default: both)")

    zeroshot = subparsers.add_parser("zeroshot", parents=[common], help="Label memes with the MLLM alone")
    zeroshot.add_argument("--split", choices=[s.value for s in Split], help="split to label (default: test)")
    zeroshot.add_argument("--cot", action="store_true", help="ask for step-by-step reasoning before the answer")

    report = subparsers.add_parser("report", parents=[common], help="Render tables and charts")
    report.add_argument("inputs", nargs="*", help="metrics.csv files or directories (default: --out)")

    config = subparsers.add_parser("config", parents=[common], help="Configuration")
    config.add_argument("--show", action="store_true", help="show the effective configuration")
    config.add_argument("--example", action="store_true", help="print a documented example file")
    config.add_argument("--save", metavar="PATH", help="write the effective configuration to PATH")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    values = vars(args)
    overrides = {key.name: values.get(key.name) for key in CONFIG_SCHEMA}
    if args.manifest:
        overrides["dataset.manifest"] = args.manifest
    if args.out:
        overrides["output.dir"] = args.out
    if args.seed is not None:
        overrides["train.seeds"] = str(args.seed)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if not args.command:
        parser.print_help()
        return 2

    configure_logging(args.log_level, args.debug)

    try:
        config = ConfigManager(args.config)
        config.set_overrides(_overrides(args))
        cli = MemoDetectorCLI(config, debug=args.debug, mock=args.mock)

        if args.command == "synth":
            return cli.cmd_synth(args.size, args.classes, args.image_size)
        elif args.command == "split":
            return cli.cmd_split(args.overwrite)
        elif args.command == "enhance":
            return cli.cmd_enhance()
        elif args.command == "validate":
            return cli.cmd_validate()
        elif args.command == "train":
            return cli.cmd_train()
        elif args.command == "eval":
            return cli.cmd_eval(args.checkpoint, args.split)
        elif args.command == "ablate":
            return cli.cmd_ablate()
        elif args.command == "compare":
            return cli.cmd_compare(args.sweep)
        elif args.command == "zeroshot":
            return cli.cmd_zeroshot(args.split, args.cot)
        elif args.command == "report":
            return cli.cmd_report(args.inputs)
        elif args.command == "config":
            return cli.cmd_config(args.show, args.example, args.save)
        else:
            print(f"Unknown command: {args.command}", file=sys.stderr)
            return 2
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except MemoDetectorError as e:
        if args.debug:
            logger.exception("Command %s failed", args.command)
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
