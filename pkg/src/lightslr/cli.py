"""Command-line entry point: ``lightslr <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, DatasetManifest, ManifestEntry, load_wav, read_manifest
from .errors import InvalidInputError, SLRError
from .evalbench import (benchmark_rtf, dump_records, evaluate, load_corpus, openset_experiment,
                        synth_corpus)
from .features import AugmentationConfig, log_mel, save_spectrogram
from .inference import THRESHOLD, format_prediction, predict_batch
from .models import ARCHITECTURES, HEADS, ModelConfig, build_model, count_params, load_weights, save_weights
from .training import ClipCache, TrainConfig, train

logger = logging.getLogger("lightslr")


def parse_languages(value: str) -> list[str]:
    """A languages file (one name per line) or a comma-separated list."""
    path = Path(value)
    if path.is_file():
        names = [line.strip() for line in path.read_text().splitlines()]
    else:
        names = [v.strip() for v in value.split(",")]
    names = [n for n in names if n and not n.startswith("#")]
    if not names:
        raise argparse.ArgumentTypeError("no languages given")
    return names


def _inputs(path: Path, languages) -> DatasetManifest:
    """A single WAV becomes a one-entry manifest; anything else is read as a manifest."""
    if path.suffix.lower() == ".wav":
        return DatasetManifest([ManifestEntry(path, 0)], list(languages or []))
    if languages is None:
        raise InvalidInputError("--languages is required when the input is a manifest")
    return read_manifest(path, languages)


def _print(text: str = "") -> None:
    sys.stdout.write(text + "\n")


def _write_model_summary(model) -> None:
    for path, kind, n in model.layer_table():
        _print(f"{path:<40} {kind:<24} {n:>9,d}")
    _print(f"{'total':<40} {model.config.architecture:<24} {count_params(model):>9,d}")


# -- subcommands -------------------------------------------------------------

def cmd_featurize(args) -> int:
    if args.input.suffix.lower() == ".wav":
        save_spectrogram(args.output, log_mel(load_wav(args.input)))
        return 0
    args.output.mkdir(parents=True, exist_ok=True)
    for entry in _inputs(args.input, args.languages):
        save_spectrogram(args.output / (entry.path.stem + ".slrf"), log_mel(load_wav(entry.path)))
    return 0


def cmd_inspect(args) -> int:
    if args.weights is not None:
        model = load_weights(args.weights)
    else:
        model = build_model(ModelConfig(args.arch, args.num_languages, head=args.head,
                                        width_multiplier=args.width))
    _write_model_summary(model)
    return 0


def _train_config(args) -> TrainConfig:
    aug = AugmentationConfig() if args.augment else AugmentationConfig.disabled()
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
                       patience=args.patience, seed=args.seed, augmentation=aug,
                       samples_per_class_per_epoch=args.samples_per_class, clip_s=args.clip_s)


def cmd_train(args) -> int:
    train_man = read_manifest(args.train, args.languages)
    train_man.validate_training()
    val_man = read_manifest(args.val, args.languages)
    model = build_model(ModelConfig(args.arch, len(args.languages), head=args.head,
                                    width_multiplier=args.width, seed=args.seed))

    def report(record):
        _print(json.dumps({"epoch": record.epoch, "train_loss": record.train_loss,
                           "val_loss": record.val_loss, "val_err": record.val_err}))
        sys.stdout.flush()

    model, history = train(model, train_man, val_man, _train_config(args), on_epoch=report)
    save_weights(model, args.output)
    _print(json.dumps({"best_epoch": history.best_epoch, "weights": str(args.output)}))
    return 0


def cmd_predict(args) -> int:
    model = load_weights(args.weights).eval()
    manifest = _inputs(args.input, args.languages)
    failed = 0
    for record in predict_batch(model, manifest, workers=args.workers, threshold=args.threshold):
        _print(format_prediction(record, args.languages))
        failed += record.error is not None
    return 1 if failed else 0


def cmd_eval(args) -> int:
    model = load_weights(args.weights).eval()
    manifest = read_manifest(args.manifest, args.languages)
    report = evaluate(model, manifest, threshold=args.threshold)
    _print(report.table(args.languages))
    _print(json.dumps(report.record()))
    if args.csv is not None:
        args.csv.write_text(report.confusion_csv(args.languages))
    return 0


def cmd_bench(args) -> int:
    if args.weights is not None:
        model = load_weights(args.weights)
    else:
        model = build_model(ModelConfig(args.arch, args.num_languages, head=args.head))
    if args.input is not None:
        clips = [load_wav(e.path) for e in _inputs(args.input, args.languages)]
    else:
        rng = np.random.default_rng(0)
        clips = [AudioClip(0.1 * rng.standard_normal(10 * 16000)) for _ in range(args.clips)]
    report = benchmark_rtf(model, clips, repetitions=args.repetitions, warmup=args.warmup)
    _print(report.table())
    _print(json.dumps(report.record()))
    return 0


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.output, args.targets, args.nontargets, args.per_class, seed=args.seed)
    for split, manifest in corpus.splits.items():
        _print(f"{split:<12} {len(manifest):5d} clips  {corpus.root / (split + '.tsv')}")
    return 0


def cmd_openset(args) -> int:
    corpus = load_corpus(args.corpus)
    cache = ClipCache()
    cfg = _train_config(args)
    records = []
    for arch in args.arch:
        for seed in args.seeds:
            report = openset_experiment(arch, seed, corpus, cfg, width_multiplier=args.width, cache=cache)
            records.append(report.record())
            _print(dump_records([report.record()]))
            sys.stdout.flush()
    for arch in args.arch:
        deltas = [r["delta"] for r in records if r["architecture"] == arch]
        median = float(statistics.median(deltas))
        _print(json.dumps({"architecture": arch, "median_delta": median, "multilabel_not_worse": median <= 0}))
    return 0


# -- parser ------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--samples-per-class", type=int, default=24)
    p.add_argument("--clip-s", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", dest="augment", action="store_false")
    p.add_argument("--width", type=float, default=1.0, help="channel width multiplier")


def _add_model_flags(p, required=False) -> None:
    p.add_argument("--arch", choices=ARCHITECTURES, required=required)
    p.add_argument("--head", choices=HEADS, default="multilabel")
    p.add_argument("--num-languages", type=int, default=11)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightslr", description="Small-footprint spoken language recognition.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="WAV or manifest to log-mel spectrogram files")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help="output .slrf file, or directory for a manifest")
    p.add_argument("--languages", type=parse_languages)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("inspect", help="layer table and parameter count")
    p.add_argument("weights", type=Path, nargs="?")
    _add_model_flags(p)
    p.add_argument("--width", type=float, default=1.0)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a model from manifests")
    _add_model_flags(p, required=True)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--languages", type=parse_languages, required=True)
    p.add_argument("--output", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-clip decisions")
    p.add_argument("weights", type=Path)
    p.add_argument("input", type=Path, help="WAV file or manifest")
    p.add_argument("--languages", type=parse_languages)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="error rate and confusion matrix on a manifest")
    p.add_argument("weights", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--languages", type=parse_languages, required=True)
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.add_argument("--csv", type=Path, help="write the row-normalized confusion matrix here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-thread real-time factor")
    p.add_argument("weights", type=Path, nargs="?")
    _add_model_flags(p)
    p.add_argument("--input", type=Path, help="WAV or manifest; random 10 s clips otherwise")
    p.add_argument("--languages", type=parse_languages)
    p.add_argument("--clips", type=int, default=10)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic open-set corpus")
    p.add_argument("output", type=Path)
    p.add_argument("--targets", type=int, default=5)
    p.add_argument("--nontargets", type=int, default=5)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("openset", help="multilabel vs multiclass+Other on a synthetic corpus")
    p.add_argument("corpus", type=Path)
    p.add_argument("--arch", choices=ARCHITECTURES, nargs="+", default=["lecapat", "tc_resnet10"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add_train_flags(p)
    p.set_defaults(func=cmd_openset, max_epochs=15, patience=4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("inspect", "bench") and args.weights is None and args.arch is None:
        parser.error(f"{args.command} needs a weight file or --arch")
    try:
        return args.func(args)
    except (SLRError, OSError) as exc:
        sys.stderr.write(f"lightslr {args.command}: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
