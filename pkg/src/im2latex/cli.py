"""``im2latex`` command suite.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs), 3 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path


from . import corpus as corpus_mod
from .config import ConfigError, RunConfig, load_run_config
from .distributed import context_from_env
from .evaluation import AlignmentError, benchmark_compare, evaluate_model
from .lora import inject, merge
from .model.checkpoint import CheckpointMismatchError, load_checkpoint
from .model.config import ModelConfigError
from .model.core import NonFiniteLossError, build_model
from .model.generation import Strategy, generate
from .preprocessing import Collator, LatexTokenizer, preprocess_image
from .trainer import Trainer, resolve_device

log = logging.getLogger("im2latex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    """Missing or malformed input artifact (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = _Parser(prog="im2latex", description="Image-to-LaTeX training and evaluation.", formatter_class=fmt)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="clean a corpus and write its split manifest", formatter_class=fmt)
    p.add_argument("corpus", type=Path, help="corpus directory (index.tsv + images/)")
    p.add_argument("--profile", choices=corpus_mod.PROFILES, default=corpus_mod.PRINTED, help="dataset profile")
    p.add_argument("--out", type=Path, required=True, help="output directory for manifest.json and cleaning_report.json")
    p.add_argument("--seed", type=int, default=42, help="split seed")
    p.add_argument("--ratios", type=float, nargs=3, default=list(corpus_mod.DEFAULT_RATIOS), help="train/val/test fractions")
    p.add_argument("--max-chars", type=int, default=corpus_mod.DEFAULT_MAX_CHARS, help="printed profile: max LaTeX length")
    p.add_argument("--max-aspect", type=float, default=corpus_mod.DEFAULT_MAX_ASPECT, help="printed profile: max height/width")

    for name, stage in (("train", None), ("finetune", "finetune")):
        p = sub.add_parser(name, help="train a model" if stage is None else "LoRA fine-tuning (train --stage finetune)",
                           formatter_class=fmt)
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        if stage is None:
            p.add_argument("--stage", choices=("base", "finetune"), default="base", help="training stage")
        p.add_argument("--corpus", type=Path, default=None, help="corpus directory")
        p.add_argument("--manifest", type=Path, default=None, help="split manifest from prepare-data")
        p.add_argument("--out", type=Path, required=True, help="run directory (checkpoints, history)")
        p.add_argument("--base-checkpoint", type=Path, default=None, help="base checkpoint (finetune stage)")
        p.add_argument("--resume", type=Path, default=None, help="resume from a 'last' checkpoint")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="config override; repeatable, wins over the file")
        if stage:
            p.set_defaults(stage=stage)

    p = sub.add_parser("evaluate", help="loss and GLEU of a checkpoint on a split", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--manifest", type=Path, default=None, help="split manifest (default: all records)")
    p.add_argument("--split", choices=corpus_mod.SPLIT_NAMES, default="test", help="split to evaluate")
    p.add_argument("--profile", choices=corpus_mod.PROFILES, default=corpus_mod.PRINTED, help="dataset profile")
    p.add_argument("--strategy", default="beam:4", help="greedy | beam | beam:K")
    p.add_argument("--batch-size", type=int, default=32, help="evaluation batch size")
    p.add_argument("--out", type=Path, default=None, help="directory for predictions.tsv and audit.jsonl")
    p.add_argument("--device", default="cpu", help="cpu | cuda | auto")

    p = sub.add_parser("infer", help="print the LaTeX predicted for one image", formatter_class=fmt)
    p.add_argument("checkpoint", type=Path, help="checkpoint directory")
    p.add_argument("image", type=Path, help="image file")
    p.add_argument("--strategy", default="greedy", help="greedy | beam | beam:K")
    p.add_argument("--device", default="cpu", help="cpu | cuda | auto")

    p = sub.add_parser("compare", help="Google BLEU table over several prediction files", formatter_class=fmt)
    p.add_argument("--reference", type=Path, required=True, help="reference file: id<TAB>latex")
    p.add_argument("predictions", nargs="+", metavar="NAME=PATH", help="prediction files: id<TAB>latex")
    p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")
    return ap


# --------------------------------------------------------------------------- commands

def cmd_prepare_data(args) -> int:
    if not args.corpus.is_dir():
        raise DataError(f"corpus directory not found: {args.corpus}")
    records, report = corpus_mod.load_corpus(args.corpus, args.profile, args.max_chars, args.max_aspect)
    ids = [r.id for r in records]
    manifest = None
    if args.profile == corpus_mod.HANDWRITTEN:
        manifest = corpus_mod.load_split_files(args.corpus, available=ids)
    if manifest is None:
        if not ids:
            raise DataError(f"no records left in {args.corpus} after cleaning")
        manifest = corpus_mod.split_dataset(ids, args.ratios, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest.save(args.out / "manifest.json")
    (args.out / "cleaning_report.json").write_text(report.to_json())
    print(f"input {report.input_count}, kept {report.kept}, dropped {dict(sorted(report.dropped_by_rule.items()))}")
    print("/".join(str(c) for c in manifest.counts))
    return EXIT_OK


def _split_records(corpus_dir: Path, manifest_path: Path | None, profile: str, cfg: RunConfig):
    if corpus_dir is None or not corpus_dir.is_dir():
        raise DataError(f"corpus directory required (got {corpus_dir})")
    if manifest_path is None or not manifest_path.exists():
        raise DataError(f"split manifest required (got {manifest_path}); run prepare-data first")
    records, _ = corpus_mod.load_corpus(corpus_dir, profile, cfg.corpus.max_chars, cfg.corpus.max_aspect)
    manifest = corpus_mod.SplitManifest.load(manifest_path)
    try:
        return {s: corpus_mod.select(records, manifest.ids(s)) for s in corpus_mod.SPLIT_NAMES}
    except KeyError as exc:
        raise DataError(str(exc)) from None


def _tokenizer_for(cfg: RunConfig, train_records) -> LatexTokenizer:
    vocab = cfg.preprocessing.vocab
    if vocab == "train":
        return LatexTokenizer.train((r.latex for r in train_records), cfg.preprocessing.num_merges)
    if vocab == "gpt2":
        return LatexTokenizer.gpt2()
    if not Path(vocab).exists():
        raise DataError(f"vocabulary file not found: {vocab}")
    return LatexTokenizer.load(vocab)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    stage = args.stage
    tcfg = cfg.train_config(stage)
    if stage == "finetune" and args.base_checkpoint is None:
        raise DataError("base checkpoint required for the finetune stage (--base-checkpoint)")
    if stage == "finetune" and not (args.base_checkpoint / "config.json").exists():
        raise DataError(f"base checkpoint required: nothing at {args.base_checkpoint}")
    profile = cfg.corpus.profile or (corpus_mod.PRINTED if stage == "base" else corpus_mod.HANDWRITTEN)
    splits = _split_records(args.corpus, args.manifest, profile, cfg)
    val_split = cfg.trainer.val_split

    if stage == "base":
        tokenizer = _tokenizer_for(cfg, splits["train"])
        model_cfg = cfg.model.build_config(tokenizer.vocab_size)
        model = build_model(model_cfg, init=cfg.model.init, seed=cfg.seed)
        side = model_cfg.encoder.input_side
    else:
        base = load_checkpoint(args.base_checkpoint)
        tokenizer = base.tokenizer
        side = base.preprocess.side
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if not args.verbose else "default")
            model = inject(merge(base.model), cfg.lora.to_lora_config(), seed=cfg.seed)
    collator = Collator(tokenizer, side=side, max_len=cfg.preprocessing.max_len,
                        mean=cfg.preprocessing.mean, std=cfg.preprocessing.std)
    dist_ctx = context_from_env()
    tcfg.world_size = dist_ctx.world_size
    trainer = Trainer(model, collator, splits["train"], splits[val_split], tcfg, args.out, dist_ctx)
    history = trainer.train(resume_from=args.resume)
    if not dist_ctx.is_main:
        return EXIT_OK

    final_model = trainer.model
    if history.best is not None:
        final_model = load_checkpoint(history.best.checkpoint, device=trainer.device).model
        print(f"best val loss: {history.best.val_loss:.6f} (step {history.best.step})")
    else:
        print("best val loss: n/a (no validation records)")
    test_records = splits[cfg.eval.split]
    if test_records:
        result = evaluate_model(final_model, test_records, collator, cfg.eval.strategy,
                                batch_size=cfg.eval.batch_size, device=trainer.device)
        result.write_predictions(args.out / f"{cfg.eval.split}_predictions.tsv")
        result.write_audit(args.out / f"{cfg.eval.split}_audit.jsonl")
        print(f"final {cfg.eval.split} loss: {result.mean_loss:.6f}")
        print(f"final GLEU: {result.gleu:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint, device=resolve_device(args.device))
    records, _ = corpus_mod.load_corpus(args.corpus, args.profile)
    if args.manifest is not None:
        if not args.manifest.exists():
            raise DataError(f"split manifest not found: {args.manifest}")
        manifest = corpus_mod.SplitManifest.load(args.manifest)
        try:
            records = corpus_mod.select(records, manifest.ids(args.split))
        except KeyError as exc:
            raise DataError(str(exc)) from None
    if not records:
        raise DataError("no records to evaluate")
    collator = Collator(ck.tokenizer, ck.preprocess.side, ck.preprocess.max_len, ck.preprocess.mean, ck.preprocess.std)
    result = evaluate_model(ck.model, records, collator, args.strategy, batch_size=args.batch_size,
                            device=resolve_device(args.device))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        result.write_predictions(args.out / "predictions.tsv")
        result.write_audit(args.out / "audit.jsonl")
    print(f"loss: {result.mean_loss:.6f}")
    print(f"GLEU: {result.gleu:.4f} over {len(result.items)} items")
    return EXIT_OK


def cmd_infer(args) -> int:
    device = resolve_device(args.device)
    ck = load_checkpoint(args.checkpoint, device=device)
    try:
        pixels = corpus_mod.read_image(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from None
    image = preprocess_image(pixels, ck.preprocess.side, ck.preprocess.mean, ck.preprocess.std).to(device)
    max_len = min(ck.preprocess.max_len, ck.config.decoder.max_positions)
    ids = generate(ck.model, image, ck.tokenizer.bos_id, ck.tokenizer.eos_id, max_len, Strategy.parse(args.strategy))
    print(ck.tokenizer.decode(ids))
    return EXIT_OK


def cmd_compare(args) -> int:
    files = []
    for item in args.predictions:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"prediction argument {item!r} must be NAME=PATH")
        files.append((name, Path(path)))
    for _, path in [("reference", args.reference), *files]:
        if not Path(path).exists():
            raise DataError(f"file not found: {path}")
    comparison = benchmark_compare(files, args.reference)
    print(comparison.table())
    if args.csv is not None:
        args.csv.write_text(comparison.csv())
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "finetune": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, FileNotFoundError, corpus_mod.CorpusFormatError, CheckpointMismatchError,
            AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
