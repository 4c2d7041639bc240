"""Command-line entry point.

    composed-retrieval fixture        --out DIR [--seed N] [--config PATH]
    composed-retrieval pretrain-text  --config PATH [--seed N] [--out DIR]
    composed-retrieval train          --config PATH [--seed N] [--out DIR] [--checkpoint PRETRAINED]
    composed-retrieval rank           --config PATH --checkpoint CKPT [--checkpoint CKPT ...]
                                      [--split val] [--out DIR] [--threads N]
    composed-retrieval eval           --config PATH --scores DIR [--split val]
    composed-retrieval ensemble       --config PATH --scores DIR --scores DIR ... [--out DIR]

Exit status is 0 on success, 1 for validation errors and 2 for runtime or
numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .checkpoint import copy_encoder, load_checkpoint, save_checkpoint
from .composition import CATEGORIES
from .config import DESK_SCALE, SPLITS, RunConfig
from .data import (
    EmbeddingStore,
    fixture_vocabulary,
    generate_fixture,
    load_dataset,
    save_dataset,
)
from .errors import ConfigurationError, NumericError, ValidationError
from .eval_ensemble import ScoreMatrix, ensemble_average, evaluate, score_gallery
from .model import RetrievalModel
from .text_encoder import Vocabulary
from .training import corpus_labels, pretrain_text, train_retrieval

log = logging.getLogger("composed_retrieval")


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    return config.with_seed(getattr(args, "seed", None))


def _read_corpus(path: Path) -> list[dict]:
    docs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append({"text": str(rec["text"]), "category": str(rec["category"])})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    if not docs:
        raise ValidationError(f"{path}: corpus is empty")
    return docs


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _out_dir(args, config: RunConfig) -> Path:
    out = Path(args.out) if args.out else config.resolve(config.paths.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_model_fits(model: RetrievalModel, vocab: Vocabulary, store: EmbeddingStore, where: str) -> None:
    if model.feature_dim != store.dim:
        raise ConfigurationError(
            f"{where}: projection expects {model.feature_dim}-d features, store has {store.dim}"
        )
    if model.encoder.vocab_size != vocab.size:
        raise ConfigurationError(
            f"{where}: encoder vocabulary {model.encoder.vocab_size} vs vocab file {vocab.size}"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_fixture(args) -> int:
    if args.config:
        config = _load_config(args)
    else:
        config = RunConfig.from_dict(DESK_SCALE).with_seed(args.seed)
    out = Path(args.out or "fixture")
    out.mkdir(parents=True, exist_ok=True)
    fx = config.fixture
    seed = config.optim.seed
    store = None
    corpus: list[dict] = []
    for offset, split_name in enumerate(SPLITS):
        split, split_store, split_corpus = generate_fixture(
            fx.num_items, fx.feature_dim, seed=seed + offset, grammar_seed=fx.grammar_seed,
            prefix=f"{split_name}_", split_name=split_name,
        )
        save_dataset(split, out / f"{split_name}.jsonl")
        store = split_store if store is None else store.merged(split_store)
        if split_name == "train":
            corpus = split_corpus
    store.save(out / "embeddings.json")
    fixture_vocabulary().save(out / "vocab.txt")
    _write_jsonl(out / "corpus.jsonl", corpus)
    paths = replace(
        config.paths,
        train="train.jsonl", val="val.jsonl", test="test.jsonl",
        embeddings="embeddings.json", vocab="vocab.txt", corpus="corpus.jsonl",
    )
    replace(config, paths=paths).save(out / "config.json")
    print(json.dumps({"out": str(out), "items_per_category": fx.num_items}))
    return 0


def cmd_pretrain_text(args) -> int:
    config = _load_config(args)
    config.require_paths("corpus", "vocab")
    vocab = Vocabulary.from_file(config.resolve(config.paths.vocab))
    corpus = _read_corpus(config.resolve(config.paths.corpus))
    feature_dim = config.fixture.feature_dim
    if config.paths.embeddings and config.resolve(config.paths.embeddings).exists():
        feature_dim = EmbeddingStore.load(config.resolve(config.paths.embeddings)).dim
    model = RetrievalModel.init(
        config.encoder_config, config.composition, vocab.size, feature_dim,
        config.optim.seed, num_corpus_categories=len(corpus_labels(corpus)),
    )
    out = _out_dir(args, config)
    steps = args.steps if args.steps is not None else config.pretrain.steps
    adam, losses = pretrain_text(
        model, corpus, vocab, config, steps=steps, metrics_path=out / "pretrain_metrics.jsonl"
    )
    save_checkpoint(out, model, config.to_dict(), adam)
    print(json.dumps({"checkpoint": str(out), "steps": steps,
                      "final_loss": losses[-1] if losses else None}))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    config.require_paths("train", "embeddings", "vocab")
    pretrained = args.checkpoint[0] if args.checkpoint else config.resolve(config.paths.pretrained)
    vocab = Vocabulary.from_file(config.resolve(config.paths.vocab))
    store = EmbeddingStore.load(config.resolve(config.paths.embeddings))
    split = load_dataset(config.dataset_path("train"), "train")
    store.require(split.image_ids())
    model = RetrievalModel.init(
        config.encoder_config, config.composition, vocab.size, store.dim, config.optim.seed
    )
    if pretrained is not None:
        source, _, _ = load_checkpoint(pretrained)
        copy_encoder(source, model)
    _check_model_fits(model, vocab, store, "train")
    out = _out_dir(args, config)
    adam, losses = train_retrieval(model, split, store, vocab, config, metrics_path=out / "metrics.jsonl")
    save_checkpoint(out, model, config.to_dict(), adam)
    print(json.dumps({"checkpoint": str(out), "steps": len(losses),
                      "final_loss": losses[-1] if losses else None}))
    return 0


def _load_split_and_store(config: RunConfig, split_name: str):
    config.require_paths(split_name, "embeddings", "vocab")
    split = load_dataset(config.dataset_path(split_name), split_name)
    store = EmbeddingStore.load(config.resolve(config.paths.embeddings))
    vocab = Vocabulary.from_file(config.resolve(config.paths.vocab))
    store.require(split.image_ids())
    return split, store, vocab


def _save_matrices(matrices: dict[str, ScoreMatrix], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for category, matrix in matrices.items():
        matrix.save(out / f"{category}.json")


def _load_matrices(directory: str | Path) -> dict[str, ScoreMatrix]:
    directory = Path(directory)
    return {c: ScoreMatrix.load(directory / f"{c}.json") for c in CATEGORIES}


def _emit_report(report, out: Path | None) -> None:
    text = report.to_json()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_rank(args) -> int:
    config = _load_config(args)
    if not args.checkpoint:
        raise ConfigurationError("rank needs at least one --checkpoint")
    split, store, vocab = _load_split_and_store(config, args.split)
    models = []
    for path in args.checkpoint:
        model, _, _ = load_checkpoint(path)
        _check_model_fits(model, vocab, store, f"checkpoint {path}")
        models.append(model)
    out = Path(args.out) if args.out else None
    per_model = []
    for i, model in enumerate(models):
        matrices = score_gallery(model, split, store, vocab, threads=args.threads)
        per_model.append(matrices)
        if out is not None:
            _save_matrices(matrices, out / f"model_{i}")
    if len(per_model) == 1:
        final = per_model[0]
    else:
        final = {c: ensemble_average([m[c] for m in per_model]) for c in CATEGORIES}
        if out is not None:
            _save_matrices(final, out / "ensemble")
    _emit_report(evaluate(final, split, config.eval.exclude_candidate), out)
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    if not args.scores:
        raise ConfigurationError("eval needs --scores DIR")
    split = load_dataset(config.dataset_path(args.split), args.split)
    matrices = _load_matrices(args.scores[0])
    _emit_report(evaluate(matrices, split, config.eval.exclude_candidate),
                 Path(args.out) if args.out else None)
    return 0


def cmd_ensemble(args) -> int:
    config = _load_config(args)
    if not args.scores:
        raise ConfigurationError("ensemble needs at least one --scores DIR")
    split = load_dataset(config.dataset_path(args.split), args.split)
    loaded = [_load_matrices(d) for d in args.scores]
    final = {c: ensemble_average([m[c] for m in loaded]) for c in CATEGORIES}
    out = Path(args.out) if args.out else None
    if out is not None:
        _save_matrices(final, out)
    _emit_report(evaluate(final, split, config.eval.exclude_candidate), out)
    return 0


COMMANDS = {
    "fixture": cmd_fixture,
    "pretrain-text": cmd_pretrain_text,
    "train": cmd_train,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="composed-retrieval",
        description="Composed image+text retrieval: train, rank, evaluate and ensemble.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides optim.seed")
        p.add_argument("--out", help="output directory")
        if name in ("train", "rank"):
            p.add_argument("--checkpoint", action="append", default=[],
                           help="checkpoint directory (repeatable for rank)")
        if name in ("rank", "eval", "ensemble"):
            p.add_argument("--split", choices=SPLITS, default="val")
        if name == "rank":
            p.add_argument("--threads", type=int, default=1)
        if name in ("eval", "ensemble"):
            p.add_argument("--scores", action="append", default=[],
                           help="directory of persisted score matrices (repeatable)")
        if name == "pretrain-text":
            p.add_argument("--steps", type=int, help="overrides pretrain.steps")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
