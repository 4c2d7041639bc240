"""Training loops for text-encoder pretraining and retrieval."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetSplit, EmbeddingStore, make_batches, synthesize_pseudo_pairs
from .errors import NumericError
from .metric import ranked_list_loss
from .model import RetrievalModel
from .numerics import AdamState, LRGroup
from .text_encoder import (
    TokenSequence,
    Vocabulary,
    apply_mlm_masking,
    pretrain_loss,
    shuffle_sentences,
    tokenize_document,
)

log = logging.getLogger(__name__)


class MetricsWriter:
    """JSON-lines ``{"step": n, "loss": x}`` records."""

    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, step: int, loss: float) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps({"step": step, "loss": loss}) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def new_adam(config: RunConfig) -> AdamState:
    o = config.optim
    return AdamState(beta1=o.beta1, beta2=o.beta2, eps=o.eps)


def _check_finite(loss: float, step: int, what: str) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"{what}: non-finite loss {loss} at step {step}")


# ---------------------------------------------------------------------------
# pretraining


def corpus_sentences(text: str) -> list[str]:
    return [s for s in (part.strip() for part in text.split(".")) if s]


def corpus_labels(corpus: Sequence[dict]) -> list[str]:
    """Sorted distinct corpus categories; a document's label is its index here."""
    return sorted({doc["category"] for doc in corpus})


def masked_corpus_batch(
    docs: Sequence[dict],
    labels: Sequence[str],
    vocab: Vocabulary,
    max_positions: int,
    rng: np.random.Generator,
    mask_rate: float,
    shuffle: bool,
) -> tuple[list[TokenSequence], list[int]]:
    seqs, ys = [], []
    for doc in docs:
        sentences = corpus_sentences(doc["text"])
        if shuffle:
            sentences = shuffle_sentences(sentences, rng)
        seq = tokenize_document(sentences, vocab, max_positions)
        seqs.append(apply_mlm_masking(seq, rng, vocab.size, mask_rate))
        ys.append(labels.index(doc["category"]))
    return seqs, ys


def evaluate_pretrain_loss(
    model: RetrievalModel, corpus: Sequence[dict], vocab: Vocabulary, config: RunConfig, seed: int = 0
) -> float:
    """Pretraining loss on the whole corpus under one fixed masking, dropout off."""
    rng = np.random.default_rng([seed, 17])
    seqs, ys = masked_corpus_batch(
        corpus, corpus_labels(corpus), vocab, model.encoder.config.max_positions,
        rng, config.pretrain.mask_rate, shuffle=False,
    )
    return pretrain_loss(seqs, ys, model.encoder, config.pretrain.label_smoothing).item()


def pretrain_text(
    model: RetrievalModel,
    corpus: Sequence[dict],
    vocab: Vocabulary,
    config: RunConfig,
    steps: int | None = None,
    metrics_path: str | Path | None = None,
    adam: AdamState | None = None,
) -> tuple[AdamState, list[float]]:
    """Masked-LM plus category-prediction training of the encoder only."""
    steps = config.pretrain.steps if steps is None else steps
    adam = adam or new_adam(config)
    labels = corpus_labels(corpus)
    params = model.encoder.parameters()
    lr_table = {LRGroup.ENCODER: config.optim.lr_encoder}
    seed = config.optim.seed
    size = min(config.pretrain.batch_size, len(corpus))
    losses = []
    with MetricsWriter(metrics_path) as metrics:
        for step in range(steps):
            rng = np.random.default_rng([seed, 3, step])
            picks = rng.choice(len(corpus), size=size, replace=False)
            seqs, ys = masked_corpus_batch(
                [corpus[i] for i in picks], labels, vocab, model.encoder.config.max_positions,
                rng, config.pretrain.mask_rate, config.augment.shuffle_sentences,
            )
            loss = pretrain_loss(
                seqs, ys, model.encoder, config.pretrain.label_smoothing, train_mode=True, rng=rng
            )
            value = loss.item()
            _check_finite(value, step, "pretrain-text")
            nx.backward(loss)
            nx.adam_step(params, adam, lr_table)
            metrics.write(step, value)
            losses.append(value)
    return adam, losses


# ---------------------------------------------------------------------------
# retrieval training


def train_retrieval(
    model: RetrievalModel,
    split: DatasetSplit,
    store: EmbeddingStore,
    vocab: Vocabulary,
    config: RunConfig,
    metrics_path: str | Path | None = None,
    adam: AdamState | None = None,
    on_epoch_end: Callable[[int, int], None] | None = None,
) -> tuple[AdamState, list[float]]:
    """Curriculum training: per epoch all dress batches, then shirt, then toptee."""
    o = config.optim
    examples = split.all_examples()
    if config.pseudo_pairs.enabled:
        examples += synthesize_pseudo_pairs(
            split, config.pseudo_pairs.phrases, np.random.default_rng([o.seed, 5])
        )
    store.require(split.image_ids())
    adam = adam or new_adam(config)
    params = model.retrieval_parameters()
    lr_table = {LRGroup.COMPOSITION: o.lr_composition, LRGroup.ENCODER: o.lr_encoder}
    max_pos = model.encoder.config.max_positions
    losses: list[float] = []
    step = 0
    with MetricsWriter(metrics_path) as metrics:
        for epoch in range(o.epochs):
            for batch in make_batches(examples, o.batch_size, epoch, o.seed):
                if o.max_steps is not None and step >= o.max_steps:
                    return adam, losses
                rng = np.random.default_rng([o.seed, 2, step])
                seqs = []
                for ex in batch.examples:
                    captions = list(ex.captions)
                    if config.augment.shuffle_sentences:
                        captions = shuffle_sentences(captions, rng)
                    seqs.append(tokenize_document(captions, vocab, max_pos))
                composed = model.compose(
                    store.lookup([ex.candidate_id for ex in batch.examples]),
                    seqs,
                    [batch.category] * len(batch),
                    train_mode=True,
                    rng=rng,
                )
                targets = model.embed_images(store.lookup([ex.target_id for ex in batch.examples]))
                loss = ranked_list_loss(composed, targets, config.loss)
                value = loss.item()
                _check_finite(value, step, "train")
                nx.backward(loss)
                nx.adam_step(params, adam, lr_table)
                metrics.write(step, value)
                losses.append(value)
                step += 1
            if on_epoch_end is not None:
                on_epoch_end(epoch, step)
    return adam, losses
