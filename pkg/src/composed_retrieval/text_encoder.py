"""Caption tokenization and the sentence/document-restricted Transformer encoder.

A caption document is laid out as ``[CLS] s1 ... [SEP] s2 ... [SEP]``. CLS
forms segment 0 on its own and sentence ``k`` together with its closing SEP
forms segment ``k``. The first ``sentence_layers`` layers only let a token
attend to tokens of its own segment; the remaining layers see the whole
document. The hidden state at CLS is the caption representation.

Several documents are encoded together by concatenating their tokens into one
matrix and masking attention between documents, so per-token layers run as a
single matrix product.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    EmptyDocumentError,
    SequenceLengthError,
    ShapeError,
)
from .numerics import LRGroup, Parameter, Tensor

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
RESERVED_TOKENS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

_PUNCT = re.compile(r"[^\w\s]")


class Vocabulary:
    """Token to id map with the five reserved tokens at ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._tokens: list[str] = []
        for tok in RESERVED_TOKENS:
            self._add(tok)
        for tok in tokens:
            if tok in self._ids:
                raise ConfigurationError(f"duplicate vocabulary token {tok!r}")
            self._add(tok)

    def _add(self, tok: str) -> None:
        self._ids[tok] = len(self._tokens)
        self._tokens.append(tok)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._ids

    @property
    def size(self) -> int:
        return len(self._tokens)

    def id_of(self, tok: str) -> int:
        return self._ids.get(tok, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._tokens[len(RESERVED_TOKENS):]

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 384
    num_heads: int = 6
    intermediate_dim: int = 1536
    sentence_layers: int = 2
    max_positions: int = 64
    dropout_rate: float = 0.1
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0 <= self.sentence_layers <= self.num_layers:
            raise ConfigurationError("sentence_layers must lie in [0, num_layers]")
        if self.max_positions < 2:
            raise ConfigurationError("max_positions must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[int]
    mlm_targets: list[tuple[int, int]] | None = None

    def __len__(self) -> int:
        return len(self.ids)


def split_words(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def tokenize_document(
    captions: Sequence[str], vocab: Vocabulary, max_positions: int = 64
) -> TokenSequence:
    """Lay out captions as ``[CLS] s1 [SEP] s2 [SEP] ...``.

    Captions without any word are dropped. When the document is too long,
    trailing sentences are dropped whole; a first sentence that alone
    overflows is cut short but keeps its SEP.
    """
    sentences = [w for w in (split_words(c) for c in captions) if w]
    if not sentences:
        raise EmptyDocumentError("caption document has no tokens")
    ids = [CLS_ID]
    segments = [0]
    for k, words in enumerate(sentences, start=1):
        room = max_positions - len(ids) - 1
        if len(words) > room:
            if k > 1:
                break
            words = words[:room]
        ids.extend(vocab.id_of(w) for w in words)
        ids.append(SEP_ID)
        segments.extend([k] * (len(words) + 1))
    return TokenSequence(ids, segments)


def shuffle_sentences(captions: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Return the captions in a uniformly random order."""
    if len(captions) < 2:
        return list(captions)
    return [captions[i] for i in rng.permutation(len(captions))]


def build_attention_mask(seq: TokenSequence, layer_index: int, config: EncoderConfig) -> np.ndarray:
    """Boolean n x n mask, ``M[i, j]`` true when query ``i`` may attend to key ``j``."""
    if not 0 <= layer_index < config.num_layers:
        raise ConfigurationError(f"layer_index {layer_index} outside [0, {config.num_layers})")
    ids = np.asarray(seq.ids)
    seg = np.asarray(seq.segments)
    if layer_index < config.sentence_layers:
        mask = seg[:, None] == seg[None, :]
    else:
        mask = np.ones((len(ids), len(ids)), dtype=bool)
    mask &= (ids != PAD_ID)[None, :]
    return mask


def _batch_attention_mask(
    seqs: Sequence[TokenSequence], sentence_layer: bool
) -> np.ndarray:
    doc = np.concatenate([np.full(len(s), i) for i, s in enumerate(seqs)])
    ids = np.concatenate([np.asarray(s.ids) for s in seqs])
    mask = doc[:, None] == doc[None, :]
    if sentence_layer:
        seg = np.concatenate([np.asarray(s.segments) for s in seqs])
        mask &= seg[:, None] == seg[None, :]
    mask &= (ids != PAD_ID)[None, :]
    # a row left empty (a PAD-only segment) attends to itself
    rows = np.flatnonzero(~mask.any(axis=1))
    mask[rows, rows] = True
    return mask


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return _uniform(rng, (fan_in, fan_out), float(np.sqrt(6.0 / (fan_in + fan_out))))


@dataclass
class EncoderLayer:
    ln1_gain: Parameter
    ln1_bias: Parameter
    wq: Parameter
    bq: Parameter
    wk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class EncoderParams:
    config: EncoderConfig
    vocab_size: int
    num_categories: int
    token_embedding: Parameter
    position_embedding: Parameter
    layers: list[EncoderLayer]
    final_gain: Parameter
    final_bias: Parameter
    mlm_weight: Parameter
    mlm_bias: Parameter
    category_weight: Parameter
    category_bias: Parameter
    _by_name: dict[str, Parameter] = field(default_factory=dict, repr=False)

    @classmethod
    def init(
        cls,
        config: EncoderConfig,
        vocab_size: int,
        num_categories: int,
        rng: np.random.Generator,
        prefix: str = "encoder",
    ) -> "EncoderParams":
        d, f = config.hidden_dim, config.intermediate_dim

        def p(name, data):
            return Parameter(data, f"{prefix}.{name}", LRGroup.ENCODER)

        layers = []
        for i in range(config.num_layers):
            n = f"layers.{i}"
            layers.append(
                EncoderLayer(
                    ln1_gain=p(f"{n}.ln1.gain", np.ones(d)),
                    ln1_bias=p(f"{n}.ln1.bias", np.zeros(d)),
                    wq=p(f"{n}.attn.wq", _glorot(rng, d, d)),
                    bq=p(f"{n}.attn.bq", np.zeros(d)),
                    wk=p(f"{n}.attn.wk", _glorot(rng, d, d)),
                    wv=p(f"{n}.attn.wv", _glorot(rng, d, d)),
                    bv=p(f"{n}.attn.bv", np.zeros(d)),
                    wo=p(f"{n}.attn.wo", _glorot(rng, d, d)),
                    bo=p(f"{n}.attn.bo", np.zeros(d)),
                    ln2_gain=p(f"{n}.ln2.gain", np.ones(d)),
                    ln2_bias=p(f"{n}.ln2.bias", np.zeros(d)),
                    w1=p(f"{n}.ffn.w1", _glorot(rng, d, f)),
                    b1=p(f"{n}.ffn.b1", np.zeros(f)),
                    w2=p(f"{n}.ffn.w2", _glorot(rng, f, d)),
                    b2=p(f"{n}.ffn.b2", np.zeros(d)),
                )
            )
        return cls(
            config=config,
            vocab_size=vocab_size,
            num_categories=num_categories,
            token_embedding=p("token_embedding", _uniform(rng, (vocab_size, d), 0.05)),
            position_embedding=p(
                "position_embedding", _uniform(rng, (config.max_positions, d), 0.05)
            ),
            layers=layers,
            final_gain=p("final_ln.gain", np.ones(d)),
            final_bias=p("final_ln.bias", np.zeros(d)),
            mlm_weight=p("mlm_head.weight", _glorot(rng, d, vocab_size)),
            mlm_bias=p("mlm_head.bias", np.zeros(vocab_size)),
            category_weight=p("category_head.weight", _glorot(rng, d, num_categories)),
            category_bias=p("category_head.bias", np.zeros(num_categories)),
        )

    def body_parameters(self) -> list[Parameter]:
        """Parameters used by :func:`encode` (everything except the pretraining heads)."""
        out = [self.token_embedding, self.position_embedding]
        for layer in self.layers:
            out.extend(vars(layer).values())
        out += [self.final_gain, self.final_bias]
        return out

    def head_parameters(self) -> list[Parameter]:
        return [self.mlm_weight, self.mlm_bias, self.category_weight, self.category_bias]

    def parameters(self) -> list[Parameter]:
        return self.body_parameters() + self.head_parameters()


# ---------------------------------------------------------------------------
# forward


def _validate(seqs: Sequence[TokenSequence], params: EncoderParams) -> None:
    cfg = params.config
    for s in seqs:
        if len(s.ids) > cfg.max_positions:
            raise SequenceLengthError(
                f"sequence of length {len(s.ids)} exceeds max_positions {cfg.max_positions}"
            )
        if not s.ids or s.ids[0] != CLS_ID:
            raise ShapeError("token sequence must start with CLS")
        if len(s.segments) != len(s.ids):
            raise ShapeError("segments and ids differ in length")
        if max(s.ids) >= params.vocab_size or min(s.ids) < 0:
            raise ShapeError("token id outside the vocabulary")


def _self_attention(
    x: Tensor, layer: EncoderLayer, mask: np.ndarray, cfg: EncoderConfig
) -> Tensor:
    q = nx.linear(x, layer.wq, layer.bq)
    # no key bias: it adds q.b to a whole softmax row and so never has a gradient
    k = nx.linear(x, layer.wk)
    v = nx.linear(x, layer.wv, layer.bv)
    dh = cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for h in range(cfg.num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        attn = nx.masked_softmax(nx.matmul(qh, kh.T) * scale, mask)
        heads.append(nx.matmul(attn, vh))
    merged = heads[0] if len(heads) == 1 else nx.concat(heads, axis=1)
    return nx.linear(merged, layer.wo, layer.bo)


def encode_batch(
    seqs: Sequence[TokenSequence],
    params: EncoderParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    num_layers: int | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Encode several documents at once.

    Returns ``(cls_vectors [B x d], token_states [N x d], offsets)`` where the
    token states of document ``b`` are rows ``offsets[b]:offsets[b + 1]``.
    ``num_layers`` truncates the stack (the final layer norm still applies).
    """
    cfg = params.config
    _validate(seqs, params)
    depth = cfg.num_layers if num_layers is None else num_layers
    if not 0 <= depth <= cfg.num_layers:
        raise ConfigurationError(f"num_layers {depth} outside [0, {cfg.num_layers}]")
    drop = cfg.dropout_rate if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ConfigurationError("train_mode with dropout needs an rng")

    lengths = [len(s) for s in seqs]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.intp)
    ids = np.concatenate([np.asarray(s.ids, dtype=np.intp) for s in seqs])
    positions = np.concatenate([np.arange(n, dtype=np.intp) for n in lengths])

    x = nx.take_rows(params.token_embedding, ids) + nx.take_rows(params.position_embedding, positions)
    x = nx.dropout(x, drop, rng) if drop else x
    sentence_mask = doc_mask = None
    for i, layer in enumerate(params.layers[:depth]):
        if i < cfg.sentence_layers:
            if sentence_mask is None:
                sentence_mask = _batch_attention_mask(seqs, True)
            mask = sentence_mask
        else:
            if doc_mask is None:
                doc_mask = _batch_attention_mask(seqs, False)
            mask = doc_mask
        h = nx.layer_norm(x, layer.ln1_gain, layer.ln1_bias, cfg.layer_norm_eps)
        h = _self_attention(h, layer, mask, cfg)
        x = x + (nx.dropout(h, drop, rng) if drop else h)
        h = nx.layer_norm(x, layer.ln2_gain, layer.ln2_bias, cfg.layer_norm_eps)
        h = nx.linear(nx.relu(nx.linear(h, layer.w1, layer.b1)), layer.w2, layer.b2)
        x = x + (nx.dropout(h, drop, rng) if drop else h)
    states = nx.layer_norm(x, params.final_gain, params.final_bias, cfg.layer_norm_eps)
    cls_vectors = nx.take_rows(states, offsets[:-1])
    return cls_vectors, states, offsets


def encode(
    seq: TokenSequence,
    params: EncoderParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    num_layers: int | None = None,
) -> tuple[Tensor, Tensor]:
    """Encode one document; returns ``(cls_vector [d], token_states [n x d])``."""
    cls_vectors, states, _ = encode_batch([seq], params, train_mode, rng, num_layers)
    return nx.reshape(cls_vectors, (params.config.hidden_dim,)), states


# ---------------------------------------------------------------------------
# pretraining


def apply_mlm_masking(
    seq: TokenSequence,
    rng: np.random.Generator,
    vocab_size: int,
    mask_rate: float = 0.15,
) -> TokenSequence:
    """Corrupt a copy of ``seq`` for masked language modeling.

    Each ordinary token is picked with probability ``mask_rate``; a picked
    token becomes MASK 80% of the time, a random ordinary token 10% of the
    time and stays unchanged otherwise. If nothing was picked, one eligible
    position is picked uniformly.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigurationError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    ids = list(seq.ids)
    eligible = [i for i, t in enumerate(ids) if t not in (PAD_ID, CLS_ID, SEP_ID)]
    if not eligible:
        raise DegenerateBatchError("sequence has no maskable tokens")
    draws = rng.random(len(eligible))
    picked = [pos for pos, u in zip(eligible, draws) if u < mask_rate]
    if not picked:
        picked = [eligible[int(rng.integers(len(eligible)))]]
    targets = []
    first_ordinary = len(RESERVED_TOKENS)
    for pos in picked:
        targets.append((pos, ids[pos]))
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9 and vocab_size > first_ordinary:
            ids[pos] = int(rng.integers(first_ordinary, vocab_size))
    return replace(seq, ids=ids, mlm_targets=targets)


def cross_entropy(logits: Tensor, labels: Sequence[int], smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of row-wise logits against integer labels.

    With ``smoothing`` > 0 the target puts ``1 - smoothing`` on the label
    and spreads ``smoothing`` uniformly over all classes.
    """
    n, classes = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ShapeError(f"labels do not fit logits of shape {list(logits.shape)}")
    logp = nx.log_softmax(logits)
    target = np.full((n, classes), smoothing / classes)
    target[np.arange(n), labels] += 1.0 - smoothing
    return nx.neg(nx.sum(logp * Tensor(target))) * (1.0 / n)


def pretrain_loss(
    seqs: Sequence[TokenSequence],
    category_labels: Sequence[int],
    params: EncoderParams,
    label_smoothing: float = 0.1,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Masked-token cross-entropy plus label-smoothed category cross-entropy."""
    if len(seqs) != len(category_labels):
        raise ShapeError("one category label per sequence is required")
    for s in seqs:
        if not s.mlm_targets:
            raise DegenerateBatchError("every sequence needs at least one masked position")
    cls_vectors, states, offsets = encode_batch(seqs, params, train_mode, rng)
    rows = [offsets[b] + pos for b, s in enumerate(seqs) for pos, _ in s.mlm_targets]
    originals = [orig for s in seqs for _, orig in s.mlm_targets]
    hidden = nx.take_rows(states, rows)
    mlm = cross_entropy(nx.linear(hidden, params.mlm_weight, params.mlm_bias), originals)
    cat_logits = nx.linear(cls_vectors, params.category_weight, params.category_bias)
    return mlm + cross_entropy(cat_logits, category_labels, smoothing=label_smoothing)
