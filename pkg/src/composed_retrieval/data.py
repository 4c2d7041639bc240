"""Retrieval datasets, image-feature stores, pseudo pairs, batching and fixtures."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .composition import CATEGORIES, category_index
from .errors import ConfigurationError, DatasetParseError, EmbeddingLookupError, ValidationError
from .text_encoder import Vocabulary, split_words

log = logging.getLogger(__name__)

DEFAULT_EQUIVALENCE_PHRASES = (
    "exactly same",
    "is the same item",
    "is the same",
    "same as this one",
    "looks identical",
)


@dataclass(frozen=True)
class RetrievalExample:
    candidate_id: str
    target_id: str
    captions: tuple[str, ...]
    category: str
    is_pseudo: bool = False

    def __post_init__(self):
        if not self.captions:
            raise ValidationError("a retrieval example needs at least one caption")
        category_index(self.category)
        if self.is_pseudo and self.candidate_id != self.target_id:
            raise ValidationError("a pseudo pair must have candidate_id == target_id")

    def to_record(self) -> dict:
        return {
            "candidate": self.candidate_id,
            "target": self.target_id,
            "captions": list(self.captions),
            "category": self.category,
        }


@dataclass
class DatasetSplit:
    name: str
    examples: dict[str, list[RetrievalExample]] = field(
        default_factory=lambda: {c: [] for c in CATEGORIES}
    )
    gallery: dict[str, list[str]] = field(default_factory=lambda: {c: [] for c in CATEGORIES})

    @classmethod
    def from_examples(cls, name: str, examples: Iterable[RetrievalExample]) -> "DatasetSplit":
        split = cls(name)
        seen = {c: set() for c in CATEGORIES}
        for ex in examples:
            split.examples[ex.category].append(ex)
            for image_id in (ex.candidate_id, ex.target_id):
                if image_id not in seen[ex.category]:
                    seen[ex.category].add(image_id)
                    split.gallery[ex.category].append(image_id)
        return split

    def all_examples(self) -> list[RetrievalExample]:
        return [ex for c in CATEGORIES for ex in self.examples[c]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.examples.values())

    def image_ids(self) -> list[str]:
        return [i for c in CATEGORIES for i in self.gallery[c]]


def load_dataset(path: str | Path, name: str | None = None) -> DatasetSplit:
    """Read a JSON-lines split. The split name defaults to the file stem."""
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = RetrievalExample(
                    candidate_id=str(rec["candidate"]),
                    target_id=str(rec["target"]),
                    captions=tuple(str(c) for c in rec["captions"]),
                    category=rec["category"],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(f"{path}: line {lineno}: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
            examples.append(ex)
    return DatasetSplit.from_examples(name or path.stem, examples)


def save_dataset(split: DatasetSplit, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in split.all_examples():
            fh.write(json.dumps(ex.to_record()) + "\n")


class EmbeddingStore:
    """Fixed-width image feature vectors indexed by image id.

    On disk: a JSON manifest ``{"dim", "count", "ids"}`` next to a raw
    little-endian float32 file with the same stem and a ``.bin`` suffix.
    """

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValidationError(f"store matrix {matrix.shape} does not match {len(ids)} ids")
        self.ids = list(ids)
        self.index = {}
        for row, image_id in enumerate(self.ids):
            if image_id in self.index:
                raise ValidationError(f"duplicate id {image_id!r} in embedding store")
            self.index[image_id] = row
        self.matrix = matrix
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        rows = []
        for image_id in ids:
            try:
                rows.append(self.index[image_id])
            except KeyError:
                raise EmbeddingLookupError(f"image id {image_id!r} not in embedding store") from None
        return self.matrix[np.asarray(rows, dtype=np.intp)].reshape(len(rows), self.dim)

    def require(self, ids: Iterable[str]) -> None:
        for image_id in ids:
            if image_id not in self.index:
                raise EmbeddingLookupError(f"image id {image_id!r} not in embedding store")

    def merged(self, other: "EmbeddingStore") -> "EmbeddingStore":
        return EmbeddingStore(self.ids + other.ids, np.vstack([self.matrix, other.matrix]))

    def save(self, manifest_path: str | Path) -> None:
        write_matrix(manifest_path, self.matrix, {"ids": self.ids})

    @classmethod
    def load(cls, manifest_path: str | Path) -> "EmbeddingStore":
        manifest, matrix = read_matrix(manifest_path)
        return cls(manifest["ids"], matrix)


def binary_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_matrix(manifest_path: str | Path, matrix: np.ndarray, extra: dict) -> None:
    """Write a row-major float32 matrix with its manifest."""
    manifest_path = Path(manifest_path)
    count, dim = matrix.shape
    manifest = {"dim": int(dim), "count": int(count), **extra}
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    binary_path(manifest_path).write_bytes(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_matrix(manifest_path: str | Path) -> tuple[dict, np.ndarray]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        dim, count = int(manifest["dim"]), int(manifest["count"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{manifest_path}: unreadable manifest: {exc}") from exc
    raw = np.fromfile(binary_path(manifest_path), dtype="<f4")
    if raw.size != dim * count:
        raise ValidationError(
            f"{binary_path(manifest_path)}: expected {dim * count} values, found {raw.size}"
        )
    return manifest, raw.astype(np.float64).reshape(count, dim)


def synthesize_pseudo_pairs(
    split: DatasetSplit,
    equivalence_phrases: Sequence[str] = DEFAULT_EQUIVALENCE_PHRASES,
    rng: np.random.Generator | None = None,
) -> list[RetrievalExample]:
    """Self-pairs for every image that is never a target anywhere in ``split``.

    Each pair is captioned with two distinct phrases drawn from
    ``equivalence_phrases``.
    """
    if len(equivalence_phrases) < 2:
        raise ConfigurationError("at least two equivalence phrases are required")
    rng = rng if rng is not None else np.random.default_rng(0)
    targets = {ex.target_id for ex in split.all_examples()}
    pairs = []
    for category in CATEGORIES:
        for image_id in split.gallery[category]:
            if image_id in targets:
                continue
            picks = rng.choice(len(equivalence_phrases), size=2, replace=False)
            pairs.append(
                RetrievalExample(
                    candidate_id=image_id,
                    target_id=image_id,
                    captions=tuple(equivalence_phrases[i] for i in picks),
                    category=category,
                    is_pseudo=True,
                )
            )
    return pairs


@dataclass(frozen=True)
class Batch:
    category: str
    examples: tuple[RetrievalExample, ...]

    def __len__(self) -> int:
        return len(self.examples)


def make_batches(
    examples: Iterable[RetrievalExample],
    batch_size: int,
    epoch_index: int,
    seed: int,
) -> list[Batch]:
    """One epoch of single-category batches: all dress, then shirt, then toptee.

    Examples are shuffled within their category with a generator seeded by
    ``(seed, epoch_index)``. A trailing batch of one example is dropped.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be at least 2, got {batch_size}")
    by_cat: dict[str, list[RetrievalExample]] = {c: [] for c in CATEGORIES}
    for ex in examples:
        by_cat[ex.category].append(ex)
    rng = np.random.default_rng([seed, epoch_index])
    batches = []
    for category in CATEGORIES:
        pool = by_cat[category]
        if not pool:
            log.warning("epoch %d: no examples for category %s, skipped", epoch_index, category)
            continue
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            chunk = tuple(pool[i] for i in order[start:start + batch_size])
            if len(chunk) >= 2:
                batches.append(Batch(category, chunk))
    return batches


# ---------------------------------------------------------------------------
# synthetic fixture

COLORS = ("black", "white", "red", "blue", "green", "pink")
SLEEVES = ("long sleeves", "short sleeves", "no sleeves")
PATTERNS = ("solid", "striped", "floral", "dotted")
CATEGORY_NOUNS = {"dress": "dress", "shirt": "shirt", "toptee": "top"}
ATTRIBUTES = (("color", COLORS), ("sleeve", SLEEVES), ("pattern", PATTERNS))

_CAPTION_TEMPLATES = {
    "color": ("is {v}", "is {v} in color", "has a {v} color"),
    "sleeve": ("has {v}", "with {v}"),
    "pattern": ("is {v}", "has a {v} pattern"),
}
_EXTRA_WORDS = ("a", "the", "it", "in", "color", "pattern", "has", "is", "with", "and", "this",
                "item", "exactly", "same", "as", "one", "looks", "identical")


def fixture_vocabulary() -> Vocabulary:
    """Every word the fixture grammar and the default equivalence phrases can produce."""
    words: list[str] = []
    sources = list(_EXTRA_WORDS) + list(COLORS) + list(SLEEVES) + list(PATTERNS)
    sources += list(CATEGORY_NOUNS.values()) + list(DEFAULT_EQUIVALENCE_PHRASES)
    for text in sources:
        for w in split_words(text):
            if w not in words:
                words.append(w)
    return Vocabulary(words)


def _grammar_prototypes(feature_dim: int, grammar_seed: int) -> dict[tuple[str, int], np.ndarray]:
    rng = np.random.default_rng([grammar_seed, 7919])
    protos = {}
    for name, values in ATTRIBUTES:
        for v in range(len(values)):
            protos[(name, v)] = rng.standard_normal(feature_dim) / np.sqrt(feature_dim)
    for c in CATEGORIES:
        protos[("category", category_index(c))] = rng.standard_normal(feature_dim) / np.sqrt(feature_dim)
    return protos


def _describe(attrs: dict[str, int], changed: Sequence[str], rng: np.random.Generator) -> list[str]:
    captions = []
    for name in changed:
        values = dict(ATTRIBUTES)[name]
        templates = _CAPTION_TEMPLATES[name]
        captions.append(templates[int(rng.integers(len(templates)))].format(v=values[attrs[name]]))
    return captions


def _corpus_text(category: str, attrs: dict[str, int]) -> str:
    return (
        f"a {COLORS[attrs['color']]} {CATEGORY_NOUNS[category]} . "
        f"it has {SLEEVES[attrs['sleeve']]} . "
        f"the pattern is {PATTERNS[attrs['pattern']]} ."
    )


def generate_corpus(
    num_docs: int, categories: Sequence[str], seed: int
) -> list[dict[str, str]]:
    """Pretraining documents describing random items of the given categories."""
    rng = np.random.default_rng([seed, 31])
    docs = []
    for i in range(num_docs):
        category = categories[i % len(categories)]
        attrs = {name: int(rng.integers(len(vals))) for name, vals in ATTRIBUTES}
        docs.append({"text": _corpus_text(category, attrs), "category": category})
    return docs


def generate_fixture(
    num_items: int,
    feature_dim: int = 32,
    seed: int = 0,
    grammar_seed: int = 0,
    prefix: str = "",
    identity_scale: float = 1.0,
    split_name: str = "train",
) -> tuple[DatasetSplit, EmbeddingStore, list[dict[str, str]]]:
    """A learnable toy retrieval problem over a small attribute grammar.

    Per category, ``num_items`` images are grouped into families of two (a
    trailing odd image joins the last family). An image's feature vector is
    its family's identity vector plus one prototype per attribute value and
    a category prototype, so within a family the target of a query is the
    candidate plus the attribute offset its captions describe. Each image is
    the candidate of one query whose target is the next family member.

    Attribute prototypes depend only on ``grammar_seed``, so splits built
    with different ``seed`` values share the grammar.
    """
    if num_items < 4:
        raise ConfigurationError("a fixture needs at least 4 items per category")
    protos = _grammar_prototypes(feature_dim, grammar_seed)
    rng = np.random.default_rng([seed, 104729])
    ids: list[str] = []
    rows: list[np.ndarray] = []
    examples: list[RetrievalExample] = []
    corpus: list[dict[str, str]] = []
    names = [name for name, _ in ATTRIBUTES]

    for category in CATEGORIES:
        cat_proto = protos[("category", category_index(category))]
        sizes = [2] * (num_items // 2)
        sizes[-1] += num_items % 2
        item = 0
        for size in sizes:
            identity = identity_scale * rng.standard_normal(feature_dim) / np.sqrt(feature_dim)
            base = {name: int(rng.integers(len(vals))) for name, vals in ATTRIBUTES}
            members = [base]
            while len(members) < size:
                attrs = dict(members[-1])
                for name in rng.choice(names, size=2, replace=False):
                    choices = [v for v in range(len(dict(ATTRIBUTES)[name])) if v != attrs[name]]
                    attrs[name] = int(rng.choice(choices))
                members.append(attrs)
            family_ids = []
            for attrs in members:
                image_id = f"{prefix}{category}_{item:04d}"
                item += 1
                family_ids.append(image_id)
                feature = identity + cat_proto + sum(protos[(n, attrs[n])] for n in names)
                ids.append(image_id)
                rows.append(feature)
                corpus.append({"text": _corpus_text(category, attrs), "category": category})
            for k, (cand, attrs) in enumerate(zip(family_ids, members)):
                nxt = (k + 1) % size
                target_attrs = members[nxt]
                changed = [n for n in names if target_attrs[n] != attrs[n]]
                captions = _describe(target_attrs, changed, rng)
                if len(captions) < 2:
                    unchanged = [n for n in names if n not in changed]
                    captions += _describe(target_attrs, unchanged[: 2 - len(captions)], rng)
                examples.append(
                    RetrievalExample(cand, family_ids[nxt], tuple(captions), category)
                )

    split = DatasetSplit.from_examples(split_name, examples)
    return split, EmbeddingStore(ids, np.array(rows)), corpus
