"""Restaurant-review corpus handling.

Covers XML ingestion for both SemEval restaurant schemas, overlap-annotation
sidecars, deterministic train/validation splitting, vocabulary and embedding
loading, a synthetic template corpus for desk-scale experiments, and padded
batch construction.
"""

from __future__ import annotations

import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

POLARITIES = ("positive", "neutral", "negative", "conflict")
THREE_WAY_CLASSES = ("positive", "neutral", "negative")
BINARY_CLASSES = ("positive", "negative")

SINGLE = "single"
OVERLAPPING = "overlapping"
NON_OVERLAPPING = "non-overlapping"

_EMBED_FILL_TAG = 404
_SHUFFLE_TAG = 303


class CorpusError(ValueError):
    """Unreadable or malformed corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation, keeping punctuation tokens."""
    return re.findall(r"\w+|[^\w\s]", text.lower())


@dataclass
class Sentence:
    id: str
    tokens: list[str]
    raw_text: str


@dataclass
class AspectMention:
    category: str
    polarity: str


@dataclass
class Instance:
    """One sentence with its K distinct-category aspect mentions.

    ``overlap`` is ``single`` exactly when K == 1, otherwise one of
    ``overlapping`` / ``non-overlapping``.
    """

    sentence: Sentence
    mentions: list[AspectMention]
    overlap: str

    def __post_init__(self):
        k = len(self.mentions)
        if k == 0:
            raise CorpusError(f"instance {self.sentence.id}: no mentions")
        if k == 1 and self.overlap != SINGLE:
            raise CorpusError(f"instance {self.sentence.id}: K=1 must be '{SINGLE}'")
        if k >= 2 and self.overlap not in (OVERLAPPING, NON_OVERLAPPING):
            raise CorpusError(f"instance {self.sentence.id}: K>=2 needs an overlap flag")


class Vocabulary:
    """Word-to-index map; index 0 is reserved for unknown/padding."""

    def __init__(self, words: Sequence[str] = ()):
        self._index: dict[str, int] = {}
        for w in words:
            if w not in self._index:
                self._index[w] = len(self._index) + 1

    def index_of(self, word: str) -> int:
        return self._index.get(word, 0)

    def __len__(self) -> int:
        return len(self._index) + 1

    def __contains__(self, word: str) -> bool:
        return word in self._index

    @property
    def words(self) -> list[str]:
        """Indexed words in index order (index 1 first)."""
        return list(self._index)

    def to_lines(self) -> list[str]:
        return self.words

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Vocabulary":
        return cls([ln.rstrip("\n") for ln in lines if ln.strip()])


# ---------------------------------------------------------------------------
# XML parsers


def _collapse_mentions(raw: list[tuple[str, str]], sid: str) -> list[AspectMention]:
    """Apply the retention rules to raw (category, polarity) pairs.

    Unknown polarity strings are fatal; conflict mentions are dropped;
    duplicate categories collapse to the majority polarity, ties drop
    the category entirely.
    """
    by_cat: dict[str, list[str]] = {}
    for cat, pol in raw:
        if pol not in POLARITIES:
            raise CorpusError(f"sentence {sid}: unknown polarity '{pol}'")
        if pol == "conflict":
            continue
        by_cat.setdefault(cat, []).append(pol)

    mentions = []
    for cat, pols in by_cat.items():
        counts = {p: pols.count(p) for p in set(pols)}
        best = max(counts.values())
        winners = [p for p, n in counts.items() if n == best]
        if len(winners) == 1:
            mentions.append(AspectMention(cat, winners[0]))
    return mentions


def _make_instance(sid: str, text: str, raw_mentions: list[tuple[str, str]]) -> Instance | None:
    mentions = _collapse_mentions(raw_mentions, sid)
    if not mentions:
        return None
    tokens = tokenize(text)
    if not tokens:
        return None
    overlap = SINGLE if len(mentions) == 1 else NON_OVERLAPPING
    return Instance(Sentence(sid, tokens, text), mentions, overlap)


def parse_semeval14(path) -> list[Instance]:
    """Read the 2014 restaurant schema (aspectCategories elements)."""
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise CorpusError(f"cannot parse {path}: {exc}") from exc

    instances = []
    for sent in root.iter("sentence"):
        sid = sent.get("id", "")
        text = sent.findtext("text") or ""
        raw = [(ac.get("category", ""), ac.get("polarity", ""))
               for acs in sent.findall("aspectCategories")
               for ac in acs.findall("aspectCategory")]
        inst = _make_instance(sid, text, raw)
        if inst is not None:
            instances.append(inst)
    return instances


def parse_semeval15(path) -> list[Instance]:
    """Read the 2015 restaurant schema (Opinions with ENTITY#ATTRIBUTE categories)."""
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise CorpusError(f"cannot parse {path}: {exc}") from exc

    instances = []
    for sent in root.iter("sentence"):
        sid = sent.get("id", "")
        text = sent.findtext("text") or ""
        raw = [(op.get("category", ""), op.get("polarity", ""))
               for ops in sent.findall("Opinions")
               for op in ops.findall("Opinion")]
        inst = _make_instance(sid, text, raw)
        if inst is not None:
            instances.append(inst)
    return instances


def merge_overlap_annotations(instances: list[Instance], path) -> list[Instance]:
    """Attach OL/NOL flags from a sidecar of ``id<TAB>OL|NOL`` lines.

    Multi-aspect instances missing from the sidecar stay non-overlapping
    with a warning; sidecar ids not in the corpus warn and are skipped.
    """
    flags = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or parts[1] not in ("OL", "NOL"):
                    raise CorpusError(f"{path}:{lineno}: expected 'id<TAB>OL|NOL'")
                flags[parts[0]] = OVERLAPPING if parts[1] == "OL" else NON_OVERLAPPING
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc

    known = {inst.sentence.id for inst in instances}
    for sid in flags:
        if sid not in known:
            log.warning("overlap annotation for unknown sentence id %s", sid)

    out = []
    for inst in instances:
        if len(inst.mentions) >= 2:
            flag = flags.get(inst.sentence.id)
            if flag is None:
                log.warning("multi-aspect sentence %s unannotated; assuming %s",
                            inst.sentence.id, NON_OVERLAPPING)
                flag = NON_OVERLAPPING
            out.append(Instance(inst.sentence, inst.mentions, flag))
        else:
            out.append(inst)
    return out


# ---------------------------------------------------------------------------
# splitting, vocabulary, embeddings


def split_train_val(instances: list[Instance], seed: int,
                    ratio: tuple[int, int] = (5, 1)) -> tuple[list[Instance], list[Instance]]:
    """Deterministic shuffled split at sentence granularity (default 5:1)."""
    if not instances:
        raise CorpusError("split_train_val: empty input")
    n = len(instances)
    n_val = n * ratio[1] // sum(ratio)
    rng = np.random.default_rng([seed, 505])
    perm = rng.permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [inst for i, inst in enumerate(instances) if i not in val_idx]
    val = [inst for i, inst in enumerate(instances) if i in val_idx]
    return train, val


def build_vocab(instances: list[Instance]) -> Vocabulary:
    if not instances:
        raise CorpusError("build_vocab: empty training set")
    vocab = Vocabulary()
    for inst in instances:
        for tok in inst.sentence.tokens:
            if tok not in vocab._index:
                vocab._index[tok] = len(vocab._index) + 1
    return vocab


def category_inventory(instances: list[Instance]) -> list[str]:
    """Sorted distinct category labels across all mentions."""
    return sorted({m.category for inst in instances for m in inst.mentions})


def load_embeddings(path, vocab: Vocabulary, d: int,
                    seed: int = 0) -> tuple[np.ndarray, float]:
    """Fill a |V| x d table from a ``word v1 .. v_d`` text file.

    Words absent from the file (including index 0) are drawn from
    U(-0.01, 0.01). Returns (table, coverage fraction).
    """
    rng = np.random.default_rng([seed, _EMBED_FILL_TAG])
    table = rng.uniform(-0.01, 0.01, size=(len(vocab), d))
    found = 0
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                word, values = parts[0], parts[1:]
                if len(values) != d:
                    raise CorpusError(
                        f"{path}:{lineno}: expected {d} values, found {len(values)}")
                idx = vocab.index_of(word)
                if idx > 0:
                    table[idx] = [float(v) for v in values]
                    found += 1
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc

    coverage = found / max(1, len(vocab) - 1)
    return table, coverage


# ---------------------------------------------------------------------------
# synthetic corpus

_SYNTH_CATEGORIES = ("food", "service", "ambience", "drinks", "price",
                     "location", "menu", "staff", "music", "parking")
_POSITIVE_WORDS = ("good", "great", "tasty", "lovely", "superb")
_NEGATIVE_WORDS = ("bad", "awful", "bland", "slow", "poor")


def make_synthetic_corpus(n_sentences: int, n_categories: int, vocab_size: int,
                          seed: int) -> tuple[list[Instance], list[str]]:
    """Template sentences with planted opinion words deciding polarity.

    Even-indexed sentences carry one aspect, odd-indexed two distinct
    aspects joined by "and" (non-overlapping by construction). Extra
    filler tokens pad the vocabulary toward ``vocab_size``.
    """
    if n_categories < 2:
        raise CorpusError("make_synthetic_corpus: need at least 2 categories")
    if n_categories > len(_SYNTH_CATEGORIES):
        raise CorpusError(f"make_synthetic_corpus: at most {len(_SYNTH_CATEGORIES)} categories")
    cats = list(_SYNTH_CATEGORIES[:n_categories])
    base_vocab = n_categories + len(_POSITIVE_WORDS) + len(_NEGATIVE_WORDS) + 3
    fillers = [f"filler{j}" for j in range(max(0, vocab_size - base_vocab))]

    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n_sentences):
        prefix = [str(rng.choice(fillers))] if fillers and rng.random() < 0.5 else []

        def clause():
            cat = str(rng.choice(cats))
            pol = "positive" if rng.random() < 0.5 else "negative"
            pool = _POSITIVE_WORDS if pol == "positive" else _NEGATIVE_WORDS
            return cat, pol, str(rng.choice(pool))

        cat_a, pol_a, op_a = clause()
        if i % 2 == 0:
            words = prefix + ["the", cat_a, "was", op_a]
            mentions = [AspectMention(cat_a, pol_a)]
            overlap = SINGLE
        else:
            cat_b, pol_b, op_b = clause()
            while cat_b == cat_a:
                cat_b, pol_b, op_b = clause()
            words = prefix + ["the", cat_a, "was", op_a, "and",
                              "the", cat_b, "was", op_b]
            mentions = [AspectMention(cat_a, pol_a), AspectMention(cat_b, pol_b)]
            overlap = NON_OVERLAPPING

        text = " ".join(words)
        instances.append(Instance(
            Sentence(f"syn-{seed}-{i:04d}", tokenize(text), text), mentions, overlap))
    return instances, sorted(cats)


# ---------------------------------------------------------------------------
# canonical instance dumps


def dump_instances(instances: list[Instance]) -> str:
    """Line-delimited canonical snapshot; inverse of load_instances."""
    lines = []
    for inst in instances:
        lines.append(json.dumps({
            "id": inst.sentence.id,
            "tokens": inst.sentence.tokens,
            "raw_text": inst.sentence.raw_text,
            "mentions": [[m.category, m.polarity] for m in inst.mentions],
            "overlap": inst.overlap,
        }, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")


def load_instances(text: str) -> list[Instance]:
    instances = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            instances.append(Instance(
                Sentence(rec["id"], list(rec["tokens"]), rec["raw_text"]),
                [AspectMention(c, p) for c, p in rec["mentions"]],
                rec["overlap"]))
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"instance dump line {lineno}: {exc}") from exc
    return instances


# ---------------------------------------------------------------------------
# encoding and batching


@dataclass
class EncodedInstance:
    """An Instance mapped through a vocabulary and category inventory.

    ``acd_labels`` marks every category mentioned in the original sentence,
    computed before any evaluation-mode mention filtering.
    """

    id: str
    tokens: list[str]
    token_ids: np.ndarray
    mention_cats: list[int]
    mention_pols: list[int]
    acd_labels: np.ndarray
    overlap: str

    @property
    def length(self) -> int:
        return len(self.tokens)


def polarity_classes(mode: str) -> tuple[str, ...]:
    if mode == "3way":
        return THREE_WAY_CLASSES
    if mode == "binary":
        return BINARY_CLASSES
    raise CorpusError(f"unknown evaluation mode '{mode}'")


def encode_instances(instances: list[Instance], vocab: Vocabulary,
                     categories: Sequence[str], mode: str = "3way") -> list[EncodedInstance]:
    """Index tokens, categories, and polarities for the network.

    Binary mode drops neutral mentions (and instances left empty), but
    the multi-label category targets keep every original mention.
    """
    classes = polarity_classes(mode)
    cat_index = {c: i for i, c in enumerate(categories)}
    out = []
    for inst in instances:
        labels = np.zeros(len(categories))
        for m in inst.mentions:
            if m.category not in cat_index:
                raise CorpusError(
                    f"instance {inst.sentence.id}: category '{m.category}' "
                    f"not in the model's inventory")
            labels[cat_index[m.category]] = 1.0

        kept = [m for m in inst.mentions if m.polarity in classes]
        if not kept:
            continue
        out.append(EncodedInstance(
            id=inst.sentence.id,
            tokens=list(inst.sentence.tokens),
            token_ids=np.array([vocab.index_of(t) for t in inst.sentence.tokens],
                               dtype=np.intp),
            mention_cats=[cat_index[m.category] for m in kept],
            mention_pols=[classes.index(m.polarity) for m in kept],
            acd_labels=labels,
            overlap=inst.overlap))
    return out


@dataclass
class Batch:
    """Instances padded to a common length with an attention mask."""

    instances: list[EncodedInstance]
    token_matrix: np.ndarray = field(init=False)
    mask: np.ndarray = field(init=False)

    def __post_init__(self):
        max_len = max(inst.length for inst in self.instances)
        b = len(self.instances)
        self.token_matrix = np.zeros((b, max_len), dtype=np.intp)
        self.mask = np.zeros((b, max_len), dtype=bool)
        for i, inst in enumerate(self.instances):
            self.token_matrix[i, :inst.length] = inst.token_ids
            self.mask[i, :inst.length] = True

    def __len__(self) -> int:
        return len(self.instances)


def make_batches(encoded: list[EncodedInstance], batch_size: int, seed: int,
                 epoch: int = 0) -> list[Batch]:
    """Shuffle deterministically by (seed, epoch) and pad into batches."""
    if batch_size < 1:
        raise CorpusError(f"batch_size must be >= 1, got {batch_size}")
    if not encoded:
        return []
    rng = np.random.default_rng([seed, _SHUFFLE_TAG, epoch])
    order = rng.permutation(len(encoded))
    shuffled = [encoded[i] for i in order]
    return [Batch(shuffled[i:i + batch_size])
            for i in range(0, len(shuffled), batch_size)]
