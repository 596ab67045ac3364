"""Event-mention data model, corpus IO, vocabulary and embedding loading.

Corpus files are UTF-8 JSONL with one event mention per line:
``{"tokens": [...], "trigger": int, "label": str}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from collections import Counter

import numpy as np

from .autograd import Tensor
from .errors import ConfigurationError, DataError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

OOV_INIT_RANGE = 0.25  # uniform init half-width for rows missing from the file


@dataclass(frozen=True)
class EventExample:
    """One event mention: a tokenized sentence, its trigger index, a label."""

    tokens: tuple
    trigger: int
    label: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise DataError("example has no tokens")
        if not self.label:
            raise DataError("example has an empty label")
        if not 0 <= self.trigger < len(self.tokens):
            raise DataError(
                f"trigger index {self.trigger} out of range for {len(self.tokens)} tokens")

    @property
    def trigger_word(self):
        return self.tokens[self.trigger]

    def to_record(self):
        return {"tokens": list(self.tokens), "trigger": self.trigger, "label": self.label}


@dataclass(frozen=True)
class LabeledCorpus:
    examples: tuple
    labels: frozenset = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        present = frozenset(ex.label for ex in self.examples)
        if self.labels is not None and frozenset(self.labels) != present:
            raise DataError("label set does not match labels present in examples")
        object.__setattr__(self, "labels", present)

    def __len__(self):
        return len(self.examples)

    def by_label(self):
        groups = {}
        for ex in self.examples:
            groups.setdefault(ex.label, []).append(ex)
        return groups

    def label_counts(self):
        return Counter(ex.label for ex in self.examples)


class Vocabulary:
    """Word -> index map; index 0 is padding, index 1 the unknown token."""

    def __init__(self, words):
        self._index = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        for w in words:
            if w not in self._index:
                self._index[w] = len(self._index)
        self._words = sorted(self._index, key=self._index.get)

    def __len__(self):
        return len(self._index)

    def __contains__(self, word):
        return word in self._index

    def index(self, word):
        return self._index.get(word, UNK_INDEX)

    def word(self, idx):
        return self._words[idx]

    @property
    def words(self):
        return list(self._words)


def build_vocabulary(corpus):
    """Vocabulary over all distinct tokens, sorted for determinism."""
    seen = set()
    for ex in corpus.examples:
        seen.update(ex.tokens)
    return Vocabulary(sorted(seen))


@dataclass(frozen=True)
class EmbeddingTable:
    """Trainable word and trigger-relative position embeddings."""

    matrix: Tensor
    position_matrix: Tensor
    max_pos_dist: int

    def position_index(self, offset):
        d = self.max_pos_dist
        return max(-d, min(d, offset)) + d


def load_jsonl(path):
    """Read a JSONL corpus, validating each record; errors carry line numbers."""
    examples = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON: {e}") from e
            if not isinstance(record, dict) or not {"tokens", "trigger", "label"} <= set(record):
                raise DataError(f"{path}:{lineno}: expected tokens/trigger/label fields")
            try:
                examples.append(EventExample(
                    tokens=record["tokens"],
                    trigger=int(record["trigger"]),
                    label=str(record["label"]),
                ))
            except (DataError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
    return LabeledCorpus(examples)


def save_jsonl(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def filter_rare_labels(corpus, min_count=15):
    """Drop every label with fewer than min_count examples."""
    if min_count < 1:
        raise ConfigurationError(f"min_count must be >= 1, got {min_count}")
    counts = corpus.label_counts()
    kept = [ex for ex in corpus.examples if counts[ex.label] >= min_count]
    return LabeledCorpus(kept)


def split_labels(corpus, train_labels, dev_labels, test_labels):
    """Route examples into disjoint train/dev/test corpora by label."""
    sets = [frozenset(train_labels), frozenset(dev_labels), frozenset(test_labels)]
    for i in range(3):
        for j in range(i + 1, 3):
            overlap = sets[i] & sets[j]
            if overlap:
                raise ConfigurationError(
                    f"label sets overlap: {sorted(overlap)}")
    unknown = (sets[0] | sets[1] | sets[2]) - corpus.labels
    if unknown:
        raise ConfigurationError(
            f"label sets reference labels absent from the corpus: {sorted(unknown)}")
    splits = [[], [], []]
    for ex in corpus.examples:
        for i, labels in enumerate(sets):
            if ex.label in labels:
                splits[i].append(ex)
                break
    return tuple(LabeledCorpus(s) for s in splits)


def load_embeddings(path, vocab, dim=300, max_pos_dist=50, pos_dim=50, rng=None):
    """Fill word-embedding rows from a text file of ``word f1 ... f_dim`` lines.

    Missing words (and the unknown token) are initialized uniformly in
    [-0.25, 0.25] from the given RNG; the padding row stays zero. Lookup is
    case-sensitive first, lowercase as a fallback.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    file_vecs = {}
    wanted = set(vocab.words)
    wanted_lower = {w.lower() for w in wanted}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            word, values = parts[0], parts[1:]
            if word not in wanted and word not in wanted_lower:
                continue
            if len(values) != dim:
                raise DataError(
                    f"{path}:{lineno}: expected {dim} floats, found {len(values)}")
            try:
                file_vecs[word] = np.array([float(v) for v in values])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: non-numeric value: {e}") from e
    matrix = np.zeros((len(vocab), dim))
    for idx, word in enumerate(vocab.words):
        if idx == PAD_INDEX:
            continue
        vec = file_vecs.get(word)
        if vec is None:
            vec = file_vecs.get(word.lower())
        if vec is None:
            vec = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE, size=dim)
        matrix[idx] = vec
    position = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE,
                           size=(2 * max_pos_dist + 1, pos_dim))
    return EmbeddingTable(
        matrix=Tensor(matrix, requires_grad=True),
        position_matrix=Tensor(position, requires_grad=True),
        max_pos_dist=max_pos_dist,
    )


def random_embeddings(vocab, dim=300, max_pos_dist=50, pos_dim=50, rng=None):
    """Embedding table with every non-padding row randomly initialized."""
    if rng is None:
        rng = np.random.default_rng(0)
    matrix = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE, size=(len(vocab), dim))
    matrix[PAD_INDEX] = 0.0
    position = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE,
                           size=(2 * max_pos_dist + 1, pos_dim))
    return EmbeddingTable(
        matrix=Tensor(matrix, requires_grad=True),
        position_matrix=Tensor(position, requires_grad=True),
        max_pos_dist=max_pos_dist,
    )


def generate_synthetic(num_labels, examples_per_label, vocab_size,
                       sentence_len_range=(6, 12), signal_strength=1.0, seed=0,
                       signatures_per_label=1, filler_pool=50):
    """Deterministic synthetic corpus with label-specific trigger words.

    Each label owns a small set of signature tokens; with probability
    ``signal_strength`` the trigger token of an example is drawn from its
    label's signatures, otherwise it is a uniformly random vocabulary token.
    Non-trigger positions are drawn from a shared pool of filler tokens, so
    context carries no label information.
    """
    if num_labels < 1 or examples_per_label < 1 or vocab_size < 1:
        raise ConfigurationError("counts must be positive")
    if not 0.0 <= signal_strength <= 1.0:
        raise ConfigurationError(
            f"signal_strength must be in [0, 1], got {signal_strength}")
    lo, hi = sentence_len_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"bad sentence length range {sentence_len_range}")
    if signatures_per_label < 1 or filler_pool < 1:
        raise ConfigurationError("signatures_per_label and filler_pool must be >= 1")
    n_signature = num_labels * signatures_per_label
    if vocab_size < n_signature + 1:
        raise ConfigurationError(
            f"vocab_size {vocab_size} too small for {num_labels} labels "
            f"x {signatures_per_label} signature words")
    rng = np.random.default_rng(seed)
    tokens = [f"tok{i:04d}" for i in range(vocab_size)]
    signatures = {
        f"label{i:02d}": tokens[i * signatures_per_label:(i + 1) * signatures_per_label]
        for i in range(num_labels)
    }
    fillers = tokens[n_signature:n_signature + filler_pool]
    examples = []
    for label, sigs in signatures.items():
        for _ in range(examples_per_label):
            length = int(rng.integers(lo, hi + 1))
            sent = [fillers[i] for i in rng.integers(0, len(fillers), size=length)]
            trigger = int(rng.integers(0, length))
            if rng.random() < signal_strength:
                sent[trigger] = sigs[int(rng.integers(0, len(sigs)))]
            else:
                sent[trigger] = tokens[int(rng.integers(0, vocab_size))]
            examples.append(EventExample(tokens=sent, trigger=trigger, label=label))
    return LabeledCorpus(examples)
