"""Episode sampling, leave-out support partitioning, and label noise.

All samplers are pure functions of their inputs plus an explicit
numpy Generator; nothing here touches global randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, SamplingError

TRAIN_BATCH_CLASSES = 20  # classes per training batch, regardless of eval n_way


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_query: int
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigurationError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1 or self.q_query < 1:
            raise ConfigurationError("k_shot and q_query must be >= 1")


@dataclass(frozen=True)
class Episode:
    """One support/query draw; class indices are positions in label_universe."""

    label_universe: tuple
    support: dict  # label -> list of EventExample, k_shot entries each
    query: tuple   # of (EventExample, class_index)

    def __post_init__(self):
        object.__setattr__(self, "label_universe", tuple(self.label_universe))
        object.__setattr__(self, "query", tuple(self.query))

    @property
    def n_way(self):
        return len(self.label_universe)

    @property
    def k_shot(self):
        return len(next(iter(self.support.values())))

    def class_index(self, label):
        return self.label_universe.index(label)


@dataclass(frozen=True)
class SupportPartition:
    """Per-class split of the support set into held-out and remaining parts."""

    aux_support: dict  # label -> k_shot - q_aux examples
    aux_query: dict    # label -> q_aux examples


def _draw_examples(corpus_groups, label, count, rng):
    pool = corpus_groups.get(label, [])
    if len(pool) < count:
        raise SamplingError(
            f"label {label!r} has {len(pool)} examples, needs {count}")
    picked = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in picked]


def sample_episode(corpus, spec, rng, n_way=None):
    """Draw an N-way episode: disjoint support and query sets per class."""
    n = spec.n_way if n_way is None else n_way
    labels = sorted(corpus.labels)
    if len(labels) < n:
        raise SamplingError(
            f"corpus has {len(labels)} labels, episode needs {n}")
    groups = corpus.by_label()
    chosen = rng.choice(len(labels), size=n, replace=False)
    universe = tuple(labels[i] for i in chosen)
    support, query = {}, []
    for cls, label in enumerate(universe):
        drawn = _draw_examples(groups, label, spec.k_shot + spec.q_query, rng)
        support[label] = drawn[:spec.k_shot]
        query.extend((ex, cls) for ex in drawn[spec.k_shot:])
    return Episode(label_universe=universe, support=support, query=query)


def sample_training_batch(corpus, spec, rng, batch_classes=TRAIN_BATCH_CLASSES):
    """Training episode over a wider class draw than the evaluation n_way."""
    labels = sorted(corpus.labels)
    if len(labels) < batch_classes:
        raise SamplingError(
            f"training corpus has {len(labels)} labels, batch needs {batch_classes}")
    return sample_episode(corpus, spec, rng, n_way=batch_classes)


def partition_support(episode, q_aux, rng):
    """Hold out q_aux support examples per class as auxiliary queries."""
    k = episode.k_shot
    if not 1 <= q_aux < k:
        raise ConfigurationError(
            f"auxiliary query count must satisfy 1 <= q_aux < k_shot, "
            f"got q_aux={q_aux}, k_shot={k}")
    aux_support, aux_query = {}, {}
    for label in episode.label_universe:
        pool = episode.support[label]
        held = set(rng.choice(k, size=q_aux, replace=False).tolist())
        aux_query[label] = [pool[i] for i in sorted(held)]
        aux_support[label] = [pool[i] for i in range(k) if i not in held]
    return SupportPartition(aux_support=aux_support, aux_query=aux_query)


def perturb_labels(episode, noise_rate, rng):
    """Flip exactly floor(rate * |query|) query labels to a different class."""
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigurationError(f"noise rate must be in [0, 1], got {noise_rate}")
    n = episode.n_way
    query = list(episode.query)
    count = int(noise_rate * len(query))
    if count == 0:
        return episode
    picked = rng.choice(len(query), size=count, replace=False)
    for i in picked:
        ex, cls = query[i]
        r = int(rng.integers(0, n - 1))
        new_cls = r if r < cls else r + 1
        query[i] = (ex, new_cls)
    return Episode(label_universe=episode.label_universe,
                   support=episode.support, query=query)
