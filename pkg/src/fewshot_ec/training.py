"""Episodic training: query loss, leave-out auxiliary loss, optimizers, loop.

The combined objective is ``query_loss + lambda * aux_loss`` where the
auxiliary term holds out a few support examples per class and classifies
them against the remaining support. The query loss averages over query
items; the auxiliary loss sums over all held-out items (the weighting of
lambda assumes that convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .episodes import (TRAIN_BATCH_CLASSES, partition_support, perturb_labels,
                       sample_episode, sample_training_batch)
from .errors import ConfigurationError, DataError, NumericalError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1           # trade-off weight on the auxiliary loss
    q_aux: int = 2             # held-out support examples per class
    episodes: int = 5000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 100
    eval_episodes: int = 200
    noise_rate: float = 0.0    # training-query label perturbation fraction
    batch_classes: int = TRAIN_BATCH_CLASSES

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigurationError(f"noise_rate must be in [0, 1]")
        if self.q_aux < 1:
            raise ConfigurationError("q_aux must be >= 1")


# ---------------------------------------------------------------------------
# losses


def _episode_forward(model, episode):
    """Encode support (class-blocked) and query examples in one batch."""
    support_flat = []
    for label in episode.label_universe:
        support_flat.extend(episode.support[label])
    queries = [ex for ex, _ in episode.query]
    targets = np.array([cls for _, cls in episode.query], dtype=np.intp)
    enc = model.encode_batch(support_flat + queries)
    ns = len(support_flat)
    support_enc = ag.take_rows(enc, list(range(ns)))
    query_enc = ag.take_rows(enc, list(range(ns, ns + len(queries))))
    return support_flat, support_enc, query_enc, targets


def _query_loss_from(model, episode, support_enc, query_enc, targets):
    scores = model.episode_scores(query_enc, support_enc,
                                  episode.n_way, episode.k_shot)
    return ag.mean_(ag.cross_entropy_rows(scores, targets))


def _check_partition(episode, partition):
    k = episode.k_shot
    for label in episode.label_universe:
        sup = partition.aux_support.get(label)
        aux = partition.aux_query.get(label)
        if sup is None or aux is None:
            raise DataError(f"partition is missing class {label!r}")
        ids = {id(e) for e in episode.support[label]}
        union = [id(e) for e in sup] + [id(e) for e in aux]
        if len(union) != k or set(union) != ids:
            raise DataError(f"partition does not cover the support of {label!r}")
    sizes = {len(v) for v in partition.aux_query.values()}
    if len(sizes) != 1:
        raise DataError("partition has uneven auxiliary query counts")
    return next(iter(sizes))


def _aux_loss_from(model, episode, partition, support_flat, support_enc):
    q_aux = _check_partition(episode, partition)
    k = episode.k_shot
    row_of = {id(ex): i for i, ex in enumerate(support_flat)}
    ss_idx, sq_idx, sq_targets = [], [], []
    for cls, label in enumerate(episode.label_universe):
        ss_idx.extend(row_of[id(ex)] for ex in partition.aux_support[label])
        for ex in partition.aux_query[label]:
            sq_idx.append(row_of[id(ex)])
            sq_targets.append(cls)
    ss_enc = ag.take_rows(support_enc, ss_idx)
    sq_enc = ag.take_rows(support_enc, sq_idx)
    scores = model.episode_scores(sq_enc, ss_enc, episode.n_way, k - q_aux)
    return ag.sum_(ag.cross_entropy_rows(scores, np.array(sq_targets, dtype=np.intp)))


def loss_query(model, episode):
    """Mean negative log-likelihood of the true class over the query set."""
    _, support_enc, query_enc, targets = _episode_forward(model, episode)
    return _query_loss_from(model, episode, support_enc, query_enc, targets)


def loss_aux(model, episode, partition):
    """Summed NLL of held-out support examples against the remaining support."""
    support_flat, support_enc, _, _ = _episode_forward(model, episode)
    return _aux_loss_from(model, episode, partition, support_flat, support_enc)


def loss_total(model, episode, config, rng):
    """Combined loss; samples a fresh support partition when lambda > 0."""
    total, _, _ = loss_parts(model, episode, config, rng)
    return total


def loss_parts(model, episode, config, rng):
    """(total, query, aux) losses; aux is None when lambda is zero."""
    support_flat, support_enc, query_enc, targets = _episode_forward(model, episode)
    lq = _query_loss_from(model, episode, support_enc, query_enc, targets)
    if config.lam == 0.0:
        return lq, lq, None
    partition = partition_support(episode, config.q_aux, rng)
    la = _aux_loss_from(model, episode, partition, support_flat, support_enc)
    return ag.add(lq, ag.scale(la, config.lam)), lq, la


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)  # first-moment accumulators by name
    v: dict = field(default_factory=dict)  # second-moment accumulators by name


def optimizer_step(params, grads, state, config):
    """Apply one SGD or Adam update in place on the parameter map.

    Parameters absent from the gradient map are left untouched.
    """
    lr = config.learning_rate
    state.step += 1
    t = state.step
    for name, p in list(params.items()):
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.data.shape}")
        if config.optimizer == "sgd":
            new = p.data - lr * g
        else:
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros(p.data.shape)
                v = np.zeros(p.data.shape)
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            state.m[name] = m
            state.v[name] = v
            mhat = m / (1.0 - ADAM_BETA1 ** t)
            vhat = v / (1.0 - ADAM_BETA2 ** t)
            new = p.data - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        params[name] = Tensor(new, requires_grad=True)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: object                 # FewShotModel holding the best parameters
    log: list                     # structured per-episode / eval records
    best_accuracy: float
    best_episode: int


def _episode_accuracy(model, episode):
    """Fraction of query items classified correctly (forward-only)."""
    _, support_enc, query_enc, targets = _episode_forward(model, episode)
    scores = model.episode_scores(query_enc, support_enc,
                                  episode.n_way, episode.k_shot)
    return float(np.mean(scores.data.argmax(axis=1) == targets))


def _dev_accuracy(model, corpus, spec, episodes, rng):
    accs = [
        _episode_accuracy(model, sample_episode(corpus, spec, rng))
        for _ in range(episodes)
    ]
    return float(np.mean(accs)) if accs else 0.0


def train(train_corpus, dev_corpus, model, spec, config):
    """Episodic training with periodic dev evaluation and best-model keeping.

    Fully deterministic in (corpora, initial parameters, spec, config.seed).
    """
    if config.lam > 0 and not config.q_aux < spec.k_shot:
        raise ConfigurationError(
            f"q_aux={config.q_aux} must be < k_shot={spec.k_shot}")
    ss = np.random.SeedSequence(config.seed)
    rng_episode, rng_partition, rng_noise, eval_seed = ss.spawn(4)
    rng_episode = np.random.default_rng(rng_episode)
    rng_partition = np.random.default_rng(rng_partition)
    rng_noise = np.random.default_rng(rng_noise)
    eval_children = iter(eval_seed.spawn(
        config.episodes // config.eval_every + 1 if config.eval_every else 0))

    log = []
    best_params = model.params.copy()
    best_acc = -1.0
    best_episode = 0
    opt_state = OptimizerState()
    for ep in range(1, config.episodes + 1):
        episode = sample_training_batch(train_corpus, spec, rng_episode,
                                        config.batch_classes)
        if config.noise_rate > 0:
            episode = perturb_labels(episode, config.noise_rate, rng_noise)
        with Tape() as tape:
            total, lq, la = loss_parts(model, episode, config, rng_partition)
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at episode {ep}")
            grads = tape.backward(total)
        optimizer_step(model.params, grads, opt_state, config)
        log.append({
            "episode": ep,
            "loss_query": lq.item(),
            "loss_aux": la.item() if la is not None else 0.0,
            "loss_total": total.item(),
        })
        if config.eval_every and ep % config.eval_every == 0:
            rng_eval = np.random.default_rng(next(eval_children))
            acc = _dev_accuracy(model, dev_corpus, spec,
                                config.eval_episodes, rng_eval)
            log.append({"episode": ep, "dev_accuracy": acc})
            if acc > best_acc:
                best_acc = acc
                best_params = model.params.copy()
                best_episode = ep
    if best_acc < 0:
        # never evaluated: keep the final parameters
        best_params = model.params.copy()
        best_acc = 0.0
        best_episode = config.episodes
    best_model = type(model)(model.vocab, model.encoder, model.head, best_params)
    return TrainResult(model=best_model, log=log,
                       best_accuracy=best_acc, best_episode=best_episode)
