"""Trigger-aware instance encoders, prototypes, distances, and the classifier.

The encoder maps (sentence, trigger index) to a fixed-size vector: each token
is the concatenation of its word embedding and a trigger-relative position
embedding, run through either a CNN with max-over-time pooling or a small
Transformer whose trigger-position hidden vector is taken as the output.

Class prototypes are either plain per-class means or query-conditioned
attention-weighted sums; the classifier is a softmax over negated distances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, DataError

CHECKPOINT_FORMAT_VERSION = 1

ENCODER_KINDS = ("cnn", "transformer")
DISTANCE_KINDS = ("cosine", "euclidean", "relation")
PROTOTYPE_KINDS = ("mean", "attention")

HEAD_PRESETS = {
    "matching": ("cosine", "mean"),
    "proto": ("euclidean", "mean"),
    "proto-att": ("euclidean", "attention"),
    "relation": ("relation", "mean"),
}


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "cnn"
    word_dim: int = 300
    pos_dim: int = 50
    cnn_window: int = 3
    cnn_filters: int = 250
    tf_layers: int = 2
    tf_dim: int = 512
    # 512 is not divisible by the published 10 heads; 8 keeps the
    # per-head dimension integral
    tf_heads: int = 8
    max_pos_dist: int = 50

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}")
        if self.cnn_window < 1 or self.cnn_window % 2 == 0:
            raise ConfigurationError(
                f"cnn_window must be odd for symmetric context, got {self.cnn_window}")
        if self.tf_dim % self.tf_heads != 0:
            raise ConfigurationError(
                f"tf_dim {self.tf_dim} not divisible by tf_heads {self.tf_heads}")

    @property
    def input_dim(self):
        return self.word_dim + self.pos_dim

    @property
    def output_dim(self):
        return self.cnn_filters if self.kind == "cnn" else self.tf_dim


@dataclass(frozen=True)
class HeadConfig:
    distance: str = "euclidean"
    prototype: str = "mean"
    relation_hidden: int = 64
    attention_squash: str = "tanh"  # "identity" switches Eq-style score to plain sum

    def __post_init__(self):
        if self.distance not in DISTANCE_KINDS:
            raise ConfigurationError(f"unknown distance {self.distance!r}")
        if self.prototype not in PROTOTYPE_KINDS:
            raise ConfigurationError(f"unknown prototype mode {self.prototype!r}")
        if self.attention_squash not in ("tanh", "identity"):
            raise ConfigurationError(
                f"unknown attention squash {self.attention_squash!r}")

    @classmethod
    def from_name(cls, name, **kwargs):
        if name not in HEAD_PRESETS:
            raise ConfigurationError(
                f"unknown head {name!r}; expected one of {sorted(HEAD_PRESETS)}")
        distance, prototype = HEAD_PRESETS[name]
        return cls(distance=distance, prototype=prototype, **kwargs)


class ModelParams:
    """Named map of all trainable tensors."""

    def __init__(self, tensors):
        self._tensors = {}
        for name, t in tensors.items():
            if name in self._tensors:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            self._tensors[name] = t

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, tensor):
        self._tensors[name] = tensor

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def copy(self):
        return ModelParams(dict(self._tensors))


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(encoder, head, embeddings, rng):
    """Fresh trainable parameters for the given encoder and head configs."""
    d_in = encoder.input_dim
    tensors = {
        "word_emb": embeddings.matrix,
        "pos_emb": embeddings.position_matrix,
    }
    if embeddings.matrix.shape[1] != encoder.word_dim:
        raise ConfigurationError(
            f"embedding dim {embeddings.matrix.shape[1]} != word_dim {encoder.word_dim}")
    if encoder.kind == "cnn":
        tensors["conv_w"] = Tensor(
            _xavier(rng, encoder.cnn_window * d_in, encoder.cnn_filters),
            requires_grad=True)
        tensors["conv_b"] = Tensor(np.zeros(encoder.cnn_filters), requires_grad=True)
    else:
        d = encoder.tf_dim
        tensors["proj_w"] = Tensor(_xavier(rng, d_in, d), requires_grad=True)
        tensors["proj_b"] = Tensor(np.zeros(d), requires_grad=True)
        for i in range(encoder.tf_layers):
            for w in ("wq", "wk", "wv", "wo"):
                tensors[f"layer{i}_{w}"] = Tensor(_xavier(rng, d, d), requires_grad=True)
            tensors[f"layer{i}_ffn_w1"] = Tensor(_xavier(rng, d, d), requires_grad=True)
            tensors[f"layer{i}_ffn_b1"] = Tensor(np.zeros(d), requires_grad=True)
            tensors[f"layer{i}_ffn_w2"] = Tensor(_xavier(rng, d, d), requires_grad=True)
            tensors[f"layer{i}_ffn_b2"] = Tensor(np.zeros(d), requires_grad=True)
            for ln in ("ln1", "ln2"):
                tensors[f"layer{i}_{ln}_gain"] = Tensor(np.ones(d), requires_grad=True)
                tensors[f"layer{i}_{ln}_bias"] = Tensor(np.zeros(d), requires_grad=True)
    if head.distance == "relation":
        d_enc = encoder.output_dim
        tensors["rel_w1"] = Tensor(_xavier(rng, 2 * d_enc, head.relation_hidden),
                                   requires_grad=True)
        tensors["rel_b1"] = Tensor(np.zeros(head.relation_hidden), requires_grad=True)
        tensors["rel_w2"] = Tensor(_xavier(rng, head.relation_hidden, 1),
                                   requires_grad=True)
        tensors["rel_b2"] = Tensor(np.zeros(1), requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# prototypes, distances, classifier (free functions over encodings)


def prototypes_mean(support_encodings):
    """Per-class mean of support encodings: {class -> Tensor[d]}."""
    protos = {}
    for cls, vecs in support_encodings.items():
        if not vecs:
            raise DataError(f"class {cls!r} has no support encodings")
        stacked = ag.concat([ag.reshape(v, (1, v.size)) for v in vecs], axis=0)
        protos[cls] = ag.reshape(ag.mean_(stacked, axis=0), (vecs[0].size,))
    return protos


def prototypes_attention(support_encodings, query_encoding, squash="tanh"):
    """Query-conditioned attention-weighted prototypes: {class -> Tensor[d]}."""
    d = query_encoding.size
    q = ag.reshape(query_encoding, (1, d))
    protos = {}
    for cls, vecs in support_encodings.items():
        if not vecs:
            raise DataError(f"class {cls!r} has no support encodings")
        stacked = ag.concat([ag.reshape(v, (1, d)) for v in vecs], axis=0)
        scores = ag.elementwise_match_scores(q, stacked, squash)  # 1 x K
        weights = ag.softmax(scores, axis=-1)
        protos[cls] = ag.reshape(ag.matmul(weights, stacked), (d,))
    return protos


def distance(a, b, kind, params=None):
    """Scalar distance between two encodings under the given head kind."""
    if kind == "euclidean":
        return ag.squared_euclidean(a, b)
    if kind == "cosine":
        return ag.sub(Tensor(1.0), ag.cosine_similarity(a, b))
    if kind == "relation":
        if params is None:
            raise ConfigurationError("relation distance requires relation parameters")
        pair = ag.reshape(ag.concat([a, b], axis=0), (1, a.size + b.size))
        hidden = ag.relu(ag.add(ag.matmul(pair, params["rel_w1"]), params["rel_b1"]))
        score = ag.add(ag.matmul(hidden, params["rel_w2"]), params["rel_b2"])
        r = ag.sigmoid(ag.reshape(score, ()))
        return ag.sub(Tensor(1.0), r)
    raise ConfigurationError(f"unknown distance kind {kind!r}")


def classify(query_encoding, prototypes, head, params=None):
    """Probability vector over classes: softmax over negated distances."""
    if len(prototypes) < 2:
        raise ConfigurationError("classification needs at least 2 prototypes")
    dists = [distance(query_encoding, c, head.distance, params) for c in prototypes]
    return ag.softmax(ag.scale(ag.stack_scalars(dists), -1.0))


# ---------------------------------------------------------------------------
# the full model


class FewShotModel:
    """Encoder + head + parameters bound to a vocabulary."""

    def __init__(self, vocab, encoder, head, params):
        self.vocab = vocab
        self.encoder = encoder
        self.head = head
        self.params = params

    @property
    def d_enc(self):
        return self.encoder.output_dim

    # -- encoding -----------------------------------------------------------

    def _token_indices(self, example):
        word_idx = [self.vocab.index(t) for t in example.tokens]
        m = self.encoder.max_pos_dist
        pos_idx = [max(-m, min(m, i - example.trigger)) + m
                   for i in range(len(example.tokens))]
        return word_idx, pos_idx

    def _stacked_token_rows(self, examples):
        word_idx, pos_idx, bounds, triggers = [], [], [], []
        start = 0
        for ex in examples:
            w, p = self._token_indices(ex)
            word_idx.extend(w)
            pos_idx.extend(p)
            bounds.append((start, start + len(w)))
            triggers.append(start + ex.trigger)
            start += len(w)
        rows = ag.concat([
            ag.take_rows(self.params["word_emb"], word_idx),
            ag.take_rows(self.params["pos_emb"], pos_idx),
        ], axis=1)
        return rows, bounds, triggers

    def _transformer_stack(self, rows):
        p = self.params
        x = ag.add(ag.matmul(rows, p["proj_w"]), p["proj_b"])
        for i in range(self.encoder.tf_layers):
            attn = ag.multi_head_self_attention(
                x, p[f"layer{i}_wq"], p[f"layer{i}_wk"],
                p[f"layer{i}_wv"], p[f"layer{i}_wo"], self.encoder.tf_heads)
            x = ag.layer_norm(ag.add(x, attn),
                              p[f"layer{i}_ln1_gain"], p[f"layer{i}_ln1_bias"])
            hidden = ag.relu(ag.add(ag.matmul(x, p[f"layer{i}_ffn_w1"]),
                                    p[f"layer{i}_ffn_b1"]))
            ffn = ag.add(ag.matmul(hidden, p[f"layer{i}_ffn_w2"]),
                         p[f"layer{i}_ffn_b2"])
            x = ag.layer_norm(ag.add(x, ffn),
                              p[f"layer{i}_ln2_gain"], p[f"layer{i}_ln2_bias"])
        return x

    def encode(self, example):
        """Encode one event mention to a d_enc vector."""
        return ag.reshape(self.encode_batch([example]), (self.d_enc,))

    def encode_batch(self, examples):
        """Encode several mentions at once; returns an n x d_enc matrix."""
        rows, bounds, triggers = self._stacked_token_rows(examples)
        if self.encoder.kind == "cnn":
            return ag.conv1d_maxpool_stacked(
                rows, bounds, self.params["conv_w"], self.params["conv_b"],
                self.encoder.cnn_window)
        outs = []
        for (start, stop), trig in zip(bounds, triggers):
            seq = ag.take_rows(rows, list(range(start, stop)))
            hidden = self._transformer_stack(seq)
            outs.append(ag.take_rows(hidden, [trig - start]))
        return ag.concat(outs, axis=0)

    # -- batched episode scoring --------------------------------------------

    def episode_scores(self, query_enc, support_enc, n_way, k_shot):
        """Score matrix (queries x classes); support rows grouped by class."""
        if self.head.prototype == "mean":
            avg = np.zeros((n_way, n_way * k_shot))
            for c in range(n_way):
                avg[c, c * k_shot:(c + 1) * k_shot] = 1.0 / k_shot
            protos = ag.matmul(Tensor(avg), support_enc)
            dist = self._pairwise_distance(query_enc, protos)
        else:
            cols = []
            for c in range(n_way):
                block = ag.take_rows(support_enc,
                                     list(range(c * k_shot, (c + 1) * k_shot)))
                match = ag.elementwise_match_scores(
                    query_enc, block, self.head.attention_squash)
                weights = ag.softmax(match, axis=-1)
                proto = ag.matmul(weights, block)  # per-query prototype rows
                cols.append(self._rowwise_distance(query_enc, proto))
            dist = ag.concat(cols, axis=1)
        return ag.scale(dist, -1.0)

    def _pairwise_distance(self, q, p):
        if self.head.distance == "euclidean":
            return ag.pairwise_sqdist(q, p)
        if self.head.distance == "cosine":
            return ag.sub(Tensor(1.0), ag.pairwise_cosine(q, p))
        return self._relation_pairwise(q, p)

    def _relation_pairwise(self, q, p):
        m, n = q.shape[0], p.shape[0]
        qrep = ag.take_rows(q, np.repeat(np.arange(m), n))
        prep = ag.take_rows(p, np.tile(np.arange(n), m))
        r = self._relation_scores(ag.concat([qrep, prep], axis=1))
        return ag.reshape(ag.sub(Tensor(1.0), r), (m, n))

    def _rowwise_distance(self, q, p):
        """Distance between matching rows of q and p, as a column vector."""
        if self.head.distance == "euclidean":
            diff = ag.sub(q, p)
            return ag.sum_(ag.mul(diff, diff), axis=1, keepdims=True)
        if self.head.distance == "cosine":
            return ag.sub(Tensor(1.0), ag.rowwise_cosine(q, p))
        r = self._relation_scores(ag.concat([q, p], axis=1))
        return ag.sub(Tensor(1.0), r)

    def _relation_scores(self, pairs):
        p = self.params
        hidden = ag.relu(ag.add(ag.matmul(pairs, p["rel_w1"]), p["rel_b1"]))
        return ag.sigmoid(ag.add(ag.matmul(hidden, p["rel_w2"]), p["rel_b2"]))

    def classify_query(self, example, support_encodings):
        """Probability vector for one query against per-class encodings."""
        q = self.encode(example)
        if self.head.prototype == "mean":
            protos = prototypes_mean(support_encodings)
        else:
            protos = prototypes_attention(support_encodings, q,
                                          self.head.attention_squash)
        ordered = [protos[c] for c in sorted(protos)]
        return classify(q, ordered, self.head, self.params)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model, extra=None):
    """Serialize configs, vocabulary and parameters to a JSON document."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "encoder": asdict(model.encoder),
            "head": asdict(model.head),
            "vocab_words": model.vocab.words,
        },
        "params": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in model.params.items()
        },
    }
    if extra:
        doc["config"].update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    from .corpus import Vocabulary

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint {path} is not valid JSON: {e}") from e
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format in {path}")
    encoder = EncoderConfig(**doc["config"]["encoder"])
    head = HeadConfig(**doc["config"]["head"])
    words = doc["config"]["vocab_words"]
    vocab = Vocabulary(words)
    tensors = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"]).reshape(entry["shape"])
        tensors[name] = Tensor(arr, requires_grad=True)
    return FewShotModel(vocab, encoder, head, ModelParams(tensors))
