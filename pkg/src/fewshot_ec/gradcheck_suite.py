"""Finite-difference gradient verification over the autodiff primitives.

Every registered case compares the tape gradient of a scalar loss against
a central-difference estimate for each input tensor. The suite ends with
the full training loss on a dimensionally reduced model, so the composed
encoder/head/loss graph is exercised, not just isolated operations.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .corpus import build_vocabulary, generate_synthetic, random_embeddings
from .episodes import EpisodeSpec, sample_episode
from .model import EncoderConfig, FewShotModel, HeadConfig, init_params
from .training import TrainConfig, loss_total

FD_STEP = 1e-6
TOLERANCE = 1e-4


def numeric_gradient(func, tensor, h=FD_STEP):
    """Central-difference gradient of a scalar-valued func w.r.t. tensor.data."""
    base = tensor.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.ravel()
    for i in range(base.size):
        bumped = base.copy().ravel()
        bumped[i] += h
        hi = func(Tensor(bumped.reshape(base.shape), requires_grad=True))
        bumped[i] -= 2 * h
        lo = func(Tensor(bumped.reshape(base.shape), requires_grad=True))
        flat[i] = (hi - lo) / (2 * h)
    return grad


def max_relative_error(numeric, analytic):
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-3)
    return float(np.max(np.abs(numeric - analytic) / denom))


def check_case(name, build_loss, tensors):
    """Run one case; returns (name, max_rel_error) across all inputs."""
    with Tape() as tape:
        loss = build_loss(*tensors)
        grads = tape.backward(loss)
    worst = 0.0
    for pos, t in enumerate(tensors):
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)

        def rebuilt(replacement, pos=pos):
            args = list(tensors)
            args[pos] = replacement
            return build_loss(*args).item()

        numeric = numeric_gradient(rebuilt, t)
        worst = max(worst, max_relative_error(numeric, analytic))
    return name, worst


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


SHAPE_VARIANTS = 5  # random shapes exercised per op family


def primitive_cases(rng):
    """(name, loss builder, input tensors) triples over distinct op families.

    Each family is instantiated at SHAPE_VARIANTS randomly drawn shapes.
    """
    def dim(lo=1, hi=7):
        return int(rng.integers(lo, hi + 1))

    cases = []
    for rep in range(SHAPE_VARIANTS):
        m, k, n = dim(), dim(), dim()
        cases.append((f"matmul_chain/{rep}",
                      lambda a, b: ag.sum_(ag.tanh(ag.matmul(a, b))),
                      (_t(rng, m, k), _t(rng, k, n))))
        r, c = dim(2), dim(2)
        cases.append((f"elementwise_mix/{rep}",
                      lambda a, b: ag.sum_(
                          ag.mul(ag.sigmoid(a), ag.relu(ag.add(a, b)))),
                      (_t(rng, r, c), _t(rng, r, c))))
        rows, cols = dim(2), dim(2)
        targets = rng.integers(0, cols, size=rows).astype(np.intp)
        cases.append((f"softmax_cross_entropy/{rep}",
                      lambda s, t=targets: ag.mean_(ag.cross_entropy_rows(s, t)),
                      (_t(rng, rows, cols),)))
        nq, np_, d = dim(2), dim(2), dim(2)
        cases.append((f"pairwise_distances/{rep}",
                      lambda q, p: ag.add(ag.sum_(ag.pairwise_sqdist(q, p)),
                                          ag.sum_(ag.pairwise_cosine(q, p))),
                      (_t(rng, nq, d), _t(rng, np_, d))))
        nq, ks, d = dim(2), dim(2), dim(2)
        cases.append((f"attention_prototype/{rep}",
                      lambda q, s: ag.sum_(ag.matmul(
                          ag.softmax(ag.elementwise_match_scores(q, s, "tanh"),
                                     axis=-1), s)),
                      (_t(rng, nq, d), _t(rng, ks, d))))
        lens = [dim(1, 6) for _ in range(dim(2, 4))]
        bounds, start = [], 0
        for ln in lens:
            bounds.append((start, start + ln))
            start += ln
        d_in, d_f = dim(2), dim(2)
        cases.append((f"conv_maxpool_stacked/{rep}",
                      lambda rows_, w, b, bounds=bounds: ag.sum_(
                          ag.conv1d_maxpool_stacked(rows_, bounds, w, b, 3)),
                      (_t(rng, start, d_in), _t(rng, 3 * d_in, d_f), _t(rng, d_f))))
        r, c = dim(2), dim(2)
        cases.append((f"layer_norm/{rep}",
                      lambda x, g, o: ag.sum_(ag.tanh(ag.layer_norm(x, g, o))),
                      (_t(rng, r, c), _t(rng, c), _t(rng, c))))
        seq, heads = dim(1, 6), int(rng.choice([1, 2]))
        d = heads * dim(1, 4)
        cases.append((f"self_attention/{rep}",
                      lambda x, wq, wk, wv, wo, h=heads: ag.sum_(
                          ag.multi_head_self_attention(x, wq, wk, wv, wo, h)),
                      (_t(rng, seq, d), _t(rng, d, d), _t(rng, d, d),
                       _t(rng, d, d), _t(rng, d, d))))
    return cases


def _reduced_model(encoder_kind, head_name, rng):
    corpus = generate_synthetic(num_labels=4, examples_per_label=6,
                                vocab_size=20, sentence_len_range=(4, 6),
                                seed=7)
    vocab = build_vocabulary(corpus)
    encoder = EncoderConfig(kind=encoder_kind, word_dim=8, pos_dim=4,
                            cnn_filters=6, tf_layers=1, tf_dim=8, tf_heads=2,
                            max_pos_dist=4)
    head = HeadConfig.from_name(head_name)
    emb = random_embeddings(vocab, dim=8, pos_dim=4, max_pos_dist=4, rng=rng)
    params = init_params(encoder, head, emb, rng)
    return corpus, FewShotModel(vocab, encoder, head, params)


def full_loss_cases(rng):
    """Training loss gradients on reduced models, one per encoder family."""
    cases = []
    for encoder_kind, head_name in (("cnn", "proto-att"), ("transformer", "proto")):
        corpus, model = _reduced_model(encoder_kind, head_name, rng)
        spec = EpisodeSpec(n_way=3, k_shot=3, q_query=2)
        episode = sample_episode(corpus, spec, np.random.default_rng(3))
        config = TrainConfig(lam=0.1, q_aux=1, episodes=1)

        def build(model=model, episode=episode, config=config):
            # fixed partition draw so the loss is a pure function of params
            return loss_total(model, episode, config,
                              np.random.default_rng(5))

        cases.append((f"loss_total_{encoder_kind}_{head_name}",
                      build, model))
    return cases


def check_full_loss(name, build, model):
    with Tape() as tape:
        loss = build()
        grads = tape.backward(loss)
    worst = 0.0
    for pname, p in model.params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)

        def perturbed(replacement, pname=pname, p=p):
            model.params[pname] = replacement
            try:
                return build().item()
            finally:
                model.params[pname] = p

        numeric = numeric_gradient(perturbed, p)
        worst = max(worst, max_relative_error(numeric, analytic))
    return name, worst


def run_gradient_suite(verbose=False, tolerance=TOLERANCE):
    """Run every case; returns the list of (name, error) failures."""
    rng = np.random.default_rng(11)
    results = []
    for name, build, tensors in primitive_cases(rng):
        results.append(check_case(name, build, tensors))
    for name, build, model in full_loss_cases(rng):
        results.append(check_full_loss(name, build, model))
    failures = [(n, e) for n, e in results if e > tolerance]
    if verbose:
        for name, err in results:
            status = "ok" if err <= tolerance else "FAIL"
            print(f"{status:4s} {name:28s} max rel error {err:.3e}")
        print(f"{len(results) - len(failures)}/{len(results)} gradient checks "
              f"within {tolerance:g}")
    return failures
