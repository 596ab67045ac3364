"""Acceptance gate: one test per top-level acceptance criterion.

Each test prints exactly one PASS/FAIL line (bypassing pytest capture so
the lines always appear) and asserts the criterion at its stated tolerance.
The heavy training runs are cached module-wide because the directional and
noise criteria share their no-noise baselines.
"""

import json
import math
import time

import numpy as np
import pytest

import oracles
from fewshot_ec import autograd as ag
from fewshot_ec.autograd import Tensor
from fewshot_ec.cli import main as cli_main
from fewshot_ec.corpus import (LabeledCorpus, build_vocabulary,
                               generate_synthetic, random_embeddings,
                               split_labels)
from fewshot_ec.episodes import (EpisodeSpec, partition_support,
                                 perturb_labels, sample_episode)
from fewshot_ec.evaluation import GridCell, evaluate, grid_to_json, run_grid
from fewshot_ec.gradcheck_suite import run_gradient_suite
from fewshot_ec.model import (EncoderConfig, FewShotModel, HeadConfig,
                              ModelParams, classify, init_params,
                              prototypes_attention, prototypes_mean)
from fewshot_ec.training import (TrainConfig, loss_aux, loss_query,
                                 loss_total, train)


@pytest.fixture
def report(capfd):
    """Emit one PASS/FAIL line per criterion, bypassing output capture."""
    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"
        with capfd.disabled():
            print(line, flush=True)
        assert ok, line
    return _report


# ---------------------------------------------------------------------------
# shared training-run machinery for the directional / noise criteria

_RUN_CACHE = {}


def _lowsignal_corpora():
    corpus = generate_synthetic(num_labels=28, examples_per_label=20,
                                vocab_size=2000, signal_strength=0.7, seed=7)
    labels = sorted(corpus.labels)
    return split_labels(corpus, labels[:20], labels[20:24], labels[24:])


def _proto_cnn_model(vocab, seed):
    encoder = EncoderConfig()
    head = HeadConfig.from_name("proto")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    emb = random_embeddings(vocab, rng=rng)
    return FewShotModel(vocab, encoder, head,
                        init_params(encoder, head, emb, rng))


def _variant_accuracy(seed, lam, noise_rate):
    """Train Proto+CNN on the low-signal corpus, return held-out accuracy."""
    key = (seed, lam, noise_rate)
    if key in _RUN_CACHE:
        return _RUN_CACHE[key]
    tr, dv, te = _lowsignal_corpora()
    held_out = LabeledCorpus(dv.examples + te.examples)
    vocab = build_vocabulary(LabeledCorpus(
        tr.examples + dv.examples + te.examples))
    model = _proto_cnn_model(vocab, seed)
    spec = EpisodeSpec(n_way=5, k_shot=5, q_query=5)
    cfg = TrainConfig(lam=lam, q_aux=2, episodes=400, eval_every=0,
                      noise_rate=noise_rate, seed=seed)
    result = train(tr, dv, model, spec, cfg)
    report = evaluate(result.model, held_out, spec, episodes=150, seed=seed)
    _RUN_CACHE[key] = report.mean_accuracy
    return report.mean_accuracy


SEEDS = (1, 2, 3, 4, 5)


# ---------------------------------------------------------------------------


def test_scope_paper_numbers(report):
    # published benchmark accuracies come from licensed corpora; they are
    # embedded as report annotations only, never asserted against
    from fewshot_ec.evaluation import REFERENCE_ACCURACIES, REFERENCE_NOTE
    ok = len(REFERENCE_ACCURACIES) > 0 and "not reproducible" in REFERENCE_NOTE
    report("scope: benchmark-number reproduction out of scope", ok,
           f"{len(REFERENCE_ACCURACIES)} reference cells kept as "
           f"annotations only")


def test_gradient_suite(report):
    t0 = time.time()
    failures = run_gradient_suite()
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    report("gradient suite (rel err <= 1e-4, >= 5 shapes per op, < 60s)",
           ok, f"{len(failures)} failures, {elapsed:.1f}s")


def test_oracle_equivalence(report):
    t0 = time.time()
    rng = np.random.default_rng(123)
    worst = 0.0
    instances = 1000
    for _ in range(instances):
        n = int(rng.integers(2, 5))
        k = int(rng.integers(1, 6))
        d = int(rng.integers(2, 9))
        support = rng.standard_normal((n, k, d))
        query = rng.standard_normal(d)
        support_t = {c: [Tensor(support[c, j]) for j in range(k)]
                     for c in range(n)}

        # mean prototype
        for c in range(n):
            got = prototypes_mean(support_t)[c].data
            want = oracles.mean_prototype([list(v) for v in support[c]])
            worst = max(worst, float(np.max(np.abs(got - np.array(want)))))

        # attention prototype
        att = prototypes_attention(support_t, Tensor(query))
        for c in range(n):
            want = oracles.attention_prototype(
                [list(v) for v in support[c]], list(query))
            worst = max(worst,
                        float(np.max(np.abs(att[c].data - np.array(want)))))

        # classifier over negated distances (euclidean and cosine)
        for dist_name, dist_fn in (("euclidean", oracles.sq_euclidean),
                                   ("cosine", oracles.cosine_distance)):
            head = HeadConfig(distance=dist_name, prototype="mean")
            protos = prototypes_mean(support_t)
            got = classify(Tensor(query), [protos[c] for c in range(n)],
                           head).data
            want = oracles.classify_probs(
                list(query), [protos[c].data.tolist() for c in range(n)],
                dist_fn)
            worst = max(worst, float(np.max(np.abs(got - np.array(want)))))

        # query loss (mean NLL, full support) and auxiliary loss (summed NLL)
        q_count = int(rng.integers(1, 4))
        queries = rng.standard_normal((q_count, d))
        targets = rng.integers(0, n, size=q_count).astype(np.intp)
        head = HeadConfig(distance="euclidean", prototype="mean")
        model = FewShotModel(None, EncoderConfig(), head, ModelParams({}))
        scores = model.episode_scores(Tensor(queries),
                                      Tensor(support.reshape(n * k, d)), n, k)
        got_lq = ag.mean_(ag.cross_entropy_rows(scores, targets)).item()
        want_lq = oracles.query_loss(
            [list(q) for q in queries], targets.tolist(),
            [[list(v) for v in support[c]] for c in range(n)],
            "mean", oracles.sq_euclidean)
        worst = max(worst, abs(got_lq - want_lq))

        if k >= 2:
            q_aux = int(rng.integers(1, k))
            ss = support[:, q_aux:, :]
            sq = support[:, :q_aux, :]
            aux_scores = model.episode_scores(
                Tensor(sq.reshape(n * q_aux, d)),
                Tensor(ss.reshape(n * (k - q_aux), d)), n, k - q_aux)
            aux_targets = np.repeat(np.arange(n), q_aux).astype(np.intp)
            got_la = ag.sum_(
                ag.cross_entropy_rows(aux_scores, aux_targets)).item()
            want_la = oracles.aux_loss(
                [[list(v) for v in ss[c]] for c in range(n)],
                [[list(v) for v in sq[c]] for c in range(n)],
                "mean", oracles.sq_euclidean)
            worst = max(worst, abs(got_la - want_la))
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 120
    report("oracle equivalence (prototypes/classifier/losses <= 1e-10, "
           "1000 instances, < 120s)", ok,
            f"worst abs diff {worst:.2e}, {elapsed:.1f}s")


def test_invariant_suite(report):
    rng = np.random.default_rng(77)
    problems = []

    # classifier normalization and argmax == nearest prototype
    head = HeadConfig.from_name("proto")
    for _ in range(1000):
        d = int(rng.integers(2, 7))
        q = Tensor(rng.standard_normal(d))
        protos = [Tensor(rng.standard_normal(d))
                  for _ in range(int(rng.integers(2, 6)))]
        probs = classify(q, protos, head)
        if not (np.all(probs.data >= 0)
                and abs(probs.data.sum() - 1.0) <= 1e-12):
            problems.append("classifier normalization")
            break
        dists = [oracles.sq_euclidean(q.data, p.data) for p in protos]
        if int(np.argmax(probs.data)) != int(np.argmin(dists)):
            problems.append("argmax/argmin consistency")
            break

    # attention prototype reduces to the mean for identical support
    vecs = {0: [Tensor(np.array([0.4, -1.2, 2.0]))] * 5}
    att = prototypes_attention(vecs, Tensor(np.array([1.0, 0.5, -0.25])))
    mean = prototypes_mean(vecs)
    if np.max(np.abs(att[0].data - mean[0].data)) > 1e-12:
        problems.append("attention-equals-mean")

    # partition: exact set identities plus inclusion frequency 0.4 +/- 0.02
    corpus = generate_synthetic(num_labels=5, examples_per_label=12,
                                vocab_size=60, seed=4)
    spec = EpisodeSpec(n_way=5, k_shot=5, q_query=2)
    episode = sample_episode(corpus, spec, np.random.default_rng(4))
    label = episode.label_universe[0]
    hits = {id(e): 0 for e in episode.support[label]}
    draws = 10_000
    part_rng = np.random.default_rng(4)
    for _ in range(draws):
        part = partition_support(episode, 2, part_rng)
        for lab in episode.label_universe:
            sup = {id(e) for e in part.aux_support[lab]}
            aux = {id(e) for e in part.aux_query[lab]}
            if sup & aux or sup | aux != {id(e) for e in episode.support[lab]}:
                problems.append("partition set identities")
                break
        for e in part.aux_query[label]:
            hits[id(e)] += 1
    freqs = [c / draws for c in hits.values()]
    if any(abs(f - 0.4) > 0.02 for f in freqs):
        problems.append(f"partition inclusion frequency {freqs}")

    # perturbation: exact floor count, never self-label
    big = generate_synthetic(num_labels=5, examples_per_label=30,
                             vocab_size=60, seed=5)
    ep = sample_episode(big, EpisodeSpec(n_way=5, k_shot=5, q_query=20),
                        np.random.default_rng(5))
    for rate in (0.0, 0.2, 0.3, 0.5, 1.0):
        out = perturb_labels(ep, rate, np.random.default_rng(6))
        changed = sum(1 for (_, ca), (_, cb) in zip(ep.query, out.query)
                      if ca != cb)
        if changed != int(rate * len(ep.query)):
            problems.append(f"perturb count at rate {rate}")
        if any(not 0 <= cb < ep.n_way
               for _, cb in out.query):
            problems.append("perturb label range")

    # support/query disjointness over 1000 sampled episodes
    pool = generate_synthetic(num_labels=8, examples_per_label=10,
                              vocab_size=80, seed=6)
    ep_rng = np.random.default_rng(8)
    for _ in range(1000):
        n = int(ep_rng.integers(2, 6))
        k = int(ep_rng.integers(1, 4))
        q = int(ep_rng.integers(1, 4))
        e = sample_episode(pool, EpisodeSpec(n_way=n, k_shot=k, q_query=q),
                           ep_rng)
        sup = {id(x) for vs in e.support.values() for x in vs}
        if sup & {id(x) for x, _ in e.query}:
            problems.append("episode disjointness")
            break

    report("invariant suite (classifier/attention/partition/perturb/episode)",
           not problems, "all invariants hold" if not problems
           else "; ".join(problems))


def _training_setup(seed):
    corpus = generate_synthetic(num_labels=24, examples_per_label=14,
                                vocab_size=200, sentence_len_range=(4, 7),
                                seed=seed)
    labels = sorted(corpus.labels)
    tr, dv, te = split_labels(corpus, labels[:20], labels[20:22], labels[22:])
    vocab = build_vocabulary(LabeledCorpus(
        tr.examples + dv.examples + te.examples))
    encoder = EncoderConfig(word_dim=8, pos_dim=4, cnn_filters=6,
                            max_pos_dist=6)
    head = HeadConfig.from_name("proto")
    rng = np.random.default_rng(seed)
    emb = random_embeddings(vocab, dim=8, pos_dim=4, max_pos_dist=6, rng=rng)
    model = FewShotModel(vocab, encoder, head,
                         init_params(encoder, head, emb, rng))
    return tr, dv, model


def test_baseline_recovery(report):
    # loss level: lambda = 0 must be the query loss bit for bit
    tr, dv, model = _training_setup(11)
    spec = EpisodeSpec(n_way=4, k_shot=3, q_query=2)
    ep = sample_episode(tr, spec, np.random.default_rng(11))
    lt = loss_total(model, ep, TrainConfig(lam=0.0, q_aux=2),
                    np.random.default_rng(12)).item()
    lq = loss_query(model, ep).item()
    loss_ok = lt == lq

    # training level: with lambda = 0 the checkpoint must be bit for bit
    # the no-auxiliary baseline, independent of the unused q_aux setting
    def run(q_aux):
        tr2, dv2, model2 = _training_setup(11)
        cfg = TrainConfig(lam=0.0, q_aux=q_aux, episodes=10, eval_every=5,
                          eval_episodes=4, seed=13)
        # dev split holds 2 labels, so dev evaluation runs 2-way
        return train(tr2, dv2, model2,
                     EpisodeSpec(n_way=2, k_shot=3, q_query=2), cfg)

    a, b = run(1), run(2)
    train_ok = a.log == b.log and all(
        np.array_equal(t.data, b.model.params[name].data)
        for name, t in a.model.params.items())
    report("baseline recovery (lambda=0 bitwise)", loss_ok and train_ok,
           f"loss bitwise={loss_ok}, checkpoint bitwise={train_ok}")


def test_end_to_end_synthetic_convergence(report):
    t0 = time.time()
    corpus = generate_synthetic(num_labels=28, examples_per_label=50,
                                vocab_size=2000, signal_strength=1.0, seed=7)
    labels = sorted(corpus.labels)
    tr, dv, te = split_labels(corpus, labels[:20], labels[20:24], labels[24:])
    # 4 test labels cannot host a 5-way episode; the final 5-way evaluation
    # runs over the union of the 8 held-out labels, all unseen in training
    held_out = LabeledCorpus(dv.examples + te.examples)
    vocab = build_vocabulary(LabeledCorpus(
        tr.examples + dv.examples + te.examples))
    model = _proto_cnn_model(vocab, seed=7)
    spec = EpisodeSpec(n_way=5, k_shot=5, q_query=5)
    cfg = TrainConfig(lam=0.1, q_aux=2, episodes=2000, learning_rate=1e-3,
                      optimizer="adam", eval_every=0, seed=7)
    result = train(tr, dv, model, spec, cfg)
    eval_report = evaluate(result.model, held_out, spec, episodes=1000, seed=7)
    elapsed = time.time() - t0
    ok = eval_report.mean_accuracy >= 0.90 and elapsed < 900
    report("end-to-end synthetic convergence (>= 0.90, < 15 min)", ok,
           f"5-way 5-shot accuracy {eval_report.mean_accuracy:.4f} "
           f"+/- {eval_report.ci95_half_width:.4f}, {elapsed:.0f}s")


def test_lolos_directional(report):
    with_aux = [_variant_accuracy(s, 0.1, 0.0) for s in SEEDS]
    baseline = [_variant_accuracy(s, 0.0, 0.0) for s in SEEDS]
    mean_aux, mean_base = float(np.mean(with_aux)), float(np.mean(baseline))
    ok = mean_aux >= mean_base
    report("leave-out auxiliary loss directional (5-seed mean)", ok,
           f"with aux {mean_aux:.4f} vs baseline {mean_base:.4f}")


def test_noise_protocol(report):
    clean = {lam: [_variant_accuracy(s, lam, 0.0) for s in SEEDS]
             for lam in (0.1, 0.0)}
    noisy = {lam: [_variant_accuracy(s, lam, 0.5) for s in SEEDS]
             for lam in (0.1, 0.0)}
    finite = all(math.isfinite(a) for accs in noisy.values() for a in accs)
    degrades = all(np.mean(noisy[lam]) < np.mean(clean[lam])
                   for lam in (0.1, 0.0))

    # structural check: the harness emits the three-rate grid
    corpus = generate_synthetic(num_labels=24, examples_per_label=10,
                                vocab_size=200, sentence_len_range=(4, 6),
                                seed=9)
    labels = sorted(corpus.labels)
    tr, dv, te = split_labels(corpus, labels[:20], labels[20:22], labels[22:])
    cells = [GridCell("proto", "cnn", 2, 3, lolos, rate)
             for rate in (0.2, 0.3, 0.5) for lolos in (True, False)]
    cfg = TrainConfig(lam=0.1, q_aux=1, episodes=2, eval_every=0)
    grid = run_grid(tr, dv, te, cells, cfg,
                    encoder_overrides={"word_dim": 8, "pos_dim": 4,
                                       "cnn_filters": 6, "max_pos_dist": 5},
                    eval_episodes=2, q_query=2, seed=0)
    doc = grid_to_json(grid)
    emitted = {c["cell"]["noise_rate"] for c in doc["cells"]}
    grid_ok = emitted == {0.2, 0.3, 0.5} and len(doc["cells"]) == 6 and \
        all("report" in c for c in doc["cells"])

    ok = finite and degrades and grid_ok
    report("noise protocol (rate 0.5 degrades, no NaN, three-rate grid)", ok,
           f"finite={finite}, degrades={degrades}, grid={sorted(emitted)}")


def test_determinism(tmp_path, report):
    config = {
        "data": {"synthetic": {"num_labels": 24, "examples_per_label": 14,
                               "vocab_size": 200, "seed": 5},
                 "split": {"counts": [20, 2, 2]}},
        "encoder": {"kind": "cnn", "word_dim": 8, "pos_dim": 4,
                    "cnn_filters": 6, "max_pos_dist": 6},
        "head": {"name": "proto"},
        "train": {"episodes": 6, "eval_every": 3, "eval_episodes": 4,
                  "n_way": 2, "k_shot": 3, "q_query": 2, "q_aux": 1,
                  "seed": 1},
        "eval": {"n_way": 2, "k_shot": 3, "q_query": 2, "episodes": 8,
                 "seed": 2},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    pairs = []
    for run_dir in ("r1", "r2"):
        out = tmp_path / run_dir
        assert cli_main(["train", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        assert cli_main(["eval", "--config", str(cfg_path),
                         "--checkpoint", str(out / "checkpoint.json"),
                         "--out", str(out)]) == 0
        pairs.append(out)
    same = all(
        (pairs[0] / name).read_bytes() == (pairs[1] / name).read_bytes()
        for name in ("checkpoint.json", "train_log.jsonl",
                     "eval_report.json"))
    report("determinism (bitwise checkpoints, logs, reports)", same,
           "two train+eval command repeats byte-identical" if same
           else "outputs differ")
