"""Command-line interface binding data, training, evaluation and reports.

Subcommands: gen-data, train, eval, grid, gradcheck, report. Each run is
driven by one JSON config file with sections {data, encoder, head, train,
eval, grid}; unknown keys are a hard error. A few flags override config
keys of the same name.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .corpus import (LabeledCorpus, build_vocabulary, filter_rare_labels,
                     generate_synthetic, load_embeddings, load_jsonl,
                     random_embeddings, save_jsonl, split_labels)
from .episodes import EpisodeSpec
from .errors import ConfigurationError, DataError, FewshotError
from .evaluation import (GridCell, evaluate, grid_from_json, grid_to_json,
                         render_report, run_grid)
from .model import (EncoderConfig, FewShotModel, HeadConfig, init_params,
                    load_checkpoint, save_checkpoint)
from .training import TrainConfig, train

SECTION_KEYS = {
    "data": {"train_path", "dev_path", "test_path", "embeddings_path",
             "min_label_count", "synthetic", "split"},
    "synthetic": {"num_labels", "examples_per_label", "vocab_size",
                  "sentence_len_min", "sentence_len_max", "signal_strength",
                  "seed", "signatures_per_label", "filler_pool"},
    "split": {"train_labels", "dev_labels", "test_labels", "counts"},
    "encoder": {"kind", "word_dim", "pos_dim", "cnn_window", "cnn_filters",
                "tf_layers", "tf_dim", "tf_heads", "max_pos_dist"},
    "head": {"name", "distance", "prototype", "relation_hidden",
             "attention_squash"},
    "train": {"lambda", "q_aux", "episodes", "learning_rate", "optimizer",
              "seed", "eval_every", "eval_episodes", "noise_rate",
              "batch_classes", "n_way", "k_shot", "q_query"},
    "eval": {"n_way", "k_shot", "q_query", "episodes", "seed", "checkpoint"},
    "grid": {"heads", "encoders", "settings", "lolos", "noise_rates",
             "eval_episodes", "q_query", "seed"},
}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
    _validate_keys(cfg, set(SECTION_KEYS) - {"synthetic", "split"}, "top level")
    for section, keys in cfg.items():
        _validate_keys(keys, SECTION_KEYS[section], section)
    for sub in ("synthetic", "split"):
        if sub in cfg.get("data", {}):
            _validate_keys(cfg["data"][sub], SECTION_KEYS[sub], f"data.{sub}")
    return cfg


def _validate_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"config section {where!r} must be an object")
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) in {where}: {sorted(unknown)}")


def apply_overrides(cfg, args):
    """Fold command-line flags into the config dict."""
    cfg = json.loads(json.dumps(cfg))  # deep copy
    def setin(section, key, value):
        if value is not None:
            cfg.setdefault(section, {})[key] = value

    setin("encoder", "kind", args.encoder)
    setin("head", "name", args.head)
    setin("train", "lambda", getattr(args, "lam", None))
    setin("train", "q_aux", args.q_aux)
    setin("train", "noise_rate", args.noise_rate)
    for section in ("train", "eval"):
        setin(section, "n_way", args.n_way)
        setin(section, "k_shot", args.k_shot)
        if args.seed is not None:
            setin(section, "seed", args.seed)
    if args.lolos is not None:
        cfg.setdefault("train", {})["lambda"] = (
            cfg.get("train", {}).get("lambda", 0.1) if args.lolos == "on" else 0.0)
    return cfg


# ---------------------------------------------------------------------------
# config -> domain objects


def build_encoder_config(cfg):
    return EncoderConfig(**cfg.get("encoder", {}))


def build_head_config(cfg):
    head_cfg = dict(cfg.get("head", {}))
    name = head_cfg.pop("name", None)
    if name is not None:
        if "distance" in head_cfg or "prototype" in head_cfg:
            raise ConfigurationError(
                "head.name cannot be combined with explicit distance/prototype")
        return HeadConfig.from_name(name, **head_cfg)
    return HeadConfig(**head_cfg)


def build_train_config(cfg):
    t = dict(cfg.get("train", {}))
    for drop in ("n_way", "k_shot", "q_query"):
        t.pop(drop, None)
    if "lambda" in t:
        t["lam"] = t.pop("lambda")
    return TrainConfig(**t)


def build_train_spec(cfg):
    t = cfg.get("train", {})
    return EpisodeSpec(n_way=t.get("n_way", 5), k_shot=t.get("k_shot", 5),
                       q_query=t.get("q_query", 5))


def build_eval_spec(cfg):
    e = cfg.get("eval", {})
    return EpisodeSpec(n_way=e.get("n_way", 5), k_shot=e.get("k_shot", 5),
                       q_query=e.get("q_query", 5))


def build_synthetic(data_cfg):
    s = dict(data_cfg["synthetic"])
    lo = s.pop("sentence_len_min", 6)
    hi = s.pop("sentence_len_max", 12)
    return generate_synthetic(sentence_len_range=(lo, hi), **s)


def load_corpora(cfg):
    """Materialize (train, dev, test) corpora from the data section."""
    data = cfg.get("data", {})
    if "synthetic" in data:
        corpus = build_synthetic(data)
        if "min_label_count" in data:
            corpus = filter_rare_labels(corpus, data["min_label_count"])
        split = data.get("split")
        if split is None:
            raise ConfigurationError("synthetic data needs a data.split section")
        if "counts" in split:
            n_tr, n_dv, n_te = split["counts"]
            labels = sorted(corpus.labels)
            if n_tr + n_dv + n_te != len(labels):
                raise ConfigurationError(
                    f"split counts {split['counts']} do not cover "
                    f"{len(labels)} labels")
            parts = (labels[:n_tr], labels[n_tr:n_tr + n_dv],
                     labels[n_tr + n_dv:])
        else:
            parts = (split["train_labels"], split["dev_labels"],
                     split["test_labels"])
        return split_labels(corpus, *parts)
    missing = [k for k in ("train_path", "dev_path", "test_path") if k not in data]
    if missing:
        raise ConfigurationError(
            f"data section needs either synthetic+split or corpus paths; "
            f"missing {missing}")
    corpora = []
    for key in ("train_path", "dev_path", "test_path"):
        corpus = load_jsonl(data[key])
        if "min_label_count" in data:
            corpus = filter_rare_labels(corpus, data["min_label_count"])
        corpora.append(corpus)
    overlap = (corpora[0].labels & corpora[1].labels) | \
              (corpora[0].labels & corpora[2].labels) | \
              (corpora[1].labels & corpora[2].labels)
    if overlap:
        raise DataError(f"corpus splits share labels: {sorted(overlap)}")
    return tuple(corpora)


def build_model(cfg, corpora, seed):
    encoder = build_encoder_config(cfg)
    head = build_head_config(cfg)
    vocab = build_vocabulary(LabeledCorpus(
        corpora[0].examples + corpora[1].examples + corpora[2].examples))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE)))
    emb_path = cfg.get("data", {}).get("embeddings_path")
    if emb_path:
        embeddings = load_embeddings(emb_path, vocab, dim=encoder.word_dim,
                                     max_pos_dist=encoder.max_pos_dist,
                                     pos_dim=encoder.pos_dim, rng=rng)
    else:
        embeddings = random_embeddings(vocab, dim=encoder.word_dim,
                                       max_pos_dist=encoder.max_pos_dist,
                                       pos_dim=encoder.pos_dim, rng=rng)
    params = init_params(encoder, head, embeddings, rng)
    return FewShotModel(vocab, encoder, head, params)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, args):
    data = cfg.get("data", {})
    if "synthetic" not in data:
        raise ConfigurationError("gen-data requires a data.synthetic section")
    os.makedirs(args.out, exist_ok=True)
    if "split" in data:
        tr, dv, te = load_corpora(cfg)
        for name, corpus in (("train", tr), ("dev", dv), ("test", te)):
            path = os.path.join(args.out, f"{name}.jsonl")
            save_jsonl(corpus, path)
            print(f"wrote {path}: {len(corpus)} examples, "
                  f"{len(corpus.labels)} labels")
    else:
        corpus = build_synthetic(data)
        path = os.path.join(args.out, "corpus.jsonl")
        save_jsonl(corpus, path)
        print(f"wrote {path}: {len(corpus)} examples, {len(corpus.labels)} labels")
    return 0


def cmd_train(cfg, args):
    corpora = load_corpora(cfg)
    train_cfg = build_train_config(cfg)
    spec = build_train_spec(cfg)
    model = build_model(cfg, corpora, train_cfg.seed)
    result = train(corpora[0], corpora[1], model, spec, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(ckpt, result.model)
    log_path = os.path.join(args.out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record) + "\n")
    print(f"trained {train_cfg.episodes} episodes; "
          f"best dev accuracy {result.best_accuracy:.4f} "
          f"at episode {result.best_episode}")
    print(f"wrote {ckpt} and {log_path}")
    return 0


def cmd_eval(cfg, args):
    ckpt_path = args.checkpoint or cfg.get("eval", {}).get("checkpoint")
    if not ckpt_path:
        raise ConfigurationError("eval needs --checkpoint or eval.checkpoint")
    model = load_checkpoint(ckpt_path)
    corpora = load_corpora(cfg)
    e = cfg.get("eval", {})
    spec = build_eval_spec(cfg)
    report = evaluate(model, corpora[2], spec,
                      episodes=e.get("episodes", 1000), seed=e.get("seed", 0))
    doc = {
        "n_way": report.n_way, "k_shot": report.k_shot,
        "episodes_evaluated": report.episodes_evaluated,
        "mean_accuracy": report.mean_accuracy,
        "ci95_half_width": report.ci95_half_width,
        "protocol": "episodic averaging (support set resampled per episode)",
    }
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "eval_report.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print(f"{report.n_way}-way {report.k_shot}-shot accuracy: "
          f"{report.mean_accuracy:.4f} ± {report.ci95_half_width:.4f} "
          f"over {report.episodes_evaluated} episodes")
    print(f"wrote {out_path}")
    return 0


def cmd_grid(cfg, args):
    corpora = load_corpora(cfg)
    g = cfg.get("grid", {})
    cells = [
        GridCell(head=head, encoder=encoder, n_way=n, k_shot=k,
                 lolos_enabled=lolos, noise_rate=rate)
        for head in g.get("heads", ["proto"])
        for encoder in g.get("encoders", ["cnn"])
        for (n, k) in g.get("settings", [[5, 5]])
        for lolos in g.get("lolos", [True, False])
        for rate in g.get("noise_rates", [0.0])
    ]
    train_cfg = build_train_config(cfg)
    grid = run_grid(corpora[0], corpora[1], corpora[2], cells, train_cfg,
                    encoder_overrides=cfg.get("encoder", {}),
                    eval_episodes=g.get("eval_episodes", 1000),
                    q_query=g.get("q_query", 5), seed=g.get("seed", 0))
    text, doc = render_report(grid, include_paper_refs=args.paper_refs)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "grid.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print(text)
    print(f"wrote {out_path}")
    return 0


def cmd_report(cfg, args):
    with open(args.grid_json, encoding="utf-8") as fh:
        doc = json.load(fh)
    grid = grid_from_json(doc)
    text, _ = render_report(grid, include_paper_refs=args.paper_refs)
    print(text)
    return 0


def cmd_gradcheck(cfg, args):
    from .gradcheck_suite import run_gradient_suite

    failures = run_gradient_suite(verbose=True)
    return 0 if not failures else 1


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fewshot-ec",
        description="Few-shot event classification with metric learning")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "grid": cmd_grid,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".")
        p.add_argument("--n-way", type=int, default=None)
        p.add_argument("--k-shot", type=int, default=None)
        p.add_argument("--q-aux", type=int, default=None)
        p.add_argument("--lambda", type=float, default=None, dest="lam")
        p.add_argument("--noise-rate", type=float, default=None)
        p.add_argument("--encoder", choices=["cnn", "transformer"], default=None)
        p.add_argument("--head",
                       choices=["matching", "proto", "proto-att", "relation"],
                       default=None)
        p.add_argument("--lolos", choices=["on", "off"], default=None)
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
        if name in ("grid", "report"):
            p.add_argument("--paper-refs", action="store_true")
        if name == "report":
            p.add_argument("--grid-json", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return args.func(cfg, args)
    except FewshotError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
