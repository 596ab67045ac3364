"""Evaluation harness, experiment grids, and report rendering.

Grids mirror the benchmark-table layout used in the few-shot event
classification literature; published reference numbers can be attached to
matching cells as annotations only (they come from licensed corpora and are
not reproducible targets here).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .episodes import EpisodeSpec, sample_episode
from .errors import ConfigurationError
from .training import _episode_accuracy

DEFAULT_EVAL_EPISODES = 1000

# Published accuracies (ACE 2005 test set) keyed by
# (head, encoder, n_way, k_shot, lolos_enabled, noise_rate).
REFERENCE_ACCURACIES = {}


def _fill_references():
    main_table = {
        ("matching", False): {"cnn": (45.81, 49.01, 30.41, 35.66),
                              "transformer": (71.83, 76.51, 61.20, 66.79)},
        ("matching", True): {"cnn": (51.78, 52.64, 32.48, 39.15),
                             "transformer": (78.13, 83.42, 68.91, 75.30)},
        ("proto", False): {"cnn": (70.92, 74.40, 57.59, 62.67),
                           "transformer": (78.07, 82.64, 68.77, 74.99)},
        ("proto", True): {"cnn": (76.98, 82.19, 66.92, 73.63),
                          "transformer": (81.27, 86.20, 73.07, 79.63)},
        ("proto-att", False): {"cnn": (72.26, 74.22, 57.28, 64.36),
                               "transformer": (80.77, 83.96, 72.78, 77.97)},
        ("proto-att", True): {"cnn": (76.93, 75.59, 67.54, 66.70),
                              "transformer": (83.38, 87.20, 76.03, 81.79)},
        ("relation", False): {"cnn": (36.33, 33.75, 24.21, 18.04),
                              "transformer": (51.22, 55.47, 36.98, 39.89)},
        ("relation", True): {"cnn": (37.86, 38.52, 25.99, 23.47),
                             "transformer": (54.74, 56.60, 39.74, 41.69)},
    }
    settings = ((5, 5), (5, 10), (10, 5), (10, 10))
    for (head, lolos), encoders in main_table.items():
        for encoder, values in encoders.items():
            for (n, k), acc in zip(settings, values):
                REFERENCE_ACCURACIES[(head, encoder, n, k, lolos, 0.0)] = acc
    noise_table = {
        (0.2, False): (70.08, 59.55), (0.2, True): (74.61, 64.66),
        (0.3, False): (67.38, 57.08), (0.3, True): (72.45, 62.65),
        (0.5, False): (60.50, 50.67), (0.5, True): (65.29, 55.21),
    }
    for (rate, lolos), (acc55, acc1010) in noise_table.items():
        REFERENCE_ACCURACIES[("proto-att", "transformer", 5, 5, lolos, rate)] = acc55
        REFERENCE_ACCURACIES[("proto-att", "transformer", 10, 10, lolos, rate)] = acc1010


_fill_references()

REFERENCE_NOTE = "reference (not reproducible: licensed data)"


@dataclass(frozen=True)
class EvalReport:
    n_way: int
    k_shot: int
    episodes_evaluated: int
    mean_accuracy: float
    ci95_half_width: float
    per_episode: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_episode", tuple(self.per_episode))


def evaluate(model, corpus, spec, episodes=DEFAULT_EVAL_EPISODES, seed=0):
    """Mean episodic accuracy with a normal-approximation 95% interval."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    accs = []
    for _ in range(episodes):
        episode = sample_episode(corpus, spec, rng)
        accs.append(_episode_accuracy(model, episode))
    accs = np.array(accs)
    mean = float(accs.mean()) if episodes else 0.0
    if episodes > 1:
        stderr = float(accs.std(ddof=1)) / math.sqrt(episodes)
    else:
        stderr = 0.0
    return EvalReport(
        n_way=spec.n_way, k_shot=spec.k_shot, episodes_evaluated=episodes,
        mean_accuracy=mean, ci95_half_width=1.96 * stderr,
        per_episode=accs.tolist())


# ---------------------------------------------------------------------------
# experiment grids


@dataclass(frozen=True)
class GridCell:
    head: str
    encoder: str
    n_way: int
    k_shot: int
    lolos_enabled: bool
    noise_rate: float = 0.0

    @property
    def key(self):
        return (self.head, self.encoder, self.n_way, self.k_shot,
                self.lolos_enabled, self.noise_rate)


@dataclass
class ExperimentGrid:
    cells: list = field(default_factory=list)  # (GridCell, EvalReport|None, error|None)

    def add(self, cell, report=None, error=None):
        if any(c.key == cell.key for c, _, _ in self.cells):
            raise ConfigurationError(f"duplicate grid cell {cell.key}")
        self.cells.append((cell, report, error))


def run_grid(train_corpus, dev_corpus, test_corpus, cells, train_config,
             encoder_overrides=None, eval_episodes=DEFAULT_EVAL_EPISODES,
             q_query=5, seed=0):
    """Train and evaluate every grid cell; per-cell failures are recorded.

    ``cells`` is a list of GridCell. Each cell trains its own model from
    scratch with the shared TrainConfig (lambda zeroed when the cell has
    the auxiliary loss disabled, noise_rate taken from the cell).
    """
    # imported here to keep evaluation importable without the training stack
    from dataclasses import replace

    from .corpus import build_vocabulary, random_embeddings
    from .model import EncoderConfig, FewShotModel, HeadConfig, init_params
    from .training import train

    grid = ExperimentGrid()
    full_vocab_corpus = type(train_corpus)(
        train_corpus.examples + dev_corpus.examples + test_corpus.examples)
    vocab = build_vocabulary(full_vocab_corpus)
    for idx, cell in enumerate(cells):
        try:
            enc_kwargs = dict(encoder_overrides or {})
            enc_kwargs["kind"] = cell.encoder
            encoder = EncoderConfig(**enc_kwargs)
            head = HeadConfig.from_name(cell.head)
            cfg = replace(train_config,
                          lam=train_config.lam if cell.lolos_enabled else 0.0,
                          noise_rate=cell.noise_rate)
            rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
            embeddings = random_embeddings(
                vocab, dim=encoder.word_dim, pos_dim=encoder.pos_dim,
                max_pos_dist=encoder.max_pos_dist, rng=rng)
            params = init_params(encoder, head, embeddings, rng)
            model = FewShotModel(vocab, encoder, head, params)
            spec = EpisodeSpec(n_way=cell.n_way, k_shot=cell.k_shot,
                               q_query=q_query)
            result = train(train_corpus, dev_corpus, model, spec, cfg)
            report = evaluate(result.model, test_corpus, spec,
                              episodes=eval_episodes, seed=seed)
            grid.add(cell, report=report)
        except Exception as e:  # cell failures must not abort the grid
            grid.add(cell, error=f"{type(e).__name__}: {e}")
    return grid


# ---------------------------------------------------------------------------
# rendering


def grid_to_json(grid, include_paper_refs=False):
    cells = []
    for cell, report, error in grid.cells:
        entry = {"cell": asdict(cell)}
        if report is not None:
            entry["report"] = {
                "n_way": report.n_way,
                "k_shot": report.k_shot,
                "episodes_evaluated": report.episodes_evaluated,
                "mean_accuracy": report.mean_accuracy,
                "ci95_half_width": report.ci95_half_width,
                "per_episode": list(report.per_episode),
            }
        if error is not None:
            entry["error"] = error
        if include_paper_refs:
            ref = REFERENCE_ACCURACIES.get(cell.key)
            if ref is not None:
                entry["reference_accuracy"] = ref
                entry["reference_note"] = REFERENCE_NOTE
        cells.append(entry)
    return {"cells": cells}


def grid_from_json(doc):
    grid = ExperimentGrid()
    for entry in doc["cells"]:
        cell = GridCell(**entry["cell"])
        report = None
        if "report" in entry:
            r = entry["report"]
            report = EvalReport(
                n_way=r["n_way"], k_shot=r["k_shot"],
                episodes_evaluated=r["episodes_evaluated"],
                mean_accuracy=r["mean_accuracy"],
                ci95_half_width=r["ci95_half_width"],
                per_episode=r["per_episode"])
        grid.add(cell, report=report, error=entry.get("error"))
    return grid


def render_report(grid, include_paper_refs=False):
    """Aligned text table plus the machine-readable JSON document."""
    doc = grid_to_json(grid, include_paper_refs=include_paper_refs)
    headers = ["head", "encoder", "setting", "lolos", "noise", "accuracy", "ci95"]
    if include_paper_refs:
        headers.append("reference")
    rows = []
    for entry in doc["cells"]:
        c = entry["cell"]
        if "report" in entry:
            acc = f"{entry['report']['mean_accuracy'] * 100:.2f}"
            ci = f"±{entry['report']['ci95_half_width'] * 100:.2f}"
        else:
            acc, ci = "ERROR", entry.get("error", "")[:40]
        row = [c["head"], c["encoder"], f"{c['n_way']}w{c['k_shot']}s",
               "on" if c["lolos_enabled"] else "off",
               f"{c['noise_rate']:.0%}", acc, ci]
        if include_paper_refs:
            ref = entry.get("reference_accuracy")
            row.append(f"{ref:.2f} [{REFERENCE_NOTE}]" if ref is not None else "")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows)
    return "\n".join(lines), doc


def save_report(path, grid, include_paper_refs=False):
    text, doc = render_report(grid, include_paper_refs=include_paper_refs)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    return text
