"""Seed-averaged ablation experiments on synthetic corpora with a planted signal."""

from __future__ import annotations

import dataclasses
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .synthetic import GeneratorConfig, generate_synthetic_corpus
from .training import TrainConfig, run_variants

# Desk-scale settings shared by every ablation experiment.
EXPERIMENT_MODEL = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, max_len=160, context_window=1, dropout=0.1)
EXPERIMENT_TRAIN = TrainConfig(
    stage1_epochs=4,
    stage2_epochs=2,
    batch_size=32,
    learning_rate=2e-3,
    alpha=0.5,
    k=3,
)


@dataclass(frozen=True)
class Experiment:
    name: str
    generator: GeneratorConfig
    variants: dict[str, dict]


EXPERIMENTS = {
    "hist": Experiment(
        "hist",
        GeneratorConfig(n_dialogues=2000, hist=0.8, exp=0.0, lex=0.2),
        {"full": {}, "no_hist": {"use_hist_prompt": False}},
    ),
    "exp": Experiment(
        "exp",
        GeneratorConfig(n_dialogues=2000, hist=0.0, exp=0.8, lex=0.2),
        {"full": {}, "no_exp": {"use_exp_prompt": False}},
    ),
    "lex": Experiment(
        "lex",
        GeneratorConfig(n_dialogues=2000, hist=0.0, exp=0.2, lex=0.8, lex_eval_heldout_only=True),
        {
            "gloss": {},
            "special_token": {"paraphrase_target": "special_token"},
            "no_para": {"use_label_para": False},
        },
    ),
    "fusion": Experiment(
        "fusion",
        GeneratorConfig(n_dialogues=2000, hist=0.4, exp=0.3, lex=0.3),
        {"prompt": {}, "add": {"fusion_mode": "add"}, "concat": {"fusion_mode": "concat"}},
    ),
}


@dataclass
class ExperimentResult:
    name: str
    seeds: list[int]
    scores: dict[str, list[float]] = field(default_factory=dict)  # variant -> test weighted-F1 per seed
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.scores[variant]))

    def mean_gap(self, a: str, b: str) -> float:
        return float(np.mean(np.subtract(self.scores[a], self.scores[b])))

    def table(self) -> str:
        head = f"{'variant':<14}" + "".join(f"{'seed ' + str(s):>10}" for s in self.seeds) + f"{'mean':>10}"
        lines = [head]
        for v, vals in self.scores.items():
            lines.append(f"{v:<14}" + "".join(f"{100 * x:>10.2f}" for x in vals) + f"{100 * self.mean(v):>10.2f}")
        return "\n".join(lines)


def run_experiment(
    name: str,
    seeds: Sequence[int] = (0, 1, 2),
    model: ModelConfig = EXPERIMENT_MODEL,
    train: TrainConfig = EXPERIMENT_TRAIN,
    variants: Sequence[str] | None = None,
) -> ExperimentResult:
    """Weighted-F1 (test split) of each variant; the stage-1 model is shared across variants of one seed."""
    exp = EXPERIMENTS[name]
    chosen = {k: v for k, v in exp.variants.items() if variants is None or k in variants}
    result = ExperimentResult(name, list(seeds), {k: [] for k in chosen})
    start = time.perf_counter()
    for seed in seeds:
        corpus = generate_synthetic_corpus(exp.generator, seed)
        cfg = dataclasses.replace(train, seed=seed, labels=exp.generator.labels)
        reports = run_variants(corpus.train, corpus.dev, corpus.test, model, cfg, chosen)
        for v in chosen:
            result.scores[v].append(reports[v]["test"].weighted_f1)
    result.seconds = time.perf_counter() - start
    return result
