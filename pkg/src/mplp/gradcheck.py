"""Finite-difference checks over the differentiable stack, from single ops to the full stage-2 loss."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import GlossTable, Vocabulary, make_conversation
from .model import ModelConfig, Seq2Seq
from .prompts import (
    RepresentationCache,
    build_experience_prompt,
    build_history_prompt,
    init_experience_params,
    init_history_params,
)
from .retrieval import BM25Index
from .training import (
    Example,
    MPLPModel,
    TrainConfig,
    build_examples,
    cache_representations,
    init_stage2,
    retrieve_similar,
    stage1_loss,
    stage2_loss,
)

TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def toy_dialogues():
    """A 3-utterance target dialogue plus two short ones so retrieval has candidates."""
    target = make_conversation(
        "toy0",
        [
            ("alice", "i got the job today", "happiness"),
            ("bob", "wow that is great news", "surprise"),
            ("alice", "i am so happy about it", "happiness"),
        ],
    )
    others = [
        make_conversation("toy1", [("carol", "the job is gone", "sadness"), ("dave", "that is bad news", "sadness")]),
        make_conversation("toy2", [("erin", "so happy for you", "happiness"), ("frank", "great job", "happiness")]),
    ]
    return target, others


@dataclass
class ToySetup:
    state: MPLPModel
    examples: list[Example]
    cache: RepresentationCache
    similar: dict[str, tuple[str, ...]]
    cfg: TrainConfig
    vocab: Vocabulary


def full_stage2_setup(k: int = 2, d_model: int = 8, seed: int = 0, **overrides) -> ToySetup:
    """Tiny model, cache, index and examples for differentiating the whole stage-2 loss."""
    target, others = toy_dialogues()
    train = [target, *others]
    cfg = TrainConfig(**{"alpha": 0.5, **overrides, "k": k, "seed": seed})
    glosses = GlossTable.from_tsv().restricted(cfg.label_set)
    vocab = Vocabulary.build(train, glosses, cfg.label_set)
    mcfg = ModelConfig(d_model=d_model, n_layers=1, n_heads=2, d_ff=2 * d_model, max_len=64, context_window=2, dropout=0.0)
    base = Seq2Seq(mcfg, len(vocab), len(cfg.label_set), seed=seed)
    cache = cache_representations(base, train, vocab, cfg.label_set)
    index = BM25Index.build([(u.utterance_id, u.tokens) for c in train for u in c.utterances])
    state = init_stage2(base, cfg)
    examples = build_examples([target], vocab, cfg.label_set, mcfg, cfg, glosses)
    similar = retrieve_similar(examples, cfg, index, cache)
    return ToySetup(state, examples, cache, similar, cfg, vocab)


def check_full_stage2(k: int = 2, max_coords: int = 6, seed: int = 0, **overrides) -> CheckResult:
    toy = full_stage2_setup(k=k, seed=seed, **overrides)
    params = list(toy.state.params().values())

    def f():
        return stage2_loss(toy.state, toy.examples, toy.cache, toy.similar, toy.cfg, training=False)

    err = nx.finite_difference_check(f, params, eps=1e-4, max_coords=max_coords, rng=np.random.default_rng(seed))
    return CheckResult(f"stage2 loss (k={k}, fusion={toy.cfg.fusion_mode})", err)


def check_stage1(max_coords: int = 6, seed: int = 0) -> CheckResult:
    toy = full_stage2_setup(seed=seed)
    model = toy.state.model
    examples = build_examples([toy_dialogues()[0]], toy.vocab, toy.cfg.label_set, model.config)
    err = nx.finite_difference_check(lambda: stage1_loss(model, examples), model.parameters(), eps=1e-4,
                                     max_coords=max_coords, rng=np.random.default_rng(seed))
    return CheckResult("stage1 loss", err)


def check_prompts(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    d, b, steps, k = 5, 3, 4, 3
    p = {**init_history_params(d, rng), **init_experience_params(d, rng)}
    hist = rng.normal(size=(b, steps, d))
    mask = np.array([[True] * 4, [True, True, False, False], [False] * 4])
    same = rng.random((b, steps)) < 0.5
    h_t = rng.normal(size=(b, d))
    sims = rng.normal(size=(b, k, d))
    w = rng.normal(size=(b, d))

    def f():
        hv = build_history_prompt(hist, same, mask, h_t, p).vector
        ev = build_experience_prompt(sims, h_t, p).vector
        return nx.sum(nx.mul_const(nx.tanh(nx.add(hv, ev)), w))

    return CheckResult("history and experience prompts", nx.finite_difference_check(f, list(p.values()), eps=1e-4))


SCALES: dict[str, list[Callable[[], CheckResult]]] = {
    "tiny": [check_prompts, lambda: check_full_stage2(k=2, max_coords=3)],
    "small": [
        check_prompts,
        check_stage1,
        lambda: check_full_stage2(k=2),
        lambda: check_full_stage2(k=1, fusion_mode="add"),
        lambda: check_full_stage2(k=2, fusion_mode="concat"),
    ],
}


def run_suite(scale: str = "small") -> list[CheckResult]:
    if scale not in SCALES:
        raise KeyError(f"unknown gradcheck scale {scale!r}; choose from {sorted(SCALES)}")
    return [check() for check in SCALES[scale]]
