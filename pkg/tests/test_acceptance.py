"""Acceptance gate: each test checks one numbered criterion at its stated tolerance.

The ablation experiments (criteria 4 to 7) train real models on 2,000-dialogue
synthetic corpora and take several minutes each on a CPU.
"""

import math
import time
import warnings
from collections import Counter

import numpy as np

from mplp.corpus import IEMOCAP_LABELS, MELD_LABELS
from mplp.experiments import run_experiment
from mplp.gradcheck import check_full_stage2, full_stage2_setup, toy_dialogues
from mplp.metrics import micro_f1_excluding_neutral, weighted_f1
from mplp.model import ModelConfig, model_from_checkpoint, save_checkpoint
from mplp.prompts import build_experience_prompt, build_history_prompt
from mplp.retrieval import BM25Index, CosineIndex, cosine_similar, top_k_similar
from mplp.synthetic import GeneratorConfig, generate_synthetic_corpus
from mplp.training import TrainConfig, build_examples, run_pipeline, stage1_loss, stage2_loss


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_full_loss_gradient(criterion):
    start = time.perf_counter()
    result = check_full_stage2(k=2, max_coords=8)
    seconds = time.perf_counter() - start
    ok = result.max_rel_error < 1e-3 and seconds < 60
    criterion(1, ok, f"stage-2 loss gradcheck, max rel error {result.max_rel_error:.2e} (< 1e-3), {seconds:.1f}s (< 60s)")
    assert ok


# -- 2 -----------------------------------------------------------------------


def brute_bm25(docs, query, k1=1.5, b=0.75):
    """Score every document directly from its token list."""
    n = len(docs)
    avg = sum(len(t) for _, t in docs) / n
    df = Counter(term for _, toks in docs for term in set(toks))
    out = []
    for uid, toks in docs:
        tf = Counter(toks)
        s = 0.0
        for term, qtf in Counter(query).items():
            f = tf[term]
            if f:
                idf = math.log((n - df[term] + 0.5) / (df[term] + 0.5) + 1.0)
                s += qtf * idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(toks) / avg))
        out.append((uid, s))
    return out


def oracle_top_k(scored, k, exclude):
    ranked = sorted(((uid, s) for uid, s in scored if uid != exclude), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def test_criterion_2_retrieval_matches_brute_force(criterion):
    corpus = generate_synthetic_corpus(GeneratorConfig(n_dialogues=300), 0)
    docs = [(u.utterance_id, u.tokens) for c in corpus.train for u in c.utterances]
    rng = np.random.default_rng(0)
    picks = rng.choice(len(docs), size=200, replace=False)
    vectors = rng.normal(size=(len(docs), 16))
    k = 5

    # the timed part is the system under test: both index builds and all 400 queries
    start = time.perf_counter()
    index = BM25Index.build(docs)
    cos = CosineIndex([d[0] for d in docs], vectors)
    got_bm25 = [top_k_similar(index, docs[i][1], k, query_id=docs[i][0]) for i in picks]
    got_cos = [cosine_similar(cos, vectors[i], k, query_id=docs[i][0]) for i in picks]
    seconds = time.perf_counter() - start

    bad = []
    for i, gb, gc in zip(picks, got_bm25, got_cos):
        uid, toks = docs[i]
        q = vectors[i]
        scored = [(d[0], float(np.dot(v, q) / (np.sqrt(np.dot(v, v)) * np.sqrt(np.dot(q, q))))) for d, v in zip(docs, vectors)]
        for name, got, ref in (("bm25", gb, oracle_top_k(brute_bm25(docs, toks), k, uid)),
                               ("cosine", gc, oracle_top_k(scored, k, uid))):
            if got.ids != [r[0] for r in ref] or any(abs(a - r[1]) > 1e-10 for a, r in zip(got.scores, ref)):
                bad.append((name, uid))
    ok = not bad and seconds < 10
    criterion(2, ok, f"200 queries x (BM25, cosine): {len(bad)} mismatches, retrieval {seconds:.2f}s (< 10s)")
    assert ok, bad[:5]


# -- 3 -----------------------------------------------------------------------


def confusion_oracle(pred, gold, n, neutral):
    cm = [[0] * n for _ in range(n)]
    for p, g in zip(pred, gold):
        cm[g][p] += 1
    f1, support = [], []
    for c in range(n):
        tp = cm[c][c]
        row = sum(cm[c])
        col = sum(cm[r][c] for r in range(n))
        f1.append(2 * tp / (row + col) if row + col else 0.0)
        support.append(row)
    w = sum(f * s for f, s in zip(f1, support)) / sum(support)
    tp = sum(cm[c][c] for c in range(n) if c != neutral)
    pred_pos = sum(cm[r][c] for r in range(n) for c in range(n) if c != neutral)
    gold_pos = sum(cm[r][c] for r in range(n) if r != neutral for c in range(n))
    micro = 2 * tp / (pred_pos + gold_pos) if pred_pos + gold_pos else 0.0
    return w, micro


def test_criterion_3_metrics_match_confusion_oracle(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for case in range(1000):
        labels = MELD_LABELS if case % 2 else IEMOCAP_LABELS
        n = int(rng.integers(1, 200))
        gold = rng.integers(0, len(labels), n)
        # mix of random and mostly-correct predictors
        pred = np.where(rng.random(n) < rng.random(), gold, rng.integers(0, len(labels), n))
        w, micro = confusion_oracle(pred.tolist(), gold.tolist(), len(labels), labels.neutral_index)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-neutral cases warn by design
            got_w = weighted_f1(pred, gold, labels)
            got_m = micro_f1_excluding_neutral(pred, gold, labels)
        worst = max(worst, abs(got_w - w), abs(got_m - micro))
    ok = worst <= 1e-12
    criterion(3, ok, f"1000 random cases, max abs deviation {worst:.1e} (<= 1e-12)")
    assert ok


# -- 4 to 7 --------------------------------------------------------------------


def _report(result):
    print(f"\n{result.name} experiment ({result.seconds:.0f}s), test weighted-F1 x100\n{result.table()}")


def test_criterion_4_history_prompt_ablation(criterion):
    result = run_experiment("hist")
    _report(result)
    gap = 100 * result.mean_gap("full", "no_hist")
    ok = gap >= 3.0 and result.seconds < 1800
    criterion(4, ok, f"full - no_hist = {gap:+.2f} points (>= 3), {result.seconds / 60:.1f} min (< 30)")
    assert ok


def test_criterion_5_experience_prompt_ablation(criterion):
    result = run_experiment("exp")
    _report(result)
    gap = 100 * result.mean_gap("full", "no_exp")
    ok = gap >= 3.0
    criterion(5, ok, f"full - no_exp = {gap:+.2f} points (>= 3)")
    assert ok


def test_criterion_6_paraphrase_effect(criterion):
    result = run_experiment("lex")
    _report(result)
    gloss, special = result.mean("gloss"), result.mean("special_token")
    gap = 100 * result.mean_gap("gloss", "no_para")
    ok = gloss >= special and gap >= 1.0
    criterion(6, ok, f"gloss {100 * gloss:.2f} vs special token {100 * special:.2f} (>=), "
                     f"gloss - no_para = {gap:+.2f} points (>= 1)")
    assert ok


def test_criterion_7_prompt_beats_feature_fusion(criterion):
    result = run_experiment("fusion")
    _report(result)

    def ordered(r):
        return r.mean("prompt") >= r.mean("add") and r.mean("prompt") >= r.mean("concat")

    detail = "3 seeds: " + ", ".join(f"{v} {100 * result.mean(v):.2f}" for v in result.scores)
    ok = ordered(result)
    if not ok:
        # waiver path: an inversion at 3 seeds must be re-examined on 5 seeds
        wide = run_experiment("fusion", seeds=(0, 1, 2, 3, 4))
        _report(wide)
        ok = ordered(wide)
        detail += "; inverted, 5-seed confirmation: " + ", ".join(f"{v} {100 * wide.mean(v):.2f}" for v in wide.scores)
    criterion(7, ok, detail)
    assert ok


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_reductions(criterion):
    # all ablations off and alpha = 0 against the stage-1 loss of the same weights
    off = full_stage2_setup(k=2, use_hist_prompt=False, use_exp_prompt=False, alpha=0.0, use_sep_prefix=False)
    s1 = build_examples([toy_dialogues()[0]], off.vocab, off.cfg.label_set, off.state.model.config)
    gap = abs(stage2_loss(off.state, off.examples, off.cache, off.similar, off.cfg).item()
              - stage1_loss(off.state.model, s1).item())

    full = full_stage2_setup(k=1)
    first = full.examples[0]
    h0 = full.cache.matrix([first.uid])
    d = h0.shape[1]
    hist = build_history_prompt(np.zeros((1, 0, d)), np.zeros((1, 0), bool), np.zeros((1, 0), bool), h0, full.state.extra)
    hist_exact = np.array_equal(hist.vector.data, h0)

    e = full.examples[2]
    d0 = full.cache.matrix(full.similar[e.uid])
    exp = build_experience_prompt(d0[None], full.cache.matrix([e.uid]), full.state.extra)
    exp_exact = np.array_equal(exp.influence.data[0], d0[0])

    ok = gap <= 1e-9 and hist_exact and exp_exact
    criterion(8, ok, f"stage-2/stage-1 loss gap {gap:.1e} (<= 1e-9), t=0 history prompt == h_0: {hist_exact}, "
                     f"k=1 influence == d_0: {exp_exact}")
    assert ok


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_reproducibility(criterion, tmp_path):
    corpus = generate_synthetic_corpus(GeneratorConfig(n_dialogues=40), 9)
    mcfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=96, context_window=1, dropout=0.1)
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=16, learning_rate=2e-3, k=2, seed=9)
    runs = []
    for name in ("a", "b"):
        run_pipeline(corpus.train, corpus.dev, corpus.test, mcfg, cfg, tmp_path / name)
        runs.append({s: (tmp_path / name / "reports" / f"{s}.json").read_bytes() for s in ("dev", "test")})
    same_reports = runs[0] == runs[1]
    same_weights = (tmp_path / "a" / "stage2.npz").read_bytes() == (tmp_path / "b" / "stage2.npz").read_bytes()

    model, vocab, labels, rest, extra = model_from_checkpoint(tmp_path / "a" / "stage2.npz")
    from mplp.numerics import Tensor

    params = {**model.params, **{k: Tensor(v) for k, v in rest.items()}}
    save_checkpoint(tmp_path / "again.npz", params, model.config, vocab, labels, extra)
    round_trip = (tmp_path / "again.npz").read_bytes() == (tmp_path / "a" / "stage2.npz").read_bytes()

    ok = same_reports and same_weights and round_trip
    criterion(9, ok, f"identical reports: {same_reports}, identical checkpoints: {same_weights}, "
                     f"save/load round trip bitwise: {round_trip}")
    assert ok

