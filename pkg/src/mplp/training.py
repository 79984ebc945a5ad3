"""Two-stage training: stage-1 fine-tuning, representation caching, stage-2 prompts with label paraphrasing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .configs import ConfigError, format_flat_config
from .corpus import (
    EOS,
    LABEL_SETS,
    SEP,
    Conversation,
    EmotionLabelSet,
    GlossTable,
    Vocabulary,
    label_token,
    speaker_token,
    tokenize,
)
from .metrics import confusion_matrix, micro_f1_from_confusion, per_class_f1, weighted_f1_from_confusion
from .model import (
    MASK_POSITION,
    ModelConfig,
    Seq2Seq,
    build_context,
    classify,
    decoder_prompt,
    lm_generate_loss,
    model_from_checkpoint,
    new_head,
    pad_batch,
    save_checkpoint,
)
from .numerics import Tensor
from .prompts import (
    RepresentationCache,
    build_experience_prompt,
    build_history_prompt,
    init_experience_params,
    init_history_params,
    prompt_token_ids,
)
from .retrieval import BM25Index, CosineIndex, cosine_similar, top_k_similar

log = logging.getLogger("mplp")

FUSION_MODES = ("prompt", "add", "concat")
PARAPHRASE_TARGETS = ("gloss", "adjective", "special_token")
RETRIEVERS = ("bm25", "cosine")
PROMPT_SLOT = 3  # the injected vector follows [s_t, may, feel]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 3
    stage2_epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 2e-5
    stage2_learning_rate: float = 0.0  # 0 means reuse learning_rate
    warmup: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0  # 0 disables clipping
    alpha: float = 0.5
    k: int = 3
    retriever: str = "bm25"
    use_hist_prompt: bool = True
    use_exp_prompt: bool = True
    use_label_para: bool = True
    fusion_mode: str = "prompt"
    paraphrase_target: str = "gloss"
    use_sep_prefix: bool = True
    refresh_cache_every_epoch: bool = False
    labels: str = "meld"
    eval_batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 1 <= self.k:
            raise ConfigError("k must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.paraphrase_target not in PARAPHRASE_TARGETS:
            raise ConfigError(f"paraphrase_target must be one of {PARAPHRASE_TARGETS}")
        if self.retriever not in RETRIEVERS:
            raise ConfigError(f"retriever must be one of {RETRIEVERS}")
        if self.labels not in LABEL_SETS:
            raise ConfigError(f"unknown label set {self.labels!r}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0.0 <= self.warmup <= 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def label_set(self) -> EmotionLabelSet:
        return LABEL_SETS[self.labels]

    @property
    def lr2(self) -> float:
        return self.stage2_learning_rate or self.learning_rate

    @property
    def generates(self) -> bool:
        return self.use_label_para and self.alpha > 0


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adam with decoupled weight decay, linear warmup then linear decay to zero.

    Decay skips 1-D tensors (biases and norm gains).
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        total_steps: int,
        warmup: float = 0.1,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.total = max(1, total_steps)
        self.warmup_steps = max(1, int(round(warmup * self.total))) if warmup > 0 else 0
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def lr_at(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr * max(0.0, (self.total - step) / max(1, self.total - self.warmup_steps))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at step {self.t}")
        if self.max_grad_norm > 0 and norm > self.max_grad_norm:
            grads = [g * (self.max_grad_norm / norm) for g in grads]
        lr = self.lr_at(self.t)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim > 1:
                update = update + self.wd * p.data
            p.data = p.data - lr * update
        return norm


# ---------------------------------------------------------------------------
# examples


@dataclass(frozen=True)
class Example:
    uid: str
    label: int
    speaker: str
    enc: tuple[int, ...]  # encoder ids; prompt slots hold a placeholder id
    dec: tuple[int, ...]  # P_t
    slots: tuple[int, ...] = ()
    history: tuple[str, ...] = ()
    same_speaker: tuple[bool, ...] = ()
    target: tuple[int, ...] = ()  # [s_t, feels] + paraphrase + EOS
    query: tuple[str, ...] = ()


def paraphrase_tokens(label: str, glosses: GlossTable, mode: str) -> list[str]:
    if label not in glosses:
        raise ConfigError(f"no gloss entry for label {label!r}")
    if mode == "gloss":
        return list(glosses[label].gloss)
    if mode == "adjective":
        return tokenize(glosses[label].adjective)
    return [label_token(label)]


def encoder_prefix(cfg: TrainConfig | None) -> tuple[int, list[int]]:
    """(prefix length, slot positions) of the stage-2 encoder input."""
    if cfg is None:
        return 0, []
    slots = []
    n = 0
    if cfg.fusion_mode == "prompt":
        for on in (cfg.use_hist_prompt, cfg.use_exp_prompt):
            if on:
                slots.append(n + PROMPT_SLOT)
                n += PROMPT_SLOT + 1
    return n + (1 if cfg.use_sep_prefix else 0), slots


def build_examples(
    convs: Sequence[Conversation],
    vocab: Vocabulary,
    labels: EmotionLabelSet,
    mcfg: ModelConfig,
    cfg: TrainConfig | None = None,
    glosses: GlossTable | None = None,
) -> list[Example]:
    """Stage-1 examples when ``cfg`` is None, otherwise stage-2 examples for that variant."""
    n_prefix, slots = encoder_prefix(cfg)
    budget = mcfg.max_len - n_prefix
    out = []
    for conv in convs:
        for t, u in enumerate(conv.utterances):
            ctx = vocab.encode(build_context(conv, t, mcfg.context_window, budget))
            dec = tuple(vocab.encode(decoder_prompt(u.speaker)))
            if cfg is None:
                out.append(Example(u.utterance_id, labels.index(u.label), u.speaker, tuple(ctx), dec))
                continue
            prefix: list[int] = []
            if cfg.fusion_mode == "prompt":
                for on in (cfg.use_hist_prompt, cfg.use_exp_prompt):
                    if on:
                        prefix += prompt_token_ids(vocab, u.speaker)
            if cfg.use_sep_prefix:
                prefix.append(vocab.id(SEP))
            target: tuple[int, ...] = ()
            if cfg.use_label_para:
                if glosses is None:
                    raise ConfigError("label paraphrasing needs a gloss table")
                para = paraphrase_tokens(u.label, glosses, cfg.paraphrase_target)
                target = tuple(vocab.encode([speaker_token(u.speaker), "feels", *para, EOS]))
            out.append(
                Example(
                    u.utterance_id,
                    labels.index(u.label),
                    u.speaker,
                    tuple(prefix + ctx),
                    dec,
                    tuple(slots),
                    tuple(v.utterance_id for v in conv.utterances[:t]),
                    tuple(v.speaker == u.speaker for v in conv.utterances[:t]),
                    target,
                    tuple(u.tokens),
                )
            )
    return out


def batches(n: int, size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + size] for i in range(0, n, size)]


# ---------------------------------------------------------------------------
# stage 1


def stage1_logits(model: Seq2Seq, batch: Sequence[Example], training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """(logits, h_t) of the stage-1 path: encode C_t, decode P_t, classify the MASK state."""
    enc_ids, enc_mask = pad_batch([e.enc for e in batch])
    dec_ids, dec_mask = pad_batch([e.dec for e in batch])
    enc = model.encode(enc_ids, enc_mask, training=training, rng=rng)
    hidden = model.decode(dec_ids, dec_mask, enc, enc_mask, training=training, rng=rng)
    h = nx.take(hidden, (slice(None), MASK_POSITION))
    return classify(h, model.params, "head"), h


def stage1_loss(model: Seq2Seq, batch: Sequence[Example], training: bool = False, rng=None) -> Tensor:
    logits, _ = stage1_logits(model, batch, training, rng)
    return nx.cross_entropy(logits, np.array([e.label for e in batch]))


def _check_loss(loss: Tensor, stage: int, epoch: int, step: int) -> None:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"stage {stage}: non-finite loss {value} at epoch {epoch}, step {step}")


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()


def _fit(
    params: dict[str, Tensor],
    n_examples: int,
    loss_fn: Callable[[np.ndarray, np.random.Generator], Tensor],
    epochs: int,
    lr: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
    dev_metric: Callable[[], float] | None,
    stage: int,
    on_epoch_end: Callable[[int], None] | None = None,
) -> list[dict]:
    """Generic minibatch loop; keeps the parameters of the best dev epoch."""
    steps_per_epoch = math.ceil(n_examples / cfg.batch_size)
    plist = list(params.values())
    opt = AdamW(plist, lr, steps_per_epoch * epochs, cfg.warmup, cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
    history = []
    best, best_snap = -math.inf, None
    for epoch in range(epochs):
        start = time.perf_counter()
        total = 0.0
        for step, idx in enumerate(batches(n_examples, cfg.batch_size, rng)):
            loss = loss_fn(idx, rng)
            _check_loss(loss, stage, epoch, step)
            nx.zero_grad(plist)
            nx.backward(loss, plist)
            opt.step()
            total += float(loss.data) * len(idx)
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        metric = dev_metric() if dev_metric is not None else float("nan")
        entry = {"stage": stage, "epoch": epoch, "train_loss": total / max(1, n_examples), "dev_metric": metric,
                 "seconds": round(time.perf_counter() - start, 3)}
        log.info("stage %d epoch %d loss %.4f dev %.4f", stage, epoch, entry["train_loss"], metric)
        history.append(entry)
        if dev_metric is None or metric > best:
            best, best_snap = metric, _snapshot(params)
    if best_snap is not None:
        _restore(params, best_snap)
    return history


def predict_stage1(model: Seq2Seq, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    out = []
    for idx in batches(len(examples), batch_size):
        logits, _ = stage1_logits(model, [examples[i] for i in idx])
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _weighted_f1(pred: np.ndarray, examples: Sequence[Example], labels: EmotionLabelSet) -> float:
    if not examples:
        return float("nan")
    return weighted_f1_from_confusion(confusion_matrix(list(pred), [e.label for e in examples], labels))


def train_stage1(
    train: Sequence[Conversation],
    dev: Sequence[Conversation],
    vocab: Vocabulary,
    mcfg: ModelConfig,
    cfg: TrainConfig,
) -> tuple[Seq2Seq, list[dict]]:
    """Fine-tune the base model on P_t mask classification; best dev epoch kept."""
    cfg.validate()
    labels = cfg.label_set
    model = Seq2Seq(mcfg, len(vocab), len(labels), seed=cfg.seed)
    tr = build_examples(train, vocab, labels, mcfg)
    dv = build_examples(dev, vocab, labels, mcfg)
    rng = np.random.default_rng([cfg.seed, 1])

    def loss_fn(idx, r):
        return stage1_loss(model, [tr[i] for i in idx], training=True, rng=r)

    def dev_metric():
        return _weighted_f1(predict_stage1(model, dv, cfg.eval_batch_size), dv, labels)

    history = _fit(model.params, len(tr), loss_fn, cfg.stage1_epochs, cfg.learning_rate, cfg, rng,
                   dev_metric if dv else None, stage=1)
    return model, history


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


def cache_representations(
    model: Seq2Seq,
    convs: Sequence[Conversation],
    vocab: Vocabulary,
    labels: EmotionLabelSet,
    batch_size: int = 64,
) -> RepresentationCache:
    """Stage-1 mask vectors for every utterance in ``convs``, dropout off."""
    examples = build_examples(convs, vocab, labels, model.config)
    rows = []
    for idx in batches(len(examples), batch_size):
        _, h = stage1_logits(model, [examples[i] for i in idx])
        rows.append(h.data)
    vectors = np.concatenate(rows) if rows else np.zeros((0, model.config.d_model))
    return RepresentationCache([e.uid for e in examples], vectors, params_digest(model.params))


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class MPLPModel:
    """Stage-1 weights plus the stage-2 prompt parameters (and the wider head for concat fusion)."""

    model: Seq2Seq
    extra: dict[str, Tensor] = field(default_factory=dict)

    def params(self) -> dict[str, Tensor]:
        return {**self.model.params, **self.extra}


def clone_model(model: Seq2Seq) -> Seq2Seq:
    out = Seq2Seq(model.config, model.vocab_size, model.n_labels, seed=0)
    for name, t in model.params.items():
        out.params[name].data = t.data.copy()
    return out


def init_stage2(model: Seq2Seq, cfg: TrainConfig) -> MPLPModel:
    """Fresh prompt parameters next to a copy of the stage-1 model."""
    rng = np.random.default_rng([cfg.seed, 2])
    d = model.config.d_model
    extra: dict[str, Tensor] = {}
    if cfg.use_hist_prompt:
        extra.update(init_history_params(d, rng))
    if cfg.use_exp_prompt:
        extra.update(init_experience_params(d, rng))
    if cfg.fusion_mode == "concat":
        width = d * (1 + cfg.use_hist_prompt + cfg.use_exp_prompt)
        extra.update(new_head(width, model.n_labels, rng, "cat"))
    return MPLPModel(clone_model(model), extra)


def _history_arrays(batch: Sequence[Example], cache: RepresentationCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    steps = max(len(e.history) for e in batch)
    b, d = len(batch), cache.width
    hist = np.zeros((b, steps, d))
    same = np.zeros((b, steps), dtype=bool)
    mask = np.zeros((b, steps), dtype=bool)
    for r, e in enumerate(batch):
        n = len(e.history)
        if n:
            hist[r, :n] = cache.matrix(e.history)
            same[r, :n] = e.same_speaker
            mask[r, :n] = True
    return hist, same, mask


@dataclass
class Stage2Output:
    logits: Tensor
    gen_loss: Tensor | None
    prompt_vectors: list[Tensor]


def stage2_forward(
    state: MPLPModel,
    batch: Sequence[Example],
    cache: RepresentationCache,
    similar: dict[str, tuple[str, ...]],
    cfg: TrainConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    generate: bool = True,
) -> Stage2Output:
    """Encode I'_t once; decoder pass 1 classifies, pass 2 scores the paraphrase target."""
    model, p = state.model, state.extra
    h_t = cache.matrix([e.uid for e in batch])
    vectors: list[Tensor] = []
    if cfg.use_hist_prompt:
        hist, same, mask = _history_arrays(batch, cache)
        vectors.append(build_history_prompt(hist, same, mask, h_t, p).vector)
    if cfg.use_exp_prompt:
        sims = np.stack([cache.matrix(similar[e.uid]) for e in batch])
        vectors.append(build_experience_prompt(sims, h_t, p).vector)

    enc_ids, enc_mask = pad_batch([e.enc for e in batch])
    inject = None
    if cfg.fusion_mode == "prompt" and vectors:
        b = len(batch)
        rows = np.tile(np.arange(b), len(vectors))
        cols = np.repeat(np.asarray(batch[0].slots), b)
        inject = (rows, cols, nx.concat(vectors, axis=0))
    enc = model.encode(enc_ids, enc_mask, inject=inject, training=training, rng=rng)
    dec_ids, dec_mask = pad_batch([e.dec for e in batch])
    hidden = model.decode(dec_ids, dec_mask, enc, enc_mask, training=training, rng=rng)
    h = nx.take(hidden, (slice(None), MASK_POSITION))
    if cfg.fusion_mode == "add":
        for v in vectors:
            h = nx.add(h, v)
        logits = classify(h, model.params, "head")
    elif cfg.fusion_mode == "concat":
        logits = classify(nx.concat([h, *vectors], axis=-1), p, "cat")
    else:
        logits = classify(h, model.params, "head")

    gen = None
    if generate and cfg.generates:
        gen = lm_generate_loss(model, enc, enc_mask, [e.target for e in batch], 2, training, rng)
    return Stage2Output(logits, gen, vectors)


def stage2_loss(
    state: MPLPModel,
    batch: Sequence[Example],
    cache: RepresentationCache,
    similar: dict[str, tuple[str, ...]],
    cfg: TrainConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """L = L_CE + alpha * L_GEN over a batch."""
    out = stage2_forward(state, batch, cache, similar, cfg, training, rng)
    loss = nx.cross_entropy(out.logits, np.array([e.label for e in batch]))
    if out.gen_loss is not None:
        loss = nx.add(loss, nx.scale(out.gen_loss, cfg.alpha))
    return loss


def build_index(train: Sequence[Conversation], cfg: TrainConfig | None = None) -> BM25Index:
    docs = [(u.utterance_id, u.tokens) for c in train for u in c.utterances]
    labels = {u.utterance_id: u.label for c in train for u in c.utterances}
    return BM25Index.build(docs, labels=labels)


def retrieve_similar(
    examples: Sequence[Example],
    cfg: TrainConfig,
    index: BM25Index,
    cache: RepresentationCache,
) -> dict[str, tuple[str, ...]]:
    """Top-k training neighbours of every example; a training query never retrieves itself."""
    out: dict[str, tuple[str, ...]] = {}
    if cfg.retriever == "bm25":
        for e in examples:
            out[e.uid] = tuple(top_k_similar(index, e.query, cfg.k, query_id=e.uid).ids)
    else:
        cos = CosineIndex(index.doc_ids, cache.matrix(index.doc_ids), index.labels)
        for e in examples:
            out[e.uid] = tuple(cosine_similar(cos, cache.vector(e.uid), cfg.k, query_id=e.uid).ids)
    return out


def predict_stage2(
    state: MPLPModel,
    examples: Sequence[Example],
    cache: RepresentationCache,
    similar: dict[str, tuple[str, ...]],
    cfg: TrainConfig,
) -> np.ndarray:
    out = []
    for idx in batches(len(examples), cfg.eval_batch_size):
        res = stage2_forward(state, [examples[i] for i in idx], cache, similar, cfg, generate=False)
        out.append(np.argmax(res.logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class EvalReport:
    split: str
    n: int
    labels: list[str]
    confusion: list[list[int]]
    weighted_f1: float
    micro_f1_excluding_neutral: float
    per_class_f1: dict[str, float]
    seed: int
    config: dict

    @classmethod
    def from_predictions(cls, split: str, pred, gold, labels: EmotionLabelSet, seed: int, config: dict) -> EvalReport:
        cm = confusion_matrix(list(pred), list(gold), labels)
        return cls.from_confusion(split, cm, labels, seed, config)

    @classmethod
    def from_confusion(cls, split: str, cm: np.ndarray, labels: EmotionLabelSet, seed: int, config: dict) -> EvalReport:
        micro = micro_f1_from_confusion(cm, labels.neutral_index) if labels.neutral_index is not None else float("nan")
        return cls(
            split=split,
            n=int(cm.sum()),
            labels=list(labels.labels),
            confusion=cm.tolist(),
            weighted_f1=weighted_f1_from_confusion(cm),
            micro_f1_excluding_neutral=micro,
            per_class_f1={lab: float(f) for lab, f in zip(labels.labels, per_class_f1(cm))},
            seed=seed,
            config=config,
        )

    def consistent(self) -> bool:
        """True when the stored metrics recompute exactly from the stored confusion matrix."""
        cm = np.array(self.confusion, dtype=np.int64)
        labels = EmotionLabelSet.with_neutral(self.labels) if "neutral" in self.labels else None
        again = EvalReport.from_confusion(self.split, cm, labels or EmotionLabelSet(tuple(self.labels), None),
                                          self.seed, self.config)
        return again.to_json() == self.to_json()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Stage1Artifacts:
    model: Seq2Seq
    vocab: Vocabulary
    cache: RepresentationCache
    index: BM25Index
    glosses: GlossTable
    history: list[dict]
    conversations: list[Conversation]  # every split, in cache order


def prepare_stage1(
    train: Sequence[Conversation],
    dev: Sequence[Conversation],
    test: Sequence[Conversation],
    mcfg: ModelConfig,
    cfg: TrainConfig,
    glosses: GlossTable | None = None,
) -> Stage1Artifacts:
    """Vocabulary and index from the training split, stage-1 model, cache over all splits."""
    labels = cfg.label_set
    glosses = (glosses or GlossTable.from_tsv()).restricted(labels)
    vocab = Vocabulary.build(train, glosses, labels)
    model, history = train_stage1(train, dev, vocab, mcfg, cfg)
    convs = [*train, *dev, *test]
    cache = cache_representations(model, convs, vocab, labels, cfg.eval_batch_size)
    return Stage1Artifacts(model, vocab, cache, build_index(train), glosses, history, convs)


@dataclass
class Stage2Run:
    state: MPLPModel
    cache: RepresentationCache
    history: list[dict]


def train_stage2(
    art: Stage1Artifacts,
    train: Sequence[Conversation],
    dev: Sequence[Conversation],
    cfg: TrainConfig,
) -> Stage2Run:
    """Continue from the stage-1 weights with fresh prompt parameters; best dev epoch kept."""
    cfg.validate()
    labels = cfg.label_set
    state = init_stage2(art.model, cfg)
    mcfg = art.model.config
    tr = build_examples(train, art.vocab, labels, mcfg, cfg, art.glosses)
    dv = build_examples(dev, art.vocab, labels, mcfg, cfg, art.glosses)
    cache = art.cache
    holder = {"cache": cache, "similar": retrieve_similar(tr + dv, cfg, art.index, cache)}
    rng = np.random.default_rng([cfg.seed, 3])

    def loss_fn(idx, r):
        return stage2_loss(state, [tr[i] for i in idx], holder["cache"], holder["similar"], cfg, True, r)

    def dev_metric():
        pred = predict_stage2(state, dv, holder["cache"], holder["similar"], cfg)
        return _weighted_f1(pred, dv, labels)

    def refresh(epoch: int) -> None:
        if not cfg.refresh_cache_every_epoch:
            return
        fresh = cache_representations(state.model, art.conversations, art.vocab, labels, cfg.eval_batch_size)
        holder["cache"] = fresh
        if cfg.retriever == "cosine":
            holder["similar"] = retrieve_similar(tr + dv, cfg, art.index, fresh)

    history = _fit(state.params(), len(tr), loss_fn, cfg.stage2_epochs, cfg.lr2, cfg, rng,
                   dev_metric if dv else None, stage=2, on_epoch_end=refresh)
    return Stage2Run(state, holder["cache"], history)


def evaluate(
    state: MPLPModel,
    convs: Sequence[Conversation],
    split: str,
    vocab: Vocabulary,
    cache: RepresentationCache,
    index: BM25Index,
    glosses: GlossTable,
    cfg: TrainConfig,
) -> EvalReport:
    """Deterministic report for one split; retrieval always runs against the training index."""
    labels = cfg.label_set
    examples = build_examples(convs, vocab, labels, state.model.config, cfg, glosses)
    similar = retrieve_similar(examples, cfg, index, cache) if cfg.use_exp_prompt else {}
    pred = predict_stage2(state, examples, cache, similar, cfg)
    return EvalReport.from_predictions(split, pred, [e.label for e in examples], labels, cfg.seed,
                                       {**asdict(cfg), "model": asdict(state.model.config)})


def run_variants(
    train: Sequence[Conversation],
    dev: Sequence[Conversation],
    test: Sequence[Conversation],
    mcfg: ModelConfig,
    base: TrainConfig,
    variants: dict[str, dict],
    splits: Sequence[str] = ("test",),
    glosses: GlossTable | None = None,
) -> dict[str, dict[str, EvalReport]]:
    """One shared stage-1 model, then stage 2 per variant (``dataclasses.replace`` overrides)."""
    art = prepare_stage1(train, dev, test, mcfg, base, glosses)
    data = {"train": train, "dev": dev, "test": test}
    out = {}
    for name, overrides in variants.items():
        cfg = dataclasses.replace(base, **overrides)
        run = train_stage2(art, train, dev, cfg)
        out[name] = {
            s: evaluate(run.state, data[s], s, art.vocab, run.cache, art.index, art.glosses, cfg) for s in splits
        }
        log.info("variant %s: %s", name, {s: round(r.weighted_f1, 4) for s, r in out[name].items()})
    return out


# ---------------------------------------------------------------------------
# run directories

RUN_FILES = {
    "config": "config.txt",
    "stage1": "stage1.npz",
    "cache": "cache.npz",
    "index": "index.bm25",
    "stage2": "stage2.npz",
    "history": "history.json",
    "reports": "reports",
}


def save_stage2(path: str | Path, state: MPLPModel, vocab: Vocabulary, cfg: TrainConfig, snapshot: str) -> None:
    save_checkpoint(path, state.params(), state.model.config, vocab, cfg.label_set.labels,
                    {"train_config": asdict(cfg), "snapshot": snapshot})


def load_stage2(path: str | Path) -> tuple[MPLPModel, Vocabulary, TrainConfig]:
    model, vocab, _labels, rest, extra = model_from_checkpoint(path)
    cfg = TrainConfig(**extra.get("train_config", {}))
    state = MPLPModel(model, {k: Tensor(v, requires_grad=True, name=k) for k, v in rest.items()})
    return state, vocab, cfg


def run_pipeline(
    train: Sequence[Conversation],
    dev: Sequence[Conversation],
    test: Sequence[Conversation],
    mcfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    glosses: GlossTable | None = None,
    extra_config: str = "",
) -> dict[str, EvalReport]:
    """Both stages end to end; with ``out_dir`` every artifact lands in the run directory."""
    cfg.validate()
    art = prepare_stage1(train, dev, test, mcfg, cfg, glosses)
    run = train_stage2(art, train, dev, cfg)
    reports = {
        s: evaluate(run.state, convs, s, art.vocab, run.cache, art.index, art.glosses, cfg)
        for s, convs in (("dev", dev), ("test", test))
        if convs
    }
    if out_dir is not None:
        out = Path(out_dir)
        (out / RUN_FILES["reports"]).mkdir(parents=True, exist_ok=True)
        (out / RUN_FILES["config"]).write_text(extra_config + format_flat_config(mcfg, cfg), encoding="utf-8")
        save_checkpoint(out / RUN_FILES["stage1"], art.model.params, mcfg, art.vocab, cfg.label_set.labels,
                        {"train_config": asdict(cfg)})
        run.cache.save(out / RUN_FILES["cache"])
        art.index.save(out / RUN_FILES["index"])
        save_stage2(out / RUN_FILES["stage2"], run.state, art.vocab, cfg, run.cache.snapshot)
        hist = [*art.history, *run.history]
        (out / RUN_FILES["history"]).write_text(json.dumps(hist, indent=1) + "\n", encoding="utf-8")
        for s, rep in reports.items():
            (out / RUN_FILES["reports"] / f"{s}.json").write_text(rep.to_json(), encoding="utf-8")
    return reports
