"""Mini encoder-decoder transformer with a classification head and a tied LM head."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .configs import ConfigError
from .corpus import MASK, STAR, Conversation, Vocabulary, speaker_token
from .numerics import ContractError, Tensor


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_len: int = 160
    context_window: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.context_window < 0:
            raise ConfigError("context_window must be >= 0")


# ---------------------------------------------------------------------------
# input construction


def utterance_segment(conv: Conversation, i: int) -> list[str]:
    u = conv[i]
    return [speaker_token(u.speaker), *u.tokens]


def target_segment(conv: Conversation, t: int) -> list[str]:
    return [STAR, *utterance_segment(conv, t), STAR]


def build_context(conv: Conversation, t: int, m: int, budget: int) -> list[str]:
    """``[s_{t-m}, u_{t-m}, ..., *, s_t, u_t, *]`` cut from the left to ``budget`` tokens.

    The starred target segment is never cut into unless it alone exceeds the
    budget, in which case the target text loses its tail.
    """
    if not 0 <= t < len(conv):
        raise IndexError(f"utterance index {t} out of range for {len(conv)} utterances")
    target = target_segment(conv, t)
    if len(target) > budget:
        if budget < 3:
            raise ContractError("budget too small for a starred target")
        return target[: budget - 1] + [STAR]
    history: list[str] = []
    for i in range(max(0, t - m), t):
        history.extend(utterance_segment(conv, i))
    keep = budget - len(target)
    if len(history) > keep:
        history = history[len(history) - keep :]
    return history + target


def decoder_prompt(speaker: str) -> list[str]:
    return [speaker_token(speaker), "feels", MASK]


MASK_POSITION = 2


def build_stage1_input(conv: Conversation, t: int, m: int, max_len: int = 160) -> tuple[list[str], list[str]]:
    """Encoder tokens C_t and decoder prompt P_t for target ``t``."""
    return build_context(conv, t, m, max_len), decoder_prompt(conv[t].speaker)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# model


class Seq2Seq:
    """Post-norm transformer encoder-decoder in the BART layout.

    Parameters live in ``self.params`` keyed by dotted names. The input
    embedding matrix doubles as the LM output projection.
    """

    def __init__(self, config: ModelConfig, vocab_size: int, n_labels: int, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        self.n_labels = n_labels
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff
        p: dict[str, Tensor] = {}
        p["embed"] = nx.glorot_uniform((vocab_size, d), rng)
        for side in ("enc", "dec"):
            p[f"{side}.pos"] = nx.glorot_uniform((config.max_len, d), rng)
            p[f"{side}.ln_emb.g"], p[f"{side}.ln_emb.b"] = nx.ones((d,)), nx.zeros((d,))
            for i in range(config.n_layers):
                blocks = ["self"] + (["cross"] if side == "dec" else [])
                for blk in blocks:
                    pre = f"{side}.{i}.{blk}"
                    for w in ("q", "k", "v", "o"):
                        p[f"{pre}.w{w}"] = nx.glorot_uniform((d, d), rng)
                        p[f"{pre}.b{w}"] = nx.zeros((d,))
                    p[f"{pre}.ln.g"], p[f"{pre}.ln.b"] = nx.ones((d,)), nx.zeros((d,))
                pre = f"{side}.{i}.ff"
                p[f"{pre}.w1"], p[f"{pre}.b1"] = nx.glorot_uniform((d, f), rng), nx.zeros((f,))
                p[f"{pre}.w2"], p[f"{pre}.b2"] = nx.glorot_uniform((f, d), rng), nx.zeros((d,))
                p[f"{pre}.ln.g"], p[f"{pre}.ln.b"] = nx.ones((d,)), nx.zeros((d,))
        p.update(new_head(d, n_labels, rng, "head"))
        for name, t in p.items():
            t.name = name
        self.params = p

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [t for name, t in self.params.items() if name.startswith(prefix)]

    # -- building blocks ---------------------------------------------------

    def _attention(self, xq: Tensor, xkv: Tensor, pre: str, mask: np.ndarray) -> Tensor:
        p = self.params
        b, lq, d = xq.shape
        lk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h

        def heads(x: Tensor, w: str, length: int) -> Tensor:
            y = nx.add(nx.matmul(x, p[f"{pre}.w{w}"]), p[f"{pre}.b{w}"])
            return nx.transpose(nx.reshape(y, (b, length, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", lq), heads(xkv, "k", lk), heads(xkv, "v", lk)
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = nx.softmax(scores, mask=mask)
        ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, lq, d))
        return nx.add(nx.matmul(ctx, p[f"{pre}.wo"]), p[f"{pre}.bo"])

    def _residual_norm(self, x: Tensor, y: Tensor, pre: str, training: bool, rng) -> Tensor:
        y = nx.dropout(y, self.config.dropout, rng, training)
        return nx.layer_norm(nx.add(x, y), self.params[f"{pre}.ln.g"], self.params[f"{pre}.ln.b"])

    def _ffn(self, x: Tensor, pre: str) -> Tensor:
        p = self.params
        hdn = nx.gelu(nx.add(nx.matmul(x, p[f"{pre}.w1"]), p[f"{pre}.b1"]))
        return nx.add(nx.matmul(hdn, p[f"{pre}.w2"]), p[f"{pre}.b2"])

    def _embed(self, ids: np.ndarray, side: str, inject, training: bool, rng) -> Tensor:
        b, length = ids.shape
        if length > self.config.max_len:
            raise ContractError(f"sequence of length {length} exceeds max_len {self.config.max_len}")
        x = nx.embedding(self.params["embed"], ids)
        if inject is not None:
            rows, cols, values = inject
            x = nx.set_rows(x, (np.asarray(rows), np.asarray(cols)), values)
        pos = nx.embedding(self.params[f"{side}.pos"], np.broadcast_to(np.arange(length), (b, length)))
        x = nx.layer_norm(nx.add(x, pos), self.params[f"{side}.ln_emb.g"], self.params[f"{side}.ln_emb.b"])
        return nx.dropout(x, self.config.dropout, rng, training)

    # -- public passes -----------------------------------------------------

    def encode(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        inject: tuple[np.ndarray, np.ndarray, Tensor] | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Encoder states (B, L, d). ``inject`` = (rows, cols, vectors) overrides embeddings."""
        x = self._embed(ids, "enc", inject, training, rng)
        key_mask = mask[:, None, None, :]
        for i in range(self.config.n_layers):
            x = self._residual_norm(x, self._attention(x, x, f"enc.{i}.self", key_mask), f"enc.{i}.self", training, rng)
            x = self._residual_norm(x, self._ffn(x, f"enc.{i}.ff"), f"enc.{i}.ff", training, rng)
        return x

    def decode(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        enc: Tensor,
        enc_mask: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Causal decoder states (B, Lt, d) attending over ``enc``."""
        lt = ids.shape[1]
        causal = np.tril(np.ones((lt, lt), dtype=bool))
        self_mask = causal[None, None, :, :] & mask[:, None, None, :]
        cross_mask = enc_mask[:, None, None, :]
        x = self._embed(ids, "dec", None, training, rng)
        for i in range(self.config.n_layers):
            pre = f"dec.{i}"
            x = self._residual_norm(x, self._attention(x, x, f"{pre}.self", self_mask), f"{pre}.self", training, rng)
            x = self._residual_norm(x, self._attention(x, enc, f"{pre}.cross", cross_mask), f"{pre}.cross", training, rng)
            x = self._residual_norm(x, self._ffn(x, f"{pre}.ff"), f"{pre}.ff", training, rng)
        return x

    def classify(self, h: Tensor, head: str = "head") -> Tensor:
        return classify(h, self.params, head)

    def lm_logits(self, hidden: Tensor) -> Tensor:
        return nx.matmul(hidden, nx.transpose(self.params["embed"]))


def new_head(d_in: int, n_labels: int, rng: np.random.Generator, prefix: str, d_hidden: int | None = None) -> dict[str, Tensor]:
    d_hidden = d_hidden or d_in
    return {
        f"{prefix}.W_H": nx.glorot_uniform((d_in, d_hidden), rng, f"{prefix}.W_H"),
        f"{prefix}.b_H": nx.zeros((d_hidden,), f"{prefix}.b_H"),
        f"{prefix}.W_z": nx.glorot_uniform((d_hidden, n_labels), rng, f"{prefix}.W_z"),
        f"{prefix}.b_z": nx.zeros((n_labels,), f"{prefix}.b_z"),
    }


def classify(h: Tensor, params: dict[str, Tensor], head: str = "head") -> Tensor:
    """Logits W_z GeLU(W_H h + b_H) + b_z for a (d,) vector or a (B, d) batch."""
    z = nx.gelu(nx.add(nx.matmul(h, params[f"{head}.W_H"]), params[f"{head}.b_H"]))
    return nx.add(nx.matmul(z, params[f"{head}.W_z"]), params[f"{head}.b_z"])


def predict(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=-1)


def forward_stage1(
    model: Seq2Seq,
    c_ids: Sequence[Sequence[int]],
    p_ids: Sequence[Sequence[int]],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Decoder states H_t (B, 3, d) and mask-position vectors h_t (B, d)."""
    enc_ids, enc_mask = pad_batch(c_ids)
    dec_ids, dec_mask = pad_batch(p_ids)
    enc = model.encode(enc_ids, enc_mask, training=training, rng=rng)
    hidden = model.decode(dec_ids, dec_mask, enc, enc_mask, training=training, rng=rng)
    return hidden, nx.take(hidden, (slice(None), MASK_POSITION))


def lm_generate_loss(
    model: Seq2Seq,
    enc: Tensor,
    enc_mask: np.ndarray,
    targets: Sequence[Sequence[int]],
    n_prefix: int = 2,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced NLL of each target after its ``n_prefix`` conditioning tokens.

    Each target is ``[s_t, feels, g_1 .. g_n, EOS]``; positions predicting
    g_1 .. EOS carry the loss. The per-target mean is averaged over the batch.
    """
    if any(len(t) <= n_prefix + 1 for t in targets):
        raise ContractError("generation target needs at least one gloss token before EOS")
    inputs = [t[:-1] for t in targets]
    ids, mask = pad_batch(inputs)
    hidden = model.decode(ids, mask, enc, enc_mask, training=training, rng=rng)
    b, lt = ids.shape
    gold = np.zeros((b, lt), dtype=np.int64)
    weights = np.zeros((b, lt))
    for i, t in enumerate(targets):
        n = len(t) - 1
        gold[i, :n] = t[1:]
        weights[i, n_prefix - 1 : n] = 1.0 / ((n - n_prefix + 1) * b)
    # only loss-bearing positions go through the (vocabulary-wide) output projection
    rows, cols = np.nonzero(weights)
    logits = model.lm_logits(nx.take(hidden, (rows, cols)))
    return nx.cross_entropy(logits, gold[rows, cols], weights=weights[rows, cols])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "mplp-checkpoint-v1"


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    labels: Sequence[str],
    extra: dict | None = None,
) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(config),
        "vocab": list(vocab.tokens),
        "labels": list(labels),
        "extra": extra or {},
    }
    arrays = {f"param/{name}": t.data for name, t in params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, Vocabulary, list[str], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: not an {CHECKPOINT_FORMAT} file")
        params = {k[len("param/") :]: z[k].copy() for k in z.files if k.startswith("param/")}
    return params, ModelConfig(**meta["model_config"]), Vocabulary(meta["vocab"]), meta["labels"], meta["extra"]


def model_from_checkpoint(path: str | Path) -> tuple[Seq2Seq, Vocabulary, list[str], dict[str, np.ndarray], dict]:
    """Rebuild a Seq2Seq; parameters outside the base model are returned separately."""
    arrays, config, vocab, labels, extra = load_checkpoint(path)
    model = Seq2Seq(config, len(vocab), len(labels), seed=0)
    rest = {}
    for name, arr in arrays.items():
        if name in model.params:
            model.params[name].data = arr
        else:
            rest[name] = arr
    missing = [n for n in model.params if n not in arrays]
    if missing:
        raise ContractError(f"{path}: checkpoint lacks parameters {missing[:3]}")
    return model, vocab, labels, rest, extra

