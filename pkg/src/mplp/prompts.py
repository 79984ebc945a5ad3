"""History- and experience-oriented soft prompts built from cached stage-1 vectors.

All functions work on batches: history tensors are (B, T, d) with a boolean
validity mask, similar-sample tensors are (B, k, d). Cached vectors enter as
constants, so no gradient ever reaches the cache.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import MASK, Vocabulary, speaker_token
from .numerics import ContractError, Tensor

PROMPT_PREFIX = ("may", "feel")
CACHE_FORMAT = "mplp-repcache-v1"


class RepresentationCache:
    """utterance_id -> stage-1 mask-position vector, tagged with its source checkpoint."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, snapshot: str = ""):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ContractError("cache needs one row per utterance id")
        self.ids = list(ids)
        self.vectors = vectors
        self.snapshot = snapshot
        self.row = {uid: i for i, uid in enumerate(self.ids)}
        if len(self.row) != len(self.ids):
            raise ContractError("duplicate utterance ids in cache")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, uid: str) -> bool:
        return uid in self.row

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def vector(self, uid: str) -> np.ndarray:
        try:
            return self.vectors[self.row[uid]]
        except KeyError:
            raise ContractError(f"utterance {uid!r} missing from representation cache") from None

    def matrix(self, uids: Iterable[str]) -> np.ndarray:
        rows = [self.row[u] for u in uids]
        return self.vectors[rows] if rows else np.zeros((0, self.width))

    def subset(self, uids: Iterable[str]) -> RepresentationCache:
        uids = list(uids)
        return RepresentationCache(uids, self.matrix(uids), self.snapshot)

    def save(self, path: str | Path) -> None:
        meta = {"format": CACHE_FORMAT, "snapshot": self.snapshot, "ids": self.ids}
        with open(path, "wb") as fh:
            np.savez(fh, vectors=self.vectors, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> RepresentationCache:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            if meta.get("format") != CACHE_FORMAT:
                raise ContractError(f"{path}: not a representation cache")
            return cls(meta["ids"], z["vectors"].copy(), meta["snapshot"])


def init_history_params(d: int, rng: np.random.Generator, hidden: int | None = None) -> dict[str, Tensor]:
    """Scorer over [h_i; h_t], relation matrices W_0/W_1, BiLSTM, and its projection to d."""
    hdn = hidden or d
    p = {
        "hist.W_h": nx.glorot_uniform((2 * d, 1), rng),
        "hist.W0": nx.glorot_uniform((d, d), rng),
        "hist.W1": nx.glorot_uniform((d, d), rng),
        "hist.proj.W": nx.glorot_uniform((2 * hdn, d), rng),
        "hist.proj.b": nx.zeros((d,)),
    }
    for direction in ("fwd", "bwd"):
        p[f"hist.{direction}.Wx"] = nx.glorot_uniform((d, 4 * hdn), rng)
        p[f"hist.{direction}.Wh"] = nx.glorot_uniform((hdn, 4 * hdn), rng)
        p[f"hist.{direction}.b"] = nx.zeros((4 * hdn,))
    for name, t in p.items():
        t.name = name
    return p


def init_experience_params(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"exp.W_h": nx.glorot_uniform((d, 1), rng, "exp.W_h")}


# ---------------------------------------------------------------------------
# history-oriented prompt


def relation_aware_transform(history, same_speaker: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """W_0 h_i for the target's own speaker, W_1 h_i for everyone else."""
    h = nx.as_tensor(history)
    same = np.asarray(same_speaker, dtype=np.float64)[..., None]
    own = nx.matmul(h, nx.transpose(params["hist.W0"]))
    other = nx.matmul(h, nx.transpose(params["hist.W1"]))
    return nx.add(nx.mul_const(own, np.broadcast_to(same, own.shape)), nx.mul_const(other, np.broadcast_to(1.0 - same, other.shape)))


def _tile_over_time(x: Tensor, steps: int) -> Tensor:
    b = x.shape[0]
    return nx.take(x, (np.repeat(np.arange(b)[:, None], steps, axis=1),))


def history_attention(history, h_t, w_score: Tensor, mask: np.ndarray) -> Tensor:
    """softmax over valid i of W [h_i; h_t]; rows without history give all zeros."""
    hist = nx.as_tensor(history)
    b, steps, _ = hist.shape
    pair = nx.concat([hist, _tile_over_time(nx.as_tensor(h_t), steps)], axis=-1)
    scores = nx.reshape(nx.matmul(pair, w_score), (b, steps))
    weights = nx.softmax(scores, mask=mask)
    has_any = mask.any(axis=1, keepdims=True).astype(np.float64)
    return nx.mul_const(weights, np.broadcast_to(has_any, weights.shape))


def _lstm(x: Tensor, params: dict[str, Tensor], direction: str) -> list[Tensor]:
    b, steps, _ = x.shape
    wx, wh, bias = params[f"hist.{direction}.Wx"], params[f"hist.{direction}.Wh"], params[f"hist.{direction}.b"]
    hdn = wh.shape[0]
    xproj = nx.add(nx.matmul(x, wx), bias)
    h = nx.Tensor(np.zeros((b, hdn)))
    c = nx.Tensor(np.zeros((b, hdn)))
    outs = []
    for s in range(steps):
        gates = nx.add(nx.take(xproj, (slice(None), s)), nx.matmul(h, wh))
        i = nx.sigmoid(nx.take(gates, (slice(None), slice(0, hdn))))
        f = nx.sigmoid(nx.take(gates, (slice(None), slice(hdn, 2 * hdn))))
        g = nx.tanh(nx.take(gates, (slice(None), slice(2 * hdn, 3 * hdn))))
        o = nx.sigmoid(nx.take(gates, (slice(None), slice(3 * hdn, 4 * hdn))))
        c = nx.add(nx.mul(f, c), nx.mul(i, g))
        h = nx.mul(o, nx.tanh(c))
        outs.append(h)
    return outs


def _reverse_index(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, steps = mask.shape
    lengths = mask.sum(axis=1)
    idx = np.tile(np.arange(steps), (b, 1))
    for r, n in enumerate(lengths):
        idx[r, :n] = np.arange(n)[::-1]
    return np.repeat(np.arange(b)[:, None], steps, axis=1), idx


def bilstm_states(x, mask: np.ndarray, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Forward and backward hidden sequences (B, T, H) over each row's valid prefix."""
    x = nx.as_tensor(x)
    fwd = nx.stack(_lstm(x, params, "fwd"), axis=1)
    rows, rev = _reverse_index(mask)
    bwd_rev = nx.stack(_lstm(nx.take(x, (rows, rev)), params, "bwd"), axis=1)
    return fwd, nx.take(bwd_rev, (rows, rev))


def contextualize(x, mask: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """BiLSTM over the transformed history, halves concatenated and projected to d."""
    fwd, bwd = bilstm_states(x, mask, params)
    return nx.add(nx.matmul(nx.concat([fwd, bwd], axis=-1), params["hist.proj.W"]), params["hist.proj.b"])


@dataclass
class PromptOutput:
    vector: Tensor  # (B, d) injected vector h^hist_t or h^exp_t
    influence: Tensor
    weights: Tensor


def build_history_prompt(
    history: np.ndarray,
    same_speaker: np.ndarray,
    mask: np.ndarray,
    h_t: np.ndarray,
    params: dict[str, Tensor],
) -> PromptOutput:
    """h^hist_t = sum_i a_i h~_i + h_t, with zero influence when there is no history."""
    h_t = nx.as_tensor(h_t)
    b, d = h_t.shape
    if history.shape[1] == 0 or not mask.any():
        zero = nx.Tensor(np.zeros((b, d)))
        return PromptOutput(nx.add(zero, h_t), zero, nx.Tensor(np.zeros((b, 0))))
    weights = history_attention(history, h_t, params["hist.W_h"], mask)
    transformed = relation_aware_transform(history, same_speaker & mask, params)
    ctx = contextualize(transformed, mask, params)
    influ = nx.reshape(nx.matmul(nx.reshape(weights, (b, 1, history.shape[1])), ctx), (b, d))
    return PromptOutput(nx.add(influ, h_t), influ, weights)


def build_experience_prompt(similar: np.ndarray, h_t: np.ndarray, params: dict[str, Tensor]) -> PromptOutput:
    """h^exp_t = sum_j a_j d_j + h_t with a = softmax_j W (d_j * h_t)."""
    similar = np.asarray(similar, dtype=np.float64)
    if similar.ndim != 3 or similar.shape[1] < 1:
        raise ContractError("experience prompt needs at least one similar sample per row")
    h_t = nx.as_tensor(h_t)
    b, k, d = similar.shape
    sims = nx.Tensor(similar)
    prod = nx.mul(sims, _tile_over_time(h_t, k))
    weights = nx.softmax(nx.reshape(nx.matmul(prod, params["exp.W_h"]), (b, k)))
    influ = nx.reshape(nx.matmul(nx.reshape(weights, (b, 1, k)), sims), (b, d))
    return PromptOutput(nx.add(influ, h_t), influ, weights)


def prompt_token_ids(vocab: Vocabulary, speaker: str) -> list[int]:
    """Ids for ``[s_t, may, feel, <slot>]``; the slot is overwritten by the injected vector."""
    return vocab.encode([speaker_token(speaker), *PROMPT_PREFIX, MASK])
