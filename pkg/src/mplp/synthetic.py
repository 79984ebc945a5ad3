"""Synthetic conversations with plantable label mechanisms.

Three mechanisms decide an utterance's label, and each utterance records
which one fired (metadata only, never shown to the model):

``hist``  the label copies the same speaker's previous label in the dialogue;
          the text is filler and carries no label information.
``exp``   the utterance instantiates a template family shared across
          dialogues; the family fixes the label. A family is a small set of
          key tokens, each of which is shared with many other families, so
          only the full combination identifies it.
``lex``   the text contains words from the label's gloss. A fraction of each
          label's gloss words is held out of the training split and only
          emitted in dev/test.

Every utterance also carries a unique filler token, which gives training
utterances an idiosyncratic feature a model can memorise.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .configs import ConfigError, apply_overrides
from .corpus import (
    LABEL_SETS,
    Conversation,
    EmotionLabelSet,
    GlossTable,
    make_conversation,
    save_corpus,
)

SIGNALS = ("hist", "exp", "lex")
SPEAKER_POOL = (
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
    "ivan", "judy", "mallory", "oscar", "peggy", "trent", "victor", "wendy",
)
FILLER_POOL = (
    "well", "so", "yeah", "okay", "like", "just", "really", "you", "know",
    "mean", "the", "thing", "is", "that", "we", "it", "right", "oh", "um", "hey",
)


@dataclass
class GeneratorConfig:
    n_dialogues: int = 200
    speakers_per_dialogue: int = 2
    min_turns: int = 4
    max_turns: int = 10
    labels: str = "meld"
    hist: float = 1 / 3
    exp: float = 1 / 3
    lex: float = 1 / 3
    n_templates: int = 300
    key_pool: int = 16
    keys_per_template: int = 3
    decoy_keys: int = 0
    fillers_min: int = 1
    fillers_max: int = 3
    hist_fillers: int = 4
    lex_words: int = 1
    lex_holdout: float = 0.5
    lex_eval_heldout_only: bool = False  # dev/test lex utterances draw only held-out words
    nonce: bool = True
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        weights = [self.hist, self.exp, self.lex]
        if any(w < 0 for w in weights):
            raise ConfigError("signal weights must be non-negative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"signal weights sum to {sum(weights)}, expected 1")
        if self.n_dialogues < 1 or self.min_turns < 1 or self.max_turns < self.min_turns:
            raise ConfigError("need n_dialogues >= 1 and 1 <= min_turns <= max_turns")
        if not 1 <= self.speakers_per_dialogue <= len(SPEAKER_POOL):
            raise ConfigError("speakers_per_dialogue out of range")
        if self.keys_per_template > self.key_pool:
            raise ConfigError("keys_per_template exceeds key_pool")
        n_combos = len(list(itertools.combinations(range(self.key_pool), self.keys_per_template)))
        if self.n_templates > n_combos:
            raise ConfigError(f"only {n_combos} distinct templates available")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        if not 0.0 <= self.lex_holdout < 1.0:
            raise ConfigError("lex_holdout must lie in [0, 1)")
        if self.labels not in LABEL_SETS:
            raise ConfigError(f"unknown label set {self.labels!r}")

    @property
    def label_set(self) -> EmotionLabelSet:
        return LABEL_SETS[self.labels]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> GeneratorConfig:
        cfg, rest = apply_overrides(cls(), values)
        if rest:
            raise ConfigError(f"unknown generator option {sorted(rest)[0]!r}")
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class SignalRecord:
    signal: str
    template: int | None = None
    source: str | None = None  # previous same-speaker utterance a hist label copies


@dataclass
class SyntheticCorpus:
    train: list[Conversation]
    dev: list[Conversation]
    test: list[Conversation]
    signals: dict[str, SignalRecord] = field(default_factory=dict)
    template_labels: dict[int, str] = field(default_factory=dict)
    heldout_words: dict[str, list[str]] = field(default_factory=dict)

    def splits(self) -> dict[str, list[Conversation]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, convs in self.splits().items():
            save_corpus(convs, out / f"{name}.jsonl")
        meta = {
            "signals": {uid: asdict(rec) for uid, rec in sorted(self.signals.items())},
            "template_labels": {str(k): v for k, v in sorted(self.template_labels.items())},
            "heldout_words": self.heldout_words,
        }
        (out / "signals.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def distinctive_gloss_words(glosses: GlossTable, labels: EmotionLabelSet) -> dict[str, list[str]]:
    """Gloss tokens that occur in exactly one label's gloss."""
    owners: dict[str, set[str]] = {}
    for lab in labels.labels:
        for tok in glosses[lab].gloss:
            owners.setdefault(tok, set()).add(lab)
    return {
        lab: sorted({t for t in glosses[lab].gloss if owners[t] == {lab}}) for lab in labels.labels
    }


def _nonce(i: int) -> str:
    digits = "abcdefghijklmnopqrstuvwxyz"
    s = ""
    while True:
        i, r = divmod(i, 26)
        s = digits[r] + s
        if i == 0:
            break
    return "q" + s


def generate_synthetic_corpus(
    config: GeneratorConfig, seed: int, glosses: GlossTable | None = None
) -> SyntheticCorpus:
    """Deterministic train/dev/test corpus under ``seed``; splits are disjoint by dialogue."""
    config.validate()
    rng = np.random.default_rng(seed)
    labels = config.label_set
    glosses = (glosses or GlossTable.from_tsv()).restricted(labels)

    gloss_words = set(itertools.chain.from_iterable(e.gloss for e in glosses.values()))
    fillers = [w for w in FILLER_POOL if w not in gloss_words]

    lex_all = distinctive_gloss_words(glosses, labels)
    lex_seen: dict[str, list[str]] = {}
    heldout: dict[str, list[str]] = {}
    for lab in labels.labels:
        words = list(lex_all[lab])
        if not words:
            raise ConfigError(f"label {lab!r} has no distinctive gloss word")
        n_hold = int(len(words) * config.lex_holdout)
        order = rng.permutation(len(words))
        held = sorted(words[i] for i in order[:n_hold])
        heldout[lab] = held
        lex_seen[lab] = [w for w in words if w not in held]

    keys = [f"k{i}" for i in range(config.key_pool)]
    combos = list(itertools.combinations(range(config.key_pool), config.keys_per_template))
    picked = rng.choice(len(combos), size=config.n_templates, replace=False)
    templates = [tuple(keys[j] for j in combos[i]) for i in picked]
    template_labels = {i: labels.labels[int(rng.integers(len(labels)))] for i in range(config.n_templates)}

    n = config.n_dialogues
    n_train = int(round(config.split[0] * n))
    n_dev = int(round(config.split[1] * n))
    split_of = np.empty(n, dtype=object)
    order = rng.permutation(n)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train : n_train + n_dev]] = "dev"
    split_of[order[n_train + n_dev :]] = "test"

    other_w = np.array([config.exp, config.lex])
    other_p = other_w / other_w.sum() if other_w.sum() > 0 else np.array([0.0, 1.0])
    all_p = np.array([config.hist, config.exp, config.lex])

    out: dict[str, list[Conversation]] = {"train": [], "dev": [], "test": []}
    signals: dict[str, SignalRecord] = {}
    nonce_counter = 0

    def fill(k: int) -> list[str]:
        return [fillers[int(j)] for j in rng.integers(len(fillers), size=k)]

    for d in range(n):
        split = split_of[d]
        did = f"{split}{d:05d}"
        n_turns = int(rng.integers(config.min_turns, config.max_turns + 1))
        cast = [SPEAKER_POOL[i] for i in rng.choice(len(SPEAKER_POOL), config.speakers_per_dialogue, replace=False)]
        last_label: dict[str, tuple[str, str]] = {}
        turns = []
        for t in range(n_turns):
            speaker = cast[int(rng.integers(len(cast)))]
            uid = f"{did}:{t}"
            if speaker in last_label:
                signal = SIGNALS[int(rng.choice(3, p=all_p))]
            else:
                signal = ("exp", "lex")[int(rng.choice(2, p=other_p))]
            if signal == "hist":
                label, source = last_label[speaker]
                words = fill(config.hist_fillers)
                rec = SignalRecord("hist", source=source)
            elif signal == "exp":
                tid = int(rng.integers(config.n_templates))
                label = template_labels[tid]
                words = list(templates[tid])
                if config.decoy_keys:
                    others = [k for k in keys if k not in templates[tid]]
                    words += [others[int(j)] for j in rng.choice(len(others), config.decoy_keys, replace=False)]
                words += fill(int(rng.integers(config.fillers_min, config.fillers_max + 1)))
                rec = SignalRecord("exp", template=tid)
            else:
                label = labels.labels[int(rng.integers(len(labels)))]
                if split == "train":
                    pool = lex_seen[label]
                elif config.lex_eval_heldout_only and heldout[label]:
                    pool = heldout[label]
                else:
                    pool = lex_all[label]
                words = [pool[int(j)] for j in rng.integers(len(pool), size=config.lex_words)]
                words += fill(int(rng.integers(config.fillers_min, config.fillers_max + 1)))
                rec = SignalRecord("lex")
            if config.nonce:
                words.append(_nonce(nonce_counter))
                nonce_counter += 1
            words = [words[int(j)] for j in rng.permutation(len(words))]
            last_label[speaker] = (label, uid)
            signals[uid] = rec
            turns.append((speaker, " ".join(words), label))
        out[split].append(make_conversation(did, turns))

    return SyntheticCorpus(out["train"], out["dev"], out["test"], signals, template_labels, heldout)
