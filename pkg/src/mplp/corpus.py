"""Conversation data model, tokenizer, vocabulary, gloss table and JSONL I/O."""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """Malformed corpus file or an utterance that violates the data model."""


class LabelValidationError(CorpusError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EmotionLabelSet:
    labels: tuple[str, ...]
    neutral_index: int | None = None

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label names must be unique")
        if self.neutral_index is not None and not 0 <= self.neutral_index < len(self.labels):
            raise ValueError("neutral_index out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, name: str) -> bool:
        return name in self.labels

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise LabelValidationError(f"unknown label {name!r}") from None

    @classmethod
    def with_neutral(cls, labels: Sequence[str], neutral: str = "neutral") -> EmotionLabelSet:
        labels = tuple(labels)
        return cls(labels, labels.index(neutral) if neutral in labels else None)


MELD_LABELS = EmotionLabelSet.with_neutral(
    ["neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear"]
)
DAILYDIALOG_LABELS = MELD_LABELS
IEMOCAP_LABELS = EmotionLabelSet.with_neutral(
    ["neutral", "happiness", "sadness", "anger", "frustrated", "excited"]
)
LABEL_SETS = {"meld": MELD_LABELS, "dailydialog": DAILYDIALOG_LABELS, "iemocap": IEMOCAP_LABELS}


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    label: str
    utterance_id: str

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


@dataclass(frozen=True)
class Conversation:
    dialogue_id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"dialogue {self.dialogue_id!r} has no utterances")

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, t: int) -> Utterance:
        return self.utterances[t]


def make_conversation(dialogue_id: str, turns: Iterable[tuple[str, str, str]]) -> Conversation:
    """Build a conversation from (speaker, text, label) triples, assigning ids."""
    utts = tuple(
        Utterance(speaker, text, label, f"{dialogue_id}:{i}") for i, (speaker, text, label) in enumerate(turns)
    )
    return Conversation(dialogue_id, utts)


def _parse_dialogue(obj: dict, labels: EmotionLabelSet | None, where: str) -> Conversation:
    try:
        did = obj["dialogue_id"]
        raw = obj["utterances"]
        turns = [(u["speaker"], u["text"], u["label"]) for u in raw]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"{where}: missing field {exc}") from None
    if not isinstance(did, str):
        raise CorpusError(f"{where}: dialogue_id must be a string")
    for speaker, text, label in turns:
        if labels is not None and label not in labels:
            raise LabelValidationError(f"{where}: label {label!r} not in label set {list(labels.labels)}")
        if not tokenize(text):
            raise CorpusError(f"{where}: utterance text is empty after tokenization")
    try:
        return make_conversation(did, turns)
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_corpus(path: str | Path, labels: EmotionLabelSet | None = MELD_LABELS) -> list[Conversation]:
    """Read one dialogue per JSONL line. Blank lines are skipped."""
    convs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            conv = _parse_dialogue(obj, labels, f"{path}:{lineno}")
            if conv.dialogue_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate dialogue_id {conv.dialogue_id!r}")
            seen.add(conv.dialogue_id)
            convs.append(conv)
    return convs


def dialogue_to_json(conv: Conversation) -> str:
    obj = {
        "dialogue_id": conv.dialogue_id,
        "utterances": [{"speaker": u.speaker, "text": u.text, "label": u.label} for u in conv.utterances],
    }
    return json.dumps(obj, ensure_ascii=False)


def save_corpus(convs: Iterable[Conversation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for conv in convs:
            fh.write(dialogue_to_json(conv))
            fh.write("\n")


# ---------------------------------------------------------------------------
# gloss table


@dataclass(frozen=True)
class GlossEntry:
    label: str
    adjective: str
    gloss: tuple[str, ...]

    def __post_init__(self):
        if not self.gloss:
            raise CorpusError(f"empty gloss for label {self.label!r}")


class GlossTable(dict):
    """label -> GlossEntry."""

    @classmethod
    def from_tsv(cls, path: str | Path | None = None) -> GlossTable:
        if path is None:
            text = resources.files("mplp").joinpath("data/glosses.tsv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        table = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"gloss table line {lineno}: expected 3 tab-separated fields")
            label, adjective, gloss = parts
            if label in table:
                raise CorpusError(f"gloss table line {lineno}: duplicate label {label!r}")
            table[label] = GlossEntry(label, adjective.strip(), tuple(tokenize(gloss)))
        return table

    def restricted(self, labels: EmotionLabelSet) -> GlossTable:
        missing = [lab for lab in labels.labels if lab not in self]
        if missing:
            raise CorpusError(f"gloss table has no entry for {missing}")
        return GlossTable({lab: self[lab] for lab in labels.labels})


# ---------------------------------------------------------------------------
# vocabulary

PAD, BOS, EOS, MASK, SEP, STAR, UNK = "<pad>", "<bos>", "<eos>", "<mask>", "<sep>", "*", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, MASK, SEP, STAR, UNK)
PROMPT_WORDS = ("feels", "may", "feel")


def speaker_token(name: str) -> str:
    return f"<spk:{name.lower()}>"


def label_token(label: str) -> str:
    return f"<lbl:{label}>"


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.tokens[i] != tok:
                raise ValueError("vocabulary must start with the special tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def speaker_id(self, name: str) -> int:
        return self.id(speaker_token(name))

    @property
    def pad_id(self) -> int:
        return 0

    @classmethod
    def build(
        cls,
        conversations: Iterable[Conversation],
        glosses: GlossTable | None = None,
        labels: EmotionLabelSet | None = None,
    ) -> Vocabulary:
        """Vocabulary over training conversations plus gloss and label tokens.

        Corpus tokens and speaker tokens are sorted, so the result does not
        depend on dialogue order.
        """
        words: set[str] = set(PROMPT_WORDS)
        speakers: set[str] = set()
        for conv in conversations:
            for u in conv.utterances:
                words.update(u.tokens)
                speakers.add(speaker_token(u.speaker))
        if glosses is not None:
            for entry in glosses.values():
                words.update(entry.gloss)
                words.update(tokenize(entry.adjective))
        extra = [label_token(lab) for lab in labels.labels] if labels is not None else []
        words.difference_update(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(speakers) + sorted(words) + extra)
