import json

import pytest

from mplp.corpus import (
    EOS,
    MELD_LABELS,
    SPECIAL_TOKENS,
    UNK,
    CorpusError,
    GlossTable,
    LabelValidationError,
    Vocabulary,
    label_token,
    load_corpus,
    make_conversation,
    save_corpus,
    speaker_token,
    tokenize,
)


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Oh, I'm FINE!") == ["oh", ",", "i", "'", "m", "fine", "!"]


def test_make_conversation_assigns_ids():
    conv = make_conversation("d1", [("a", "hi", "neutral"), ("b", "yo", "happiness")])
    assert [u.utterance_id for u in conv.utterances] == ["d1:0", "d1:1"]


def test_empty_conversation_rejected():
    with pytest.raises(CorpusError):
        make_conversation("d", [])


def test_label_index_and_neutral():
    assert MELD_LABELS.index("neutral") == MELD_LABELS.neutral_index == 0
    with pytest.raises(LabelValidationError):
        MELD_LABELS.index("joy")


def test_round_trip(tmp_path):
    convs = [
        make_conversation("d1", [("ann", "hello there", "neutral"), ("bo", "wow!", "surprise")]),
        make_conversation("d2", [("ann", "so sad", "sadness")]),
    ]
    path = tmp_path / "c.jsonl"
    save_corpus(convs, path)
    assert load_corpus(path) == convs


def _write(tmp_path, lines):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_unknown_label_reports_line(tmp_path):
    good = json.dumps({"dialogue_id": "a", "utterances": [{"speaker": "x", "text": "hi", "label": "neutral"}]})
    bad = json.dumps({"dialogue_id": "b", "utterances": [{"speaker": "x", "text": "hi", "label": "joy"}]})
    with pytest.raises(LabelValidationError, match=":2:"):
        load_corpus(_write(tmp_path, [good, bad]))


def test_duplicate_dialogue_rejected(tmp_path):
    line = json.dumps({"dialogue_id": "a", "utterances": [{"speaker": "x", "text": "hi", "label": "neutral"}]})
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(_write(tmp_path, [line, line]))


def test_invalid_json_and_missing_fields(tmp_path):
    with pytest.raises(CorpusError, match="invalid JSON"):
        load_corpus(_write(tmp_path, ["{nope"]))
    with pytest.raises(CorpusError, match="missing field"):
        load_corpus(_write(tmp_path, [json.dumps({"dialogue_id": "a"})]))


def test_empty_text_rejected(tmp_path):
    line = json.dumps({"dialogue_id": "a", "utterances": [{"speaker": "x", "text": "   ", "label": "neutral"}]})
    with pytest.raises(CorpusError, match="empty"):
        load_corpus(_write(tmp_path, [line]))


def test_gloss_table_covers_all_label_sets():
    table = GlossTable.from_tsv()
    for labels in ("neutral", "happiness", "frustrated", "excited"):
        assert table[labels].gloss
    assert table["fear"].adjective == "afraid"
    assert table.restricted(MELD_LABELS).keys() == set(MELD_LABELS.labels)


def test_gloss_table_missing_label(tmp_path):
    path = tmp_path / "g.tsv"
    path.write_text("neutral\tneutral\thaving no personal preference\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        GlossTable.from_tsv(path).restricted(MELD_LABELS)


def test_vocabulary_layout_and_unknowns():
    convs = [make_conversation("d", [("Bo", "hello world", "neutral")])]
    vocab = Vocabulary.build(convs, GlossTable.from_tsv().restricted(MELD_LABELS), MELD_LABELS)
    assert tuple(vocab.tokens[: len(SPECIAL_TOKENS)]) == SPECIAL_TOKENS
    assert vocab.pad_id == 0
    assert speaker_token("Bo") in vocab and label_token("fear") in vocab and "apprehension" in vocab
    assert vocab.id("zzz-never-seen") == vocab.id(UNK)
    assert vocab.encode([EOS])[0] == SPECIAL_TOKENS.index(EOS)


def test_vocabulary_independent_of_dialogue_order():
    a = make_conversation("a", [("x", "one two", "neutral")])
    b = make_conversation("b", [("y", "three", "neutral")])
    assert Vocabulary.build([a, b]).tokens == Vocabulary.build([b, a]).tokens


def test_tokenize_examples():
    assert tokenize("I can't watch!") == ["i", "can", "'", "t", "watch", "!"]
    assert tokenize("") == []


def test_one_line_file(tmp_path):
    line = json.dumps({"dialogue_id": "a", "utterances": [{"speaker": "x", "text": "hi", "label": "neutral"},
                                                          {"speaker": "y", "text": "yo", "label": "fear"}]})
    convs = load_corpus(_write(tmp_path, [line]))
    assert len(convs) == 1 and len(convs[0]) == 2
