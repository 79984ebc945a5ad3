import json

import pytest

from mplp.configs import ConfigError
from mplp.corpus import load_corpus
from mplp.synthetic import GeneratorConfig, distinctive_gloss_words, generate_synthetic_corpus


def small(**kw):
    return GeneratorConfig(n_dialogues=40, **kw)


def test_deterministic_under_seed():
    a = generate_synthetic_corpus(small(), 3)
    b = generate_synthetic_corpus(small(), 3)
    assert a.train == b.train and a.test == b.test and a.signals == b.signals
    assert generate_synthetic_corpus(small(), 4).train != a.train


def test_splits_are_disjoint_by_dialogue():
    c = generate_synthetic_corpus(small(), 0)
    ids = [[d.dialogue_id for d in s] for s in (c.train, c.dev, c.test)]
    assert sum(map(len, ids)) == 40
    assert len(set().union(*map(set, ids))) == 40


def test_hist_labels_copy_previous_same_speaker_label():
    c = generate_synthetic_corpus(small(hist=1.0, exp=0.0, lex=0.0), 1)
    labels = {u.utterance_id: u for conv in c.train + c.dev + c.test for u in conv.utterances}
    n_hist = 0
    for uid, rec in c.signals.items():
        if rec.signal == "hist":
            n_hist += 1
            src = labels[rec.source]
            assert src.label == labels[uid].label and src.speaker == labels[uid].speaker
            assert rec.source.split(":")[0] == uid.split(":")[0]
        else:
            # a speaker's first utterance cannot copy anything
            assert rec.signal == "lex"
    assert n_hist > 0


def test_exp_labels_follow_template():
    c = generate_synthetic_corpus(small(hist=0.0, exp=1.0, lex=0.0), 2)
    for conv in c.train:
        for u in conv.utterances:
            rec = c.signals[u.utterance_id]
            assert rec.signal == "exp" and c.template_labels[rec.template] == u.label


def test_heldout_lex_words_never_in_train():
    c = generate_synthetic_corpus(small(hist=0.0, exp=0.0, lex=1.0, lex_eval_heldout_only=True), 5)
    held = {w for ws in c.heldout_words.values() for w in ws}
    assert held
    train_words = {w for conv in c.train for u in conv.utterances for w in u.tokens}
    assert not held & train_words
    test_words = {w for conv in c.test for u in conv.utterances for w in u.tokens}
    assert held & test_words


def test_nonce_tokens_are_unique():
    c = generate_synthetic_corpus(small(), 0)
    nonces = [t for conv in c.train for u in conv.utterances for t in u.tokens if t.startswith("q")]
    assert len(nonces) == len(set(nonces)) == sum(len(conv) for conv in c.train)


def test_distinctive_words_belong_to_one_label():
    from mplp.corpus import MELD_LABELS, GlossTable

    words = distinctive_gloss_words(GlossTable.from_tsv().restricted(MELD_LABELS), MELD_LABELS)
    seen = [w for ws in words.values() for w in ws]
    assert len(seen) == len(set(seen)) and all(words.values())


@pytest.mark.parametrize(
    "kw",
    [dict(hist=0.5, exp=0.5, lex=0.5), dict(hist=-0.1, exp=0.6, lex=0.5), dict(labels="nope"), dict(max_turns=0),
     dict(n_templates=10**6), dict(lex_holdout=1.0)],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(GeneratorConfig(**kw), 0)


def test_from_mapping_parses_types_and_rejects_unknown():
    cfg = GeneratorConfig.from_mapping({"n_dialogues": "7", "hist": "0.5", "exp": "0.25", "lex": "0.25", "nonce": "false"})
    assert cfg.n_dialogues == 7 and cfg.hist == 0.5 and cfg.nonce is False
    with pytest.raises(ConfigError):
        GeneratorConfig.from_mapping({"bogus": "1"})


def test_save_writes_loadable_files(tmp_path):
    c = generate_synthetic_corpus(small(), 0)
    c.save(tmp_path)
    assert load_corpus(tmp_path / "train.jsonl") == c.train
    meta = json.loads((tmp_path / "signals.json").read_text())
    assert set(meta["signals"]) == set(c.signals)
