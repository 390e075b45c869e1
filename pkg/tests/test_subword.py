import random

import pytest

from parsestrat.subword import (
    UNK, BpeModel, IdOutOfRange, VocabTooSmall, decode, encode, encode_sentence, encode_tree,
    train_bpe,
)
from parsestrat.treebank import parse_tree


def test_first_merge_is_most_frequent_pair():
    model = train_bpe([["aaab", "aaab"]], vocab_size=6, coverage=1.0)
    assert model.merges[0] == ("a", "a")


def test_tie_break_is_lexicographic():
    # after (a, a): (a, b) and (aa, a) both occur twice; "a" < "aa"
    model = train_bpe([["aaab", "aaab"]], vocab_size=6, coverage=1.0)
    assert model.merges[1] == ("a", "b")


def test_character_model_when_budget_is_base_inventory():
    corpus = [["abc", "cab"], ["bca"]]
    model = train_bpe(corpus, vocab_size=4, coverage=1.0)  # a, b, c + unk
    assert model.merges == []
    assert model.vocab == [UNK, "a", "b", "c"]


def test_vocab_too_small():
    with pytest.raises(VocabTooSmall):
        train_bpe([["abc"]], vocab_size=3, coverage=1.0)


def test_defaults():
    import inspect
    sig = inspect.signature(train_bpe)
    assert sig.parameters["vocab_size"].default == 8000
    assert sig.parameters["coverage"].default == 0.9995


def _corpus(seed=0, n=300):
    rng = random.Random(seed)
    syll = ["ka", "ki", "to", "no", "ga", "wa", "shi", "ru", "ta"]
    words = ["".join(rng.choice(syll) for _ in range(rng.randint(1, 4))) for _ in range(80)]
    return [[rng.choice(words) for _ in range(rng.randint(2, 8))] for _ in range(n)]


def test_reaches_target_size_and_ids_dense():
    model = train_bpe(_corpus(), vocab_size=40, coverage=1.0)
    assert len(model.vocab) == 40
    assert sorted(model.piece_to_id(p) for p in model.vocab) == list(range(40))
    known = set(model.vocab)
    for a, b in model.merges:
        assert a in known and b in known


def test_single_char_word():
    model = train_bpe(_corpus(), vocab_size=40, coverage=1.0)
    enc = encode(model, "k")
    assert len(enc.ids) == 1 and not enc.has_unk


def test_round_trip_without_unk():
    corpus = _corpus(1)
    model = train_bpe(corpus, vocab_size=60, coverage=1.0)
    for sent in corpus:
        for w in sent:
            enc = encode(model, w)
            assert not enc.has_unk
            assert decode(model, enc.ids) == w


def test_uncovered_character_is_unk():
    corpus = [["aaaa"] * 50 + ["b"] * 50 + ["z"]]
    model = train_bpe(corpus, vocab_size=10, coverage=0.99)
    assert "z" not in model.vocab
    enc = encode(model, "az")
    assert model.unk_id in enc.ids and enc.has_unk


def test_decode_errors_and_empty():
    model = train_bpe(_corpus(), vocab_size=30, coverage=1.0)
    assert decode(model, []) == ""
    with pytest.raises(IdOutOfRange):
        decode(model, [30])


def test_encode_deterministic_and_total():
    model = train_bpe(_corpus(), vocab_size=50, coverage=1.0)
    for w in ["", "kakaka", "xyz", "tonoga"]:
        assert encode(model, w) == encode(model, w)


def test_save_load_and_merge_replay(tmp_path):
    corpus = _corpus(2)
    model = train_bpe(corpus, vocab_size=50, coverage=1.0)
    path = tmp_path / "bpe.txt"
    model.save(path)
    back = BpeModel.load(path)
    assert back.vocab == model.vocab and back.merges == model.merges
    # replaying the merges rebuilds the identical vocabulary
    replay = list(model.vocab[: 1 + len({c for s in corpus for w in s for c in w})])
    for a, b in model.merges:
        if a + b not in replay:
            replay.append(a + b)
    assert replay == model.vocab


def test_encode_sentence_segmentation():
    model = train_bpe(_corpus(), vocab_size=40, coverage=1.0)
    words = ["kakato", "no", "shiru"]
    ids, lengths, unks = encode_sentence(model, words)
    assert sum(lengths) == len(ids)
    assert unks == [False] * 3
    pos = 0
    for w, n in zip(words, lengths):
        assert decode(model, ids[pos:pos + n]) == w
        pos += n


def test_encode_tree_keeps_pieces_under_parent():
    model = train_bpe([["abab", "ab"]] * 3, vocab_size=4, coverage=1.0)
    t = encode_tree(model, parse_tree("(S (N abab) (V b))"))
    assert t.children[0].children == ("ab", "ab")
    assert t.children[1].children == ("b",)
