from functools import lru_cache

import pytest
from hypothesis import given, settings, strategies as st

from cedkws.errors import InvalidInputError, OOVError
from cedkws.phonemes import (
    Lexicon,
    PhonemeVocabulary,
    cer,
    grapheme_to_phoneme,
    phoneme_edit_distance,
)

VOCAB = PhonemeVocabulary.default()
LEXICON = Lexicon.default()


def levenshtein_oracle(a, b):
    """Plain recursive definition, memoized; independent of the DP table."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_vocabulary_has_74_distinct_symbols_and_blank_outside():
    assert len(VOCAB) == 74
    assert len(set(VOCAB.symbols)) == 74
    assert VOCAB.blank_id == 74
    assert VOCAB.num_classes == 75
    assert len(VOCAB.pronounceable) == 69


def test_stress_groups_cover_every_variant():
    groups = VOCAB.stress_groups
    assert groups["OW"] == ("OW0", "OW1", "OW2")
    assert len(groups) == 15
    for variant in VOCAB.stress_variants():
        assert variant in groups[variant[:-1]]


def test_vocabulary_rejects_wrong_size():
    with pytest.raises(InvalidInputError):
        PhonemeVocabulary(("A", "B"))


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "vocab.txt")
    again = PhonemeVocabulary.load(tmp_path / "vocab.txt")
    assert again.symbols == VOCAB.symbols
    assert again.hash == VOCAB.hash


def test_stop_matches_cmudict():
    cmudict = pytest.importorskip("cmudict")
    expected = tuple(cmudict.dict()["stop"][0])
    assert expected == ("S", "T", "AA1", "P")
    assert grapheme_to_phoneme("stop", LEXICON) == expected


def test_bundled_lexicon_agrees_with_cmudict():
    cmudict = pytest.importorskip("cmudict")
    ref = cmudict.dict()
    for word in LEXICON.entries:
        assert LEXICON.pronounce(word) == tuple(ref[word][0]), word


def test_multiword_is_concatenation():
    assert grapheme_to_phoneme("stop stop", LEXICON) == ("S", "T", "AA1", "P") * 2
    assert grapheme_to_phoneme("  Stop\tGO ", LEXICON) == (
        grapheme_to_phoneme("stop", LEXICON) + grapheme_to_phoneme("go", LEXICON)
    )


def test_empty_text_is_invalid():
    with pytest.raises(InvalidInputError):
        grapheme_to_phoneme("", LEXICON)
    with pytest.raises(InvalidInputError):
        grapheme_to_phoneme("   ", LEXICON)


def test_oov_error_names_the_word():
    with pytest.raises(OOVError) as info:
        grapheme_to_phoneme("stop blorptastic", LEXICON)
    assert info.value.word == "blorptastic"
    assert "blorptastic" in str(info.value)


def test_spelling_fallback():
    lex = Lexicon(LEXICON.entries, oov_policy="spelling-fallback")
    out = grapheme_to_phoneme("zork", lex)
    assert out and all(p in VOCAB.pronounceable for p in out)


def test_lexicon_file_alternates_and_comments(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("# comment\nREAD R IY1 D\nREAD R EH1 D\nLIVE(1) L IH1 V\n\n")
    lex = Lexicon.load(path)
    assert lex.entries["read"] == [("R", "IY1", "D"), ("R", "EH1", "D")]
    assert lex.pronounce("read") == ("R", "IY1", "D")
    assert lex.pronounce("LIVE") == ("L", "IH1", "V")


def test_lexicon_rejects_unknown_symbols():
    with pytest.raises(InvalidInputError):
        Lexicon({"foo": [("F", "UX")]})


def test_edit_distance_examples():
    assert phoneme_edit_distance(["S", "T", "AA1", "P"], ["S", "T", "AA1", "P"]) == 0
    assert phoneme_edit_distance(["S", "T", "AA1", "P"], ["S", "T", "AO1", "P"]) == 1
    assert levenshtein_oracle(["S", "T", "AA1", "P"], ["S", "T", "AO1", "P"]) == 1
    with pytest.raises(InvalidInputError):
        phoneme_edit_distance(["S", "T", "AA1", "P"], [])


def test_cer_examples():
    assert cer(["AE", "B"], ["AE"]) == 0.5
    assert levenshtein_oracle(["AE", "B"], ["AE"]) / 2 == 0.5
    assert cer(["AE"], ["B", "C", "D"]) == 3.0
    assert levenshtein_oracle(["AE"], ["B", "C", "D"]) == 3
    with pytest.raises(InvalidInputError):
        cer([], ["AE"])


seqs = st.lists(st.sampled_from(["AA1", "B", "K", "S", "T"]), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_edit_distance_matches_oracle(a, b):
    assert phoneme_edit_distance(a, b) == levenshtein_oracle(a, b)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_edit_distance_is_a_metric(a, b, c):
    dab = phoneme_edit_distance(a, b)
    assert dab == phoneme_edit_distance(b, a)
    assert (dab == 0) == (a == b)
    assert phoneme_edit_distance(a, c) <= dab + phoneme_edit_distance(b, c)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_cer_zero_iff_equal(r, h):
    assert cer(r, r) == 0.0
    assert (cer(r, h) == 0.0) == (r == h)
    assert cer(r, h) >= 0


@given(st.lists(st.sampled_from(sorted(LEXICON.entries)), min_size=1, max_size=4))
def test_g2p_deterministic_and_compositional(words):
    text = " ".join(words)
    once = grapheme_to_phoneme(text, LEXICON)
    assert once == grapheme_to_phoneme(text, LEXICON)
    assert once == sum((grapheme_to_phoneme(w, LEXICON) for w in words), ())
