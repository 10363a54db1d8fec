import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accentconv.metrics import UndefinedMetricError, mos_ci, wer_cer
from accentconv.text import (
    BLANK_ID,
    Tokenizer,
    greedy_ctc_decode,
    normalize_report,
    normalize_text,
    number_to_words,
)

TOK = Tokenizer.from_file()


# ------------------------------------------------------------- normalisation


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("Hello, World!", "hello world"),
        ("It costs 12 dollars.", "it costs twelve dollars"),
        ("", ""),
        ("Don't   STOP\tnow", "dont stop now"),
        ("Café déjà vu, Straße", "cafe deja vu strasse"),
        ("Room 404 in 1999", "room four hundred four in one thousand nine hundred ninety nine"),
        ("¿Qué? — ¡Sí!", "que si"),
    ],
)
def test_normalize_examples(raw, expected):
    assert normalize_text(raw) == expected


def test_number_words_table():
    assert [number_to_words(n) for n in (0, 13, 40, 99, 100, 110, 2024)] == [
        "zero", "thirteen", "forty", "ninety nine", "one hundred", "one hundred ten",
        "two thousand twenty four"]
    report = normalize_report("pop 123456")
    assert report.text == "pop 123456" and report.unexpanded_numbers == ["123456"]


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_normalize_is_idempotent(raw):
    once = normalize_text(raw)
    assert normalize_text(once) == once
    assert set(once) <= set(string.ascii_lowercase + string.digits + " ")


# ----------------------------------------------------------------- tokenizer


def test_vocabulary_is_bounded():
    assert len(TOK) <= 128 and TOK.blank_id == BLANK_ID == 128
    with pytest.raises(ValueError):
        Tokenizer(["<unk>"] + [f"u{i}" for i in range(128)])


def test_char_fallback_and_unknown():
    assert len(TOK.encode("xqz")) == 3
    ids = TOK.encode("a~b")
    assert TOK.unk_id in ids and BLANK_ID not in ids


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=string.ascii_lowercase + " ", max_size=50))
def test_round_trip(text):
    text = " ".join(text.split())
    ids = TOK.encode(text)
    assert all(0 <= i < len(TOK) for i in ids)
    assert TOK.decode(ids) == text


def test_greedy_longest_match_prefers_bigrams():
    assert len(TOK.encode("the")) == 2


# -------------------------------------------------------------- CTC decoding


def _path_log_probs(path):
    lp = np.full((len(path), 129), -10.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


def test_greedy_decode_examples():
    a, b = TOK.encode("a")[0], TOK.encode("b")[0]
    assert greedy_ctc_decode(_path_log_probs([a, a, BLANK_ID, b]), TOK) == "ab"
    assert greedy_ctc_decode(_path_log_probs([BLANK_ID] * 4), TOK) == ""
    assert greedy_ctc_decode(_path_log_probs([a, BLANK_ID, a]), TOK) == "aa"


# ------------------------------------------------------------------- WER/CER


def dp_distance(ref, hyp):
    """Plain edit distance from the full recurrence, no backtrace."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def test_wer_examples():
    assert wer_cer("a b c", "a b c").wer == 0 and wer_cer("a b c", "a b c").cer == 0
    rep = wer_cer("hello world", "hello word")
    assert rep.wer == 0.5 and rep.substitutions == 1
    with pytest.raises(UndefinedMetricError):
        wer_cer("", "x")


def test_wer_cer_matches_dp_oracle_on_random_pairs():
    r = np.random.default_rng(99)
    words = ["a", "b", "cat", "dog", "the", "sees"]
    for _ in range(600):
        ref = " ".join(r.choice(words, size=int(r.integers(1, 7))))
        hyp = " ".join(r.choice(words, size=int(r.integers(0, 7))))
        rep = wer_cer(ref, hyp)
        assert rep.substitutions + rep.insertions + rep.deletions == dp_distance(ref.split(), hyp.split())
        assert rep.wer == dp_distance(ref.split(), hyp.split()) / len(ref.split())
        assert rep.cer == dp_distance(ref, hyp) / len(ref)
        assert len(hyp.split()) - len(ref.split()) == rep.insertions - rep.deletions


def test_substitutions_preferred_on_ties():
    rep = wer_cer("a b", "c d")
    assert (rep.substitutions, rep.insertions, rep.deletions) == (2, 0, 0)


def test_wer_can_exceed_one():
    assert wer_cer("a", "b c d").wer == 3.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("xyz"), min_size=1, max_size=5),
       st.lists(st.sampled_from("xyz"), max_size=5),
       st.lists(st.sampled_from("xyz"), max_size=5))
def test_triangle_through_intermediate(a, b, c):
    ref, mid, hyp = " ".join(a), " ".join(b), " ".join(c)
    direct = wer_cer(ref, hyp).wer * len(a)
    assert direct <= dp_distance(a, b) + dp_distance(b, c)


# ----------------------------------------------------------------------- MOS


def test_mos_ci_examples():
    assert mos_ci([4, 4, 4, 4]) == (4.0, 0.0)
    mean, half = mos_ci([3, 4, 5])
    assert (round(mean, 2), round(half, 2)) == (4.00, 1.13)
    assert mos_ci([2.5]) == (2.5, 0.0)
    with pytest.raises(UndefinedMetricError):
        mos_ci([])
    with pytest.raises(ValueError):
        mos_ci([0.5, 3])
