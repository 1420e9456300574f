import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from vpkit.annotations import CategoryStats, ImageRecord, compute_stats
from vpkit.errors import QuestionGenerationError, UndefinedScoreError
from vpkit.pope import (
    PresenceQuestion,
    generate_questions,
    is_short,
    judge_answer,
    parse_yes_no,
    read_questions,
    score_fraction,
    score_session,
    write_questions,
)


def rec(image_id, cats):
    return ImageRecord(image_id, f"{image_id}.png", frozenset(cats))


def stats3(freq, cooc):
    return CategoryStats(("car", "cat", "dog"), freq, cooc)


class TestGenerate:
    def test_popular(self):
        s = stats3({"dog": 5, "car": 2, "cat": 1}, {})
        qs = generate_questions(rec("a", {"cat"}), s, "popular", n_pos=1, n_neg=1)
        assert [q.object for q in qs if q.polarity == "negative"] == ["dog"]

    def test_adversarial(self):
        s = stats3({"dog": 5, "car": 2, "cat": 6}, {("car", "cat"): 4, ("cat", "dog"): 1})
        qs = generate_questions(rec("a", {"cat"}), s, "adversarial", n_pos=1, n_neg=1)
        assert [q.object for q in qs if q.polarity == "negative"] == ["car"]

    def test_adversarial_tie_breaks(self):
        s = CategoryStats(("a", "b", "c", "x"), {"b": 3, "c": 3, "a": 1, "x": 1}, {})
        qs = generate_questions(rec("i", {"x"}), s, "adversarial", n_pos=1, n_neg=3)
        assert [q.object for q in qs if q.polarity == "negative"] == ["b", "c", "a"]

    def test_text_and_article(self):
        s = CategoryStats(("apple", "umbrella", "zebra"), {}, {})
        qs = generate_questions(rec("i", {"apple"}), s, "popular", 1, 2)
        assert qs[0].text == "Is there an apple in the image?"
        assert {q.text for q in qs[1:]} == {"Is there an umbrella in the image?", "Is there a zebra in the image?"}

    def test_random_reproducible_and_uniform(self):
        s = CategoryStats(("a", "b", "c", "d", "x"), {}, {})
        r = rec("img", {"x"})
        assert generate_questions(r, s, "random", seed=7) == generate_questions(r, s, "random", seed=7)
        counts = Counter()
        for seed in range(10_000):
            (neg,) = [q.object for q in generate_questions(r, s, "random", 1, 1, seed) if q.polarity == "negative"]
            counts[neg] += 1
        for c in "abcd":
            assert abs(counts[c] / 10_000 - 0.25) <= 0.02

    def test_short_image_uses_all(self):
        s = CategoryStats(("a", "b", "c", "d", "e"), {}, {})
        r = rec("i", {"a", "b"})
        qs = generate_questions(r, s, "random", 3, 3, seed=1)
        assert sorted(q.object for q in qs if q.truth) == ["a", "b"]
        assert is_short(r, s) and not is_short(rec("j", {"a", "b", "c"}), s, 3, 2)

    def test_errors(self):
        s = CategoryStats(("a",), {}, {})
        with pytest.raises(QuestionGenerationError):
            generate_questions(rec("i", {"a"}), s)
        with pytest.raises(QuestionGenerationError):
            generate_questions(rec("i", set()), CategoryStats(("a", "b"), {}, {}))

    def test_polarity_invariant_over_corpus(self):
        rng = random.Random(0)
        cats = [f"c{i}" for i in range(12)]
        records = [rec(f"im{i}", set(rng.sample(cats, rng.randint(1, 6)))) for i in range(40)]
        s = compute_stats(records, cats)
        for setup in ("random", "popular", "adversarial"):
            for r in records:
                for q in generate_questions(r, s, setup, seed=3):
                    assert (q.object in r.present) == q.truth

    def test_jsonl_round_trip(self, tmp_path):
        s = CategoryStats(("a", "b", "c", "d"), {}, {})
        qs = generate_questions(rec("i", {"a", "b"}), s, seed=2)
        write_questions(tmp_path / "q.jsonl", qs)
        assert read_questions(tmp_path / "q.jsonl") == qs


@pytest.mark.parametrize(
    "text,want",
    [
        ("Yes, there is a dog.", "yes"),
        ("no", "no"),
        ("It is unclear.", "unknown"),
        ("  NO!  ", "no"),
        ("I think yes, there is one.", "yes"),
        ("", "unknown"),
        ("one two three four five six seven eight nine ten yes", "unknown"),
        ("Yesterday I saw it", "unknown"),
    ],
)
def test_parse_yes_no(text, want):
    assert parse_yes_no(text) == want


def outcome(correct, polarity="positive"):
    q = PresenceQuestion("i", "cat", polarity, "random", "Is there a cat in the image?")
    ans = ("Yes" if correct else "No") if polarity == "positive" else ("No" if correct else "Yes")
    return judge_answer(q, ans)


class TestScore:
    def test_five_of_six(self):
        outs = [outcome(True)] * 5 + [outcome(False, "negative")]
        assert score_session(outs) == 5 / 6 and score_fraction(outs) == Fraction(5, 6)

    def test_all_correct(self):
        assert score_session([outcome(True), outcome(True, "negative")]) == 1.0

    def test_unknown_is_wrong(self):
        q = PresenceQuestion("i", "cat", "negative", "random", "q")
        o = judge_answer(q, "Hard to say.")
        assert o.parsed == "unknown" and not o.correct

    def test_random_recount(self):
        rng = random.Random(1)
        outs = [outcome(rng.random() < 0.5, rng.choice(["positive", "negative"])) for _ in range(12)]
        manual = 0
        for o in outs:
            if (o.parsed, o.question.polarity) in (("yes", "positive"), ("no", "negative")):
                manual += 1
        assert score_session(outs) == manual / 12

    def test_empty(self):
        with pytest.raises(UndefinedScoreError):
            score_session([])


@given(st.lists(st.booleans(), min_size=1), st.lists(st.booleans(), min_size=1))
def test_weighted_mean_consistency(a, b):
    A = [outcome(x) for x in a]
    B = [outcome(x) for x in b]
    lhs = score_fraction(A + B) * (len(A) + len(B))
    assert lhs == score_fraction(A) * len(A) + score_fraction(B) * len(B)
    assert 0 <= score_session(A + B) <= 1
