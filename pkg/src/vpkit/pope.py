"""Presence questions, yes/no parsing and the per-session accuracy score."""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .annotations import CategoryStats, ImageRecord
from .errors import QuestionGenerationError, UndefinedScoreError

SETUPS = ("random", "popular", "adversarial")
DEFAULT_N_POS = 3
DEFAULT_N_NEG = 3


@dataclass(frozen=True)
class PresenceQuestion:
    image_id: str
    object: str
    polarity: str  # "positive" | "negative"
    setup: str
    text: str

    @property
    def truth(self) -> bool:
        return self.polarity == "positive"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PresenceQuestion":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class AnswerOutcome:
    question: PresenceQuestion
    parsed: str  # "yes" | "no" | "unknown"
    correct: bool


def article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def question_text(obj: str) -> str:
    return f"Is there {article(obj)} {obj} in the image?"


def _rng(seed: int, image_id: str) -> random.Random:
    h = hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


def generate_questions(
    rec: ImageRecord,
    stats: CategoryStats,
    setup: str = "random",
    n_pos: int = DEFAULT_N_POS,
    n_neg: int = DEFAULT_N_NEG,
    seed: int = 0,
) -> list[PresenceQuestion]:
    """Positives sampled from the image's objects, negatives per ``setup``.

    Images with fewer than ``n_pos`` present (or ``n_neg`` absent) categories
    contribute all they have; see :func:`is_short`.
    """
    if setup not in SETUPS:
        raise QuestionGenerationError(f"unknown setup {setup!r}")
    present = sorted(rec.present)
    if not present:
        raise QuestionGenerationError(f"image {rec.image_id} has no present categories")
    absent = sorted(set(stats.categories) - rec.present)
    if not absent:
        raise QuestionGenerationError(f"image {rec.image_id}: no absent categories to ask about")

    rng = _rng(seed, rec.image_id)
    positives = rng.sample(present, min(n_pos, len(present)))
    k = min(n_neg, len(absent))
    freq = stats.frequency
    if setup == "random":
        negatives = rng.sample(absent, k)
    elif setup == "popular":
        negatives = sorted(absent, key=lambda c: (-freq.get(c, 0), c))[:k]
    else:
        def pressure(c: str) -> int:
            return sum(stats.cooc(c, p) for p in present)

        negatives = sorted(absent, key=lambda c: (-pressure(c), -freq.get(c, 0), c))[:k]

    out = [PresenceQuestion(rec.image_id, c, "positive", setup, question_text(c)) for c in positives]
    out += [PresenceQuestion(rec.image_id, c, "negative", setup, question_text(c)) for c in negatives]
    return out


def is_short(rec: ImageRecord, stats: CategoryStats, n_pos: int = DEFAULT_N_POS, n_neg: int = DEFAULT_N_NEG) -> bool:
    """True when the image cannot supply the full positive/negative quota."""
    absent = set(stats.categories) - rec.present
    return len(rec.present) < n_pos or len(absent) < n_neg


_WORD = re.compile(r"[a-z]+(?:'[a-z]+)?")


def parse_yes_no(response: str) -> str:
    tokens = _WORD.findall(response.lower())
    if not tokens:
        return "unknown"
    if tokens[0] in ("yes", "no"):
        return tokens[0]
    for tok in tokens[:10]:
        if tok in ("yes", "no"):
            return tok
    return "unknown"


def judge_answer(question: PresenceQuestion, response: str) -> AnswerOutcome:
    parsed = parse_yes_no(response)
    correct = (parsed == "yes" and question.truth) or (parsed == "no" and not question.truth)
    return AnswerOutcome(question, parsed, correct)


def correct_count(outcomes: Iterable[AnswerOutcome]) -> int:
    return sum(1 for o in outcomes if o.correct)


def score_fraction(outcomes: Sequence[AnswerOutcome]) -> Fraction:
    if not outcomes:
        raise UndefinedScoreError("score is undefined for an empty session")
    return Fraction(correct_count(outcomes), len(outcomes))


def score_session(outcomes: Sequence[AnswerOutcome]) -> float:
    """Fraction of presence questions answered correctly."""
    if not outcomes:
        raise UndefinedScoreError("score is undefined for an empty session")
    return correct_count(outcomes) / len(outcomes)


def write_questions(path, questions: Iterable[PresenceQuestion]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(q.to_json() + "\n")


def read_questions(path) -> list[PresenceQuestion]:
    with open(path, encoding="utf-8") as fh:
        return [PresenceQuestion.from_json(line) for line in fh if line.strip()]
