"""Evaluation: POPE confusion metrics, CHAIR rates, comparator strategies and
the description-judge prompt.

Only judge prompt building and reply parsing live here; sending the prompt
goes through :class:`vpkit.gateway.Gateway` like any other query.
"""

from __future__ import annotations

import csv
import io
import random
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import ImageScores
from .errors import (
    ConfigError,
    InvalidParameterError,
    JudgeArityError,
    JudgeParseError,
    UndefinedMetricError,
    VPKitError,
)
from .pope import AnswerOutcome
from .prompts import VisualPrompt

DESCRIBE_PROMPT = "Please describe this image in detail."


# ---------------------------------------------------------------- POPE

@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion table with "yes" as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise InvalidParameterError(f"{name} must be a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[AnswerOutcome]) -> "ConfusionCounts":
        """Tally outcomes; an unparseable answer counts as predicting "no"."""
        tp = fp = tn = fn = 0
        for o in outcomes:
            said_yes = o.parsed == "yes"
            if o.question.truth:
                tp += said_yes
                fn += not said_yes
            else:
                fp += said_yes
                tn += not said_yes
        return cls(tp, fp, tn, fn)


def pope_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, precision, recall and F1; zero denominators give 0.

    Raises:
        UndefinedMetricError: if the table is empty.
    """
    if c.total == 0:
        raise UndefinedMetricError("confusion table is empty")
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    # 2pr/(p+r) written over the counts, so it is rounded once
    f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if c.tp else 0.0
    return {"accuracy": (c.tp + c.tn) / c.total, "precision": prec, "recall": rec, "f1": f1}


# ---------------------------------------------------------------- CHAIR

# Extra surface forms for common COCO categories; only entries whose target
# is in the active vocabulary are used.
_BUILTIN_SYNONYMS = {
    "person": ("man", "men", "woman", "women", "people", "boy", "girl", "child", "children", "kid",
               "person", "persons", "player", "lady", "guy", "adult", "baby", "pedestrian", "skier", "surfer"),
    "bicycle": ("bike", "cycle"),
    "motorcycle": ("motorbike", "motor bike", "scooter"),
    "airplane": ("plane", "aeroplane", "jet", "aircraft", "airliner"),
    "car": ("automobile", "sedan", "taxi"),
    "bus": ("buses",),
    "tv": ("television", "tv set"),
    "couch": ("sofa",),
    "cell phone": ("phone", "cellphone", "mobile phone", "smartphone"),
    "dining table": ("table", "dinner table"),
    "laptop": ("notebook computer",),
    "cup": ("mug",),
    "hot dog": ("hotdog", "hot dogs"),
    "donut": ("doughnut",),
    "mouse": ("computer mouse",),
    "sheep": ("lamb",),
    "knife": ("knives",),
    "wine glass": ("wineglass",),
    "potted plant": ("houseplant", "plant"),
    "teddy bear": ("teddy", "teddybear"),
}


def default_synonyms(categories: Iterable[str]) -> dict[str, str]:
    """Identity mapping over ``categories`` plus the built-in extras."""
    cats = {c.lower() for c in categories}
    table = {c: c for c in cats}
    for target, forms in _BUILTIN_SYNONYMS.items():
        if target in cats:
            for f in forms:
                table.setdefault(f, target)
    return table


def load_synonyms(path: str | Path) -> dict[str, str]:
    """Read a two-column UTF-8 TSV (surface form, category); ``#`` starts a comment."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ConfigError(f"{path}:{lineno}: expected two tab-separated columns")
            table[parts[0].strip().lower()] = parts[1].strip().lower()
    if not table:
        raise ConfigError(f"{path}: synonym table is empty")
    return table


@dataclass(frozen=True)
class ChairInput:
    text: str
    truth: frozenset[str]


@dataclass(frozen=True)
class Mention:
    sentence: int
    surface: str
    category: str
    hallucinated: bool


_SENTENCE = re.compile(r"[.!?]")
_TOKEN = re.compile(r"[a-z0-9]+")


def _singular(tok: str) -> str:
    return tok[:-1] if len(tok) > 1 and tok.endswith("s") else tok


class _Matcher:
    """Longest-match lookup of tokenized surface forms."""

    def __init__(self, synonyms: Mapping[str, str]):
        self.forms: dict[tuple[str, ...], str] = {}
        for surface, cat in synonyms.items():
            toks = tuple(_TOKEN.findall(surface.lower()))
            if toks:
                self.forms[toks] = cat
        self.longest = max(len(k) for k in self.forms)

    def find(self, tokens: Sequence[str]) -> list[tuple[str, str]]:
        out, i = [], 0
        while i < len(tokens):
            for n in range(min(self.longest, len(tokens) - i), 0, -1):
                cand = tuple(tokens[i : i + n])
                cat = self.forms.get(cand)
                if cat is None:
                    cat = self.forms.get(cand[:-1] + (_singular(cand[-1]),))
                if cat is not None:
                    out.append((" ".join(cand), cat))
                    i += n
                    break
            else:
                i += 1
        return out


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text.lower()) if s.strip()]


def extract_mentions(text: str, truth: Iterable[str], synonyms: Mapping[str, str]) -> list[Mention]:
    if not synonyms:
        raise ConfigError("synonym table is empty")
    truth = {t.lower() for t in truth}
    matcher = _Matcher(synonyms)
    out = []
    for k, sent in enumerate(sentences(text)):
        for surface, cat in matcher.find(_TOKEN.findall(sent)):
            out.append(Mention(k, surface, cat, cat not in truth))
    return out


def chair(
    inputs: Sequence[ChairInput], synonyms: Mapping[str, str], categories: Iterable[str] | None = None
) -> dict[str, float]:
    """CH_S (sentence rate) and CH_I (mention rate) over a set of descriptions.

    CH_I is 0 when nothing is mentioned. If ``categories`` is given, every
    synonym target must be one of them.

    Raises:
        ConfigError: on an empty or invalid synonym table.
        InvalidParameterError: on an empty description.
    """
    if not synonyms:
        raise ConfigError("synonym table is empty")
    if categories is not None:
        cats = {c.lower() for c in categories}
        bad = sorted({v for v in synonyms.values() if v not in cats})
        if bad:
            raise ConfigError(f"synonym targets not in the category list: {bad}")
    n_sent = n_bad_sent = n_mentions = n_hall = 0
    for k, inp in enumerate(inputs):
        sents = sentences(inp.text)
        if not sents:
            raise InvalidParameterError(f"description {k} is empty")
        mentions = extract_mentions(inp.text, inp.truth, synonyms)
        n_sent += len(sents)
        n_bad_sent += len({m.sentence for m in mentions if m.hallucinated})
        n_mentions += len(mentions)
        n_hall += sum(m.hallucinated for m in mentions)
    if n_sent == 0:
        raise InvalidParameterError("no descriptions given")
    return {
        "ch_s": n_bad_sent / n_sent,
        "ch_i": n_hall / n_mentions if n_mentions else 0.0,
        "sentences": n_sent,
        "hallucinated_sentences": n_bad_sent,
        "mentions": n_mentions,
        "hallucinated_mentions": n_hall,
    }


# ---------------------------------------------------------------- comparators

@dataclass
class StrategyRow:
    name: str
    choices: dict[str, str]  # image id -> prompt id
    mean_s: Fraction
    counts: ConfusionCounts

    def metrics(self) -> dict[str, float]:
        return pope_metrics(self.counts)


@dataclass
class ComparisonReport:
    rows: list[StrategyRow]
    n_images: int
    random_expected_s: Fraction
    notices: list[str] = field(default_factory=list)

    def row(self, name: str) -> StrategyRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "mean_s", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn", "images"])
        for r in self.rows:
            m = r.metrics()
            c = r.counts
            w.writerow([r.name, f"{float(r.mean_s):.6f}", *(f"{m[k]:.6f}" for k in ("accuracy", "precision",
                        "recall", "f1")), c.tp, c.fp, c.tn, c.fn, self.n_images])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'strategy':<14}{'mean S':>9}{'acc':>9}{'prec':>9}{'rec':>9}{'F1':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            m = r.metrics()
            lines.append(f"{r.name:<14}{float(r.mean_s):>9.4f}{m['accuracy']:>9.4f}{m['precision']:>9.4f}"
                         f"{m['recall']:>9.4f}{m['f1']:>9.4f}")
        lines.append(f"images: {self.n_images}   random-VP expected mean S: {float(self.random_expected_s):.4f}")
        lines.extend(f"note: {n}" for n in self.notices)
        return "\n".join(lines) + "\n"


def _strategy(name: str, images: Sequence[ImageScores], choices: Mapping[str, str]) -> StrategyRow:
    total = Fraction(0)
    counts = ConfusionCounts()
    for s in images:
        rec = next(r for r in s.records if r.prompt_id == choices[s.image_id])
        total += rec.fraction
        counts = counts + ConfusionCounts.from_outcomes(rec.outcomes)
    return StrategyRow(name, dict(choices), total / len(images), counts)


def run_comparators(
    scores: Sequence[ImageScores],
    pool: Sequence[VisualPrompt],
    routes: Mapping[str, str] | None = None,
    seed: int = 0,
    include_none: bool = True,
) -> ComparisonReport:
    """Evaluate baseline, random VP, best VP, router and Oracle on scored images.

    Only fully scored images take part. ``routes`` maps image id to the
    router's choice; without it the router row is left out.

    Raises:
        UndefinedMetricError: if no image is fully scored.
        VPKitError: if Oracle falls below the best fixed prompt, which would
            mean the scores are inconsistent.
    """
    pool_ids = [p.id for p in pool]
    images = sorted((s for s in scores if s.status == "ok"), key=lambda s: s.image_id)
    if not images:
        raise UndefinedMetricError("no fully scored images to compare")
    notices = []
    skipped = len(scores) - len(images)
    if skipped:
        notices.append(f"{skipped} image(s) without complete scores left out")
    ids = [s.image_id for s in images]

    per_prompt = {pid: sum(next(r.fraction for r in s.records if r.prompt_id == pid) for s in images) / len(images)
                  for pid in pool_ids}
    best = max(pool_ids, key=lambda pid: (per_prompt[pid], -pool_ids.index(pid)))
    rand_pool = [pid for pid in pool_ids if include_none or pid != "none"]
    if not rand_pool:
        raise ConfigError("random-VP pool is empty")
    rng = random.Random(seed)

    rows = []
    if "none" in pool_ids:
        rows.append(_strategy("baseline", images, {i: "none" for i in ids}))
    rows.append(_strategy("random_vp", images, {i: rng.choice(rand_pool) for i in ids}))
    rows.append(_strategy("best_vp", images, {i: best for i in ids}))
    if routes is not None:
        missing = [i for i in ids if i not in routes]
        if missing:
            raise InvalidParameterError(f"no routed prompt for {len(missing)} image(s), e.g. {missing[0]}")
        rows.append(_strategy("router", images, routes))
    else:
        notices.append("no router given; router row omitted")
    oracle = {}
    for s in images:
        top = max(r.fraction for r in s.records)
        oracle[s.image_id] = next(r.prompt_id for r in s.records if r.fraction == top)
    rows.append(_strategy("oracle", images, oracle))

    expected = sum(per_prompt[pid] for pid in rand_pool) / len(rand_pool)
    report = ComparisonReport(rows, len(images), expected, notices)
    o, b = report.row("oracle").mean_s, report.row("best_vp").mean_s
    if not (o >= b >= expected):
        raise VPKitError(f"ordering violated: oracle {o} / best {b} / random expected {expected}")
    return report


# ---------------------------------------------------------------- judge

JUDGE_CRITERIA = ("Accuracy", "Detail", "Comprehensiveness", "Relevance", "Robustness")
N_DESCRIPTIONS = 8

JUDGE_SYSTEM = (
    "You are an expert in image description evaluation. Your task is to assess how well textual "
    "descriptions capture the detailed visual information of images."
)

_JUDGE_CRITERIA_TEXT = (
    "1. Accuracy: How precisely does the description reflect the actual objects, details, and "
    "attributes (such as color, shape, and number of objects) visible in the image?",
    "2. Detail: How thoroughly does the description capture visual details of the objects, including "
    "finer elements like positions, relative sizes, and relationships?",
    "3. Comprehensiveness: How well does the description cover all key elements of the image, without "
    "omitting important objects or details?",
    "4. Relevance: Does the description focus on significant and pertinent details from the image. The "
    "score decreases if the description includes unnecessary or unrelated information that distracts "
    "from the core details of the image.",
    "5. Robustness: Does the description avoid mentioning any objects or attributes that are not "
    "present in the image? Descriptions without any false information score higher. If nonexistent "
    "elements are included, the score decreases.",
)


def _format_lines() -> list[str]:
    slots = " | ".join(f"score{k}" for k in range(1, N_DESCRIPTIONS + 1))
    totals = " | ".join(f"total{k}" for k in range(1, N_DESCRIPTIONS + 1))
    return [f"{k}. {c}: {slots}" for k, c in enumerate(JUDGE_CRITERIA, 1)] + [f"Total Score: {totals}"]


def build_judge_prompt(descriptions: Sequence[str]) -> str:
    """Render the judge instruction with the eight descriptions in order.

    Raises:
        JudgeArityError: unless exactly eight descriptions are given.
    """
    if len(descriptions) != N_DESCRIPTIONS:
        raise JudgeArityError(f"expected {N_DESCRIPTIONS} descriptions, got {len(descriptions)}")
    lines = [
        "<SYSTEM_MESSAGE>",
        JUDGE_SYSTEM,
        "",
        "<INSTRUCTION>",
        f"Compare and evaluate the following {N_DESCRIPTIONS} descriptions of the provided image.",
        "",
        "Descriptions:",
        *(" ".join(str(d).split()) for d in descriptions),
        "",
        "For each description, rate a score on a scale of 1 to 10, where a higher score indicates better "
        "performance, for each of the 5 criteria:",
        *_JUDGE_CRITERIA_TEXT,
        "",
        "Only provide the numerical scores for each criterion and the total score, formatted as follows:",
        *_format_lines(),
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class JudgeScores:
    scores: dict[str, tuple[int, ...]]  # criterion -> one score per description
    stated_totals: tuple[int, ...]

    @property
    def totals(self) -> tuple[int, ...]:
        return tuple(sum(self.scores[c][k] for c in JUDGE_CRITERIA) for k in range(N_DESCRIPTIONS))

    @property
    def mismatches(self) -> tuple[int, ...]:
        """Indices of descriptions whose stated total differs from the sum."""
        return tuple(k for k, (a, b) in enumerate(zip(self.totals, self.stated_totals)) if a != b)


_LINE = re.compile(r"^\s*(?:\d+\s*\.\s*)?(accuracy|detail|comprehensiveness|relevance|robustness|total score)\s*:"
                   r"\s*(.*)$", re.IGNORECASE)


def _numbers(label: str, body: str, lo: int | None, hi: int | None) -> tuple[int, ...]:
    cells = [c.strip() for c in body.split("|")]
    if len(cells) != N_DESCRIPTIONS:
        raise JudgeParseError(f"line '{label}': expected {N_DESCRIPTIONS} scores, found {len(cells)}")
    out = []
    for c in cells:
        if not re.fullmatch(r"\d+", c):
            raise JudgeParseError(f"line '{label}': {c!r} is not an integer score")
        v = int(c)
        if lo is not None and not lo <= v <= hi:
            raise JudgeParseError(f"line '{label}': score {v} outside {lo}..{hi}")
        out.append(v)
    return tuple(out)


def parse_judge_scores(reply: str) -> JudgeScores:
    """Parse the five criterion lines and the total line of a judge reply.

    Markdown emphasis is ignored. Stated totals are kept as given; compare
    with :attr:`JudgeScores.totals` or look at ``mismatches``.

    Raises:
        JudgeParseError: naming the line that is missing or malformed.
    """
    found: dict[str, str] = {}
    for raw in reply.splitlines():
        m = _LINE.match(raw.replace("*", ""))
        if not m:
            continue
        key = m.group(1).lower()
        if key in found:
            raise JudgeParseError(f"line '{key}' appears more than once")
        found[key] = m.group(2)
    labels = {c.lower(): f"{k}. {c}" for k, c in enumerate(JUDGE_CRITERIA, 1)}
    scores = {}
    for c in JUDGE_CRITERIA:
        if c.lower() not in found:
            raise JudgeParseError(f"line '{labels[c.lower()]}' is missing")
        scores[c] = _numbers(labels[c.lower()], found[c.lower()], 1, 10)
    if "total score" not in found:
        raise JudgeParseError("line 'Total Score' is missing")
    return JudgeScores(scores, _numbers("Total Score", found["total score"], None, None))


def format_judge_reply(scores: Mapping[str, Sequence[int]], totals: Sequence[int] | None = None) -> str:
    """Write scores in the reply format the judge prompt asks for."""
    lines = [f"{k}. {c}: " + " | ".join(str(v) for v in scores[c]) for k, c in enumerate(JUDGE_CRITERIA, 1)]
    if totals is None:
        totals = [sum(scores[c][k] for c in JUDGE_CRITERIA) for k in range(N_DESCRIPTIONS)]
    lines.append("Total Score: " + " | ".join(str(v) for v in totals))
    return "\n".join(lines) + "\n"
