"""Score every prompt per image and keep images with a unique best prompt."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .annotations import Corpus, ImageRecord
from .errors import DatasetBuildError, QuestionGenerationError
from .gateway import Gateway, LvlmRequest
from .image import ImageRaster, RectRegion
from .pope import (
    DEFAULT_N_NEG,
    DEFAULT_N_POS,
    AnswerOutcome,
    PresenceQuestion,
    generate_questions,
    is_short,
    judge_answer,
)
from .prompts import VisualPrompt, apply_prompt

log = logging.getLogger(__name__)

DATA_FORMAT = "vpdata/1"


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    prompt_id: str
    outcomes: tuple[AnswerOutcome, ...]
    degenerate: bool = False

    @property
    def correct(self) -> int:
        return sum(o.correct for o in self.outcomes)

    @property
    def total(self) -> int:
        return len(self.outcomes)

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.total)

    @property
    def score(self) -> float:
        return self.correct / self.total

    def to_json(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "prompt_id": self.prompt_id,
            "score": self.score,
            "correct": self.correct,
            "total": self.total,
            "degenerate": self.degenerate,
            "outcomes": [
                {
                    "object": o.question.object,
                    "polarity": o.question.polarity,
                    "setup": o.question.setup,
                    "text": o.question.text,
                    "parsed": o.parsed,
                    "correct": o.correct,
                }
                for o in self.outcomes
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "ScoreRecord":
        outcomes = tuple(
            AnswerOutcome(
                PresenceQuestion(doc["image_id"], o["object"], o["polarity"], o["setup"], o["text"]),
                o["parsed"],
                bool(o["correct"]),
            )
            for o in doc["outcomes"]
        )
        return cls(doc["image_id"], doc["prompt_id"], outcomes, bool(doc.get("degenerate", False)))


@dataclass(frozen=True)
class RouterExample:
    image_id: str
    feature_ref: str  # hex digest of the unprompted image
    label: str

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "feature_ref": self.feature_ref, "label": self.label},
                          sort_keys=True)


@dataclass
class BuildConfig:
    model: str
    setup: str = "random"
    n_pos: int = DEFAULT_N_POS
    n_neg: int = DEFAULT_N_NEG
    seed: int = 0
    max_in_flight: int | None = None


@dataclass
class ImageScores:
    """Outcome of scoring one image: ``status`` is ok, degenerate or incomplete."""

    image_id: str
    digest: str
    status: str
    records: list[ScoreRecord] = field(default_factory=list)
    short: bool = False


def evaluate_all_prompts(
    rec: ImageRecord,
    img: ImageRaster,
    pool: Sequence[VisualPrompt],
    questions: Sequence[PresenceQuestion],
    gateway: Gateway,
    model: str,
    objects: Sequence[RectRegion] | None = None,
    max_in_flight: int | None = None,
) -> list[ScoreRecord]:
    """One ScoreRecord per prompt whose queries all succeeded.

    Fewer records than pool members means the image is incomplete.
    """
    if not pool:
        raise DatasetBuildError("prompt pool is empty")
    if not questions:
        raise DatasetBuildError(f"image {rec.image_id}: no questions")
    objects = rec.regions if objects is None else list(objects)
    prompted = [apply_prompt(p, img, objects) for p in pool]
    reqs = [LvlmRequest(model, pi, q.text, truth=q.truth) for pi in prompted for q in questions]
    responses = gateway.batch_collect(reqs, max_in_flight)

    out = []
    nq = len(questions)
    for i, (p, pi) in enumerate(zip(pool, prompted)):
        chunk = responses[i * nq : (i + 1) * nq]
        failed = [r for r in chunk if isinstance(r, Exception)]
        if failed:
            log.warning("image %s prompt %s: %d failed queries (%s)", rec.image_id, p.id, len(failed), failed[0])
            continue
        outcomes = tuple(judge_answer(q, r.text) for q, r in zip(questions, chunk))
        out.append(ScoreRecord(rec.image_id, p.id, outcomes, pi.degenerate))
    return out


def select_optimal(records: Sequence[ScoreRecord]) -> str | None:
    """Prompt id with the strictly highest score, or None on a tie."""
    if not records:
        raise DatasetBuildError("select_optimal needs at least one record")
    best = max(r.fraction for r in records)
    winners = [r.prompt_id for r in records if r.fraction == best]
    return winners[0] if len(winners) == 1 else None


def score_image(
    rec: ImageRecord, corpus: Corpus, pool: Sequence[VisualPrompt], gateway: Gateway, cfg: BuildConfig
) -> ImageScores:
    img = corpus.image(rec)
    digest = img.digest().hex()
    if not rec.boxes:
        return ImageScores(rec.image_id, digest, "degenerate")
    try:
        questions = generate_questions(rec, corpus.stats, cfg.setup, cfg.n_pos, cfg.n_neg, cfg.seed)
    except QuestionGenerationError as exc:
        log.warning("skipping %s: %s", rec.image_id, exc)
        return ImageScores(rec.image_id, digest, "degenerate")
    records = evaluate_all_prompts(rec, img, pool, questions, gateway, cfg.model, max_in_flight=cfg.max_in_flight)
    status = "ok" if len(records) == len(pool) else "incomplete"
    if status == "incomplete":
        log.warning("image %s incomplete: %d/%d prompts scored", rec.image_id, len(records), len(pool))
    return ImageScores(rec.image_id, digest, status, records, is_short(rec, corpus.stats, cfg.n_pos, cfg.n_neg))


def collect_scores(
    corpus: Corpus, pool: Sequence[VisualPrompt], gateway: Gateway, cfg: BuildConfig
) -> list[ImageScores]:
    return [score_image(rec, corpus, pool, gateway, cfg) for rec in sorted(corpus.records, key=lambda r: r.image_id)]


def assemble_dataset(
    scores: Iterable[ImageScores], pool: Sequence[VisualPrompt], extra: Mapping[str, Any] | None = None
) -> tuple[list[RouterExample], dict[str, Any]]:
    """Turn per-image scores into router examples plus a counting manifest."""
    pool_ids = [p.id for p in pool]
    counts = {"total": 0, "examples": 0, "excluded_tie": 0, "excluded_degenerate": 0,
              "excluded_incomplete": 0, "short_questions": 0}
    histogram = {pid: 0 for pid in pool_ids}
    examples = []
    for s in sorted(scores, key=lambda s: s.image_id):
        counts["total"] += 1
        if s.status == "degenerate":
            counts["excluded_degenerate"] += 1
            continue
        if s.status == "incomplete":
            counts["excluded_incomplete"] += 1
            continue
        counts["short_questions"] += int(s.short)
        label = select_optimal(s.records)
        if label is None:
            counts["excluded_tie"] += 1
            continue
        examples.append(RouterExample(s.image_id, s.digest, label))
        histogram[label] += 1
        counts["examples"] += 1
    manifest = {"format": DATA_FORMAT, "pool": pool_ids, "counts": counts, "label_histogram": histogram}
    if extra:
        manifest.update(extra)
    return examples, manifest


def build_dataset(
    corpus: Corpus, pool: Sequence[VisualPrompt], gateway: Gateway, cfg: BuildConfig
) -> tuple[list[RouterExample], dict[str, Any]]:
    scores = collect_scores(corpus, pool, gateway, cfg)
    examples, manifest = assemble_dataset(scores, pool, {
        "model": cfg.model,
        "questions": {"setup": cfg.setup, "n_pos": cfg.n_pos, "n_neg": cfg.n_neg, "seed": cfg.seed},
    })
    if not examples:
        raise DatasetBuildError("no image has a unique optimal prompt; dataset would be empty")
    return examples, manifest


def write_dataset(examples: Sequence[RouterExample], manifest: Mapping[str, Any], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> list[RouterExample]:
    with open(path, encoding="utf-8") as fh:
        return [RouterExample(**json.loads(line)) for line in fh if line.strip()]


def write_scores(scores: Sequence[ImageScores], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps({
                "image_id": s.image_id,
                "digest": s.digest,
                "status": s.status,
                "short": s.short,
                "records": [r.to_json() for r in s.records],
            }, sort_keys=True) + "\n")


def read_scores(path: str | Path) -> list[ImageScores]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(ImageScores(d["image_id"], d["digest"], d["status"],
                                   [ScoreRecord.from_json(r) for r in d["records"]], d["short"]))
    return out
