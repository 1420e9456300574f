"""Object sets per image: COCO-style annotation files and a localization endpoint."""

from __future__ import annotations

import base64
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping

import httpx

from .errors import AnnotationParseError, ProtocolError, TransportError
from .image import ImageRaster, RectRegion, encode_png, read_image

log = logging.getLogger(__name__)

DEFAULT_MIN_SCORE = 0.5


@dataclass(frozen=True)
class ObjectBox:
    category: str
    region: RectRegion
    score: float = 1.0


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    file_path: str
    present: frozenset[str]
    boxes: tuple[ObjectBox, ...] = ()
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        stray = {b.category for b in self.boxes} - self.present
        if stray:
            raise AnnotationParseError(f"image {self.image_id}: box categories {sorted(stray)} not in present set")

    @property
    def regions(self) -> list[RectRegion]:
        return [b.region for b in self.boxes]


@dataclass
class CategoryStats:
    """Image-level category frequencies and pairwise co-occurrence counts."""

    categories: tuple[str, ...] = ()
    frequency: dict[str, int] = field(default_factory=dict)
    cooccurrence: dict[tuple[str, str], int] = field(default_factory=dict)

    def cooc(self, a: str, b: str) -> int:
        if a == b:
            return 0
        return self.cooccurrence.get((a, b) if a < b else (b, a), 0)

    def to_json(self) -> dict[str, Any]:
        return {
            "categories": list(self.categories),
            "frequency": dict(sorted(self.frequency.items())),
            "cooccurrence": [[a, b, n] for (a, b), n in sorted(self.cooccurrence.items())],
        }


def compute_stats(records: Iterable[ImageRecord], categories: Iterable[str] = ()) -> CategoryStats:
    records = list(records)
    freq: Counter[str] = Counter()
    cooc: Counter[tuple[str, str]] = Counter()
    universe = set(categories)
    for rec in records:
        present = sorted(rec.present)
        universe.update(present)
        freq.update(present)
        cooc.update(combinations(present, 2))
    return CategoryStats(tuple(sorted(universe)), dict(freq), dict(cooc))


@dataclass
class Corpus:
    """Annotated image set plus where its pixels come from."""

    records: list[ImageRecord]
    stats: CategoryStats
    image_dir: Path | None = None
    images: Mapping[str, ImageRaster] | None = None

    def image(self, rec: ImageRecord) -> ImageRaster:
        if self.images is not None and rec.image_id in self.images:
            return self.images[rec.image_id]
        base = self.image_dir if self.image_dir is not None else Path(".")
        return read_image(base / rec.file_path)

    def __len__(self) -> int:
        return len(self.records)


def _require(obj: Mapping[str, Any], key: str, where: str) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise AnnotationParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _bbox_to_region(bbox: Any, width: int | None, height: int | None, where: str) -> RectRegion:
    try:
        x, y, w, h = (float(v) for v in bbox)
    except (TypeError, ValueError) as exc:
        raise AnnotationParseError(f"{where}: bbox must be [x, y, w, h], got {bbox!r}") from exc
    x0, y0 = math.floor(x), math.floor(y)
    x1, y1 = max(math.ceil(x + w), x0 + 1), max(math.ceil(y + h), y0 + 1)
    if width is not None:
        x0, x1 = min(max(x0, 0), width - 1), min(max(x1, 1), width)
        x1 = max(x1, x0 + 1)
    if height is not None:
        y0, y1 = min(max(y0, 0), height - 1), min(max(y1, 1), height)
        y1 = max(y1, y0 + 1)
    return RectRegion(x0, y0, x1, y1)


def parse_coco(doc: Mapping[str, Any]) -> tuple[list[ImageRecord], CategoryStats]:
    """Turn a COCO instances document into sorted records and corpus stats."""
    if not isinstance(doc, Mapping):
        raise AnnotationParseError("top level must be a JSON object")
    images = doc.get("images", [])
    anns = doc.get("annotations", [])
    cats = doc.get("categories", [])

    cat_names: dict[Any, str] = {}
    for i, c in enumerate(cats):
        where = f"categories[{i}]"
        name = str(_require(c, "name", where)).strip().lower()
        if not name:
            raise AnnotationParseError(f"{where}: empty category name")
        cat_names[_require(c, "id", where)] = name

    meta: dict[str, dict[str, Any]] = {}
    for i, im in enumerate(images):
        where = f"images[{i}]"
        image_id = str(_require(im, "id", where))
        meta[image_id] = {
            "file": str(im.get("file_name", f"{image_id}.png")),
            "width": im.get("width"),
            "height": im.get("height"),
            "boxes": [],
        }

    for i, a in enumerate(anns):
        where = f"annotations[{i}]"
        image_id = str(_require(a, "image_id", where))
        cat_id = _require(a, "category_id", where)
        if image_id not in meta:
            raise AnnotationParseError(f"{where}: unknown image_id {image_id!r}")
        if cat_id not in cat_names:
            raise AnnotationParseError(f"{where}: unknown category_id {cat_id!r}")
        m = meta[image_id]
        region = _bbox_to_region(_require(a, "bbox", where), m["width"], m["height"], where)
        m["boxes"].append(ObjectBox(cat_names[cat_id], region, 1.0))

    records = []
    for image_id in sorted(meta):
        m = meta[image_id]
        boxes = tuple(m["boxes"])
        records.append(
            ImageRecord(
                image_id=image_id,
                file_path=m["file"],
                present=frozenset(b.category for b in boxes),
                boxes=boxes,
                width=m["width"],
                height=m["height"],
            )
        )
    return records, compute_stats(records, cat_names.values())


def load_annotations(path: str | Path) -> tuple[list[ImageRecord], CategoryStats]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: malformed JSON ({exc})") from exc
    return parse_coco(doc)


def load_corpus(path: str | Path, image_dir: str | Path | None = None) -> Corpus:
    records, stats = load_annotations(path)
    return Corpus(records, stats, Path(image_dir) if image_dir is not None else Path(path).parent)


class LocalizationClient:
    """Client for a box-returning localization service.

    Wire contract: ``POST {"image": <base64 PNG>}`` answered by a JSON list of
    ``{"category"?, "x0", "y0", "x1", "y1", "score"}`` objects.
    """

    def __init__(self, url: str, client: httpx.Client | None = None, timeout: float = 60.0):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def localize(self, img: ImageRaster, min_score: float = DEFAULT_MIN_SCORE) -> list[ObjectBox]:
        payload = {"image": base64.b64encode(encode_png(img)).decode("ascii")}
        try:
            resp = self._client.post(self.url, json=payload)
        except httpx.TransportError as exc:
            raise TransportError(f"localization endpoint unreachable: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"localization endpoint returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"localization endpoint returned {resp.status_code}")
        try:
            detections = resp.json()
        except ValueError as exc:
            raise ProtocolError("localization response is not JSON") from exc
        return parse_detections(detections, img.width, img.height, min_score)


def parse_detections(detections: Any, width: int, height: int, min_score: float) -> list[ObjectBox]:
    if not isinstance(detections, list):
        raise ProtocolError("localization response must be a JSON list")
    boxes = []
    for i, d in enumerate(detections):
        try:
            score = float(d["score"])
            x0, y0, x1, y1 = (float(d[k]) for k in ("x0", "y0", "x1", "y1"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"detection {i} is malformed: {d!r}") from exc
        if score < min_score:
            continue
        cx0 = min(max(math.floor(x0), 0), width - 1)
        cy0 = min(max(math.floor(y0), 0), height - 1)
        cx1 = max(min(math.ceil(x1), width), cx0 + 1)
        cy1 = max(min(math.ceil(y1), height), cy0 + 1)
        category = str(d.get("category") or "object").strip().lower()
        boxes.append(ObjectBox(category, RectRegion(cx0, cy0, cx1, cy1), score))
    # stable sort keeps endpoint order among equal scores
    boxes.sort(key=lambda b: -b.score)
    return boxes


def localize(
    endpoint: LocalizationClient | str, img: ImageRaster, min_score: float = DEFAULT_MIN_SCORE
) -> list[ObjectBox]:
    client = endpoint if isinstance(endpoint, LocalizationClient) else LocalizationClient(endpoint)
    return client.localize(img, min_score)


def objects_for(rec: ImageRecord, img: ImageRaster, endpoint: LocalizationClient | None = None,
                min_score: float = DEFAULT_MIN_SCORE) -> list[ObjectBox]:
    """Ground-truth boxes win; fall back to the endpoint only when none exist."""
    if rec.boxes or endpoint is None:
        return list(rec.boxes)
    return endpoint.localize(img, min_score)
