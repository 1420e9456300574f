"""Toy corpora for offline runs: colored-noise images with rectangular objects.

Each image has a dominant background color drawn from ``PALETTE``; the
matching mock profile makes one prompt per color bucket the clear winner, so
the best prompt is a function of something the router can see.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .annotations import Corpus, ImageRecord, ObjectBox, compute_stats
from .gateway import MockProfile
from .image import ImageRaster, RectRegion, write_image

PALETTE: tuple[tuple[int, int, int], ...] = ((200, 40, 40), (40, 170, 60), (50, 70, 200), (150, 150, 150))
CATEGORIES = ("apple", "bird", "car", "cat", "dog", "elephant", "kite", "umbrella")
BUCKET_PROMPTS = ("none", "bounding_box", "circle", "reverse_blur")


def _render(rng: np.random.Generator, bucket: int, size: int, n_objects: int):
    base = np.array(PALETTE[bucket], dtype=np.int16)
    px = base + rng.integers(-30, 31, size=(size, size, 3))
    boxes = []
    for _ in range(n_objects):
        w, h = rng.integers(size // 6, size // 2, size=2)
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        px[y0 : y0 + h, x0 : x0 + w] = rng.integers(0, 256, size=3)
        boxes.append(RectRegion(x0, y0, int(x0 + w), int(y0 + h)))
    return ImageRaster(np.clip(px, 0, 255).astype(np.uint8)), boxes


def make_corpus(
    n_images: int, seed: int = 0, size: int = 48, categories: Sequence[str] = CATEGORIES, degenerate_every: int = 0
) -> tuple[Corpus, dict[str, int]]:
    """Build an in-memory corpus; returns it with each image's color bucket.

    ``degenerate_every=k`` gives every k-th image no objects.
    """
    rng = np.random.default_rng(seed)
    records, images, buckets = [], {}, {}
    for i in range(n_images):
        image_id = f"img{i:04d}"
        bucket = int(rng.integers(len(PALETTE)))
        n_obj = 0 if degenerate_every and i % degenerate_every == degenerate_every - 1 else int(rng.integers(3, 5))
        img, regions = _render(rng, bucket, size, n_obj)
        cats = rng.choice(len(categories), size=n_obj, replace=False) if n_obj else []
        boxes = tuple(ObjectBox(categories[c], r) for c, r in zip(cats, regions))
        records.append(ImageRecord(image_id, f"{image_id}.png", frozenset(b.category for b in boxes), boxes,
                                   size, size))
        images[image_id] = img
        buckets[image_id] = bucket
    return Corpus(records, compute_stats(records, categories), images=images), buckets


def bucket_profile(
    corpus: Corpus, buckets: dict[str, int], prompts: Sequence[str] = BUCKET_PROMPTS,
    base: float = 0.4, best: float = 1.0,
) -> MockProfile:
    """Mock profile where the bucket's prompt answers with accuracy ``best``."""
    mods = {}
    for rec in corpus.records:
        digest = corpus.image(rec).digest().hex()
        mods[digest] = {prompts[buckets[rec.image_id] % len(prompts)]: best - base}
    return MockProfile({}, base, mods)


def coco_document(corpus: Corpus) -> dict[str, Any]:
    cats = list(corpus.stats.categories)
    cat_id = {c: i + 1 for i, c in enumerate(cats)}
    images, anns = [], []
    for rec in corpus.records:
        img = corpus.image(rec)
        images.append({"id": rec.image_id, "file_name": rec.file_path, "width": img.width, "height": img.height})
        for b in rec.boxes:
            r = b.region
            anns.append({"id": len(anns) + 1, "image_id": rec.image_id, "category_id": cat_id[b.category],
                         "bbox": [r.x0, r.y0, r.width, r.height]})
    return {"images": images, "annotations": anns, "categories": [{"id": cat_id[c], "name": c} for c in cats]}


def write_corpus(corpus: Corpus, out_dir: str | Path, profile: MockProfile | None = None) -> Path:
    """Write images, ``annotations.json`` and optionally ``profile.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for rec in corpus.records:
        write_image(corpus.image(rec), out_dir / "images" / rec.file_path)
    (out_dir / "annotations.json").write_text(json.dumps(coco_document(corpus), indent=1), encoding="utf-8")
    if profile is not None:
        (out_dir / "profile.json").write_text(json.dumps(profile.to_json(), indent=1, sort_keys=True),
                                              encoding="utf-8")
    return out_dir
