"""Candidate visual prompt pool and prompt application."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .image import RED, Color, ImageRaster, RectRegion, crop_region, draw_overlay, gaussian_blur, shape_footprint

KINDS = ("none", "bounding_box", "circle", "arrow", "center_point", "blur", "reverse_blur", "crop")
OVERLAY_KINDS = ("bounding_box", "circle", "arrow", "center_point")
BLUR_KINDS = ("blur", "reverse_blur")

DEFAULT_STROKE = 3
DEFAULT_SIGMA_FRAC = 0.02
DEFAULT_CROP_MARGIN = 0.10


@dataclass(frozen=True)
class VisualPrompt:
    """One member of the prompt pool.

    Only the parameters that make sense for ``kind`` may be set: overlays take
    ``color``/``stroke``, blurs take ``sigma`` (absolute) or ``sigma_frac``
    (fraction of the shorter image side), crop takes ``margin``.
    """

    id: str
    kind: str
    color: Color | None = None
    stroke: int | None = None
    sigma: float | None = None
    sigma_frac: float | None = None
    margin: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ConfigError("prompt id must be non-empty")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown prompt kind {self.kind!r}")
        overlay = self.kind in OVERLAY_KINDS
        blur = self.kind in BLUR_KINDS
        checks = {
            "color": overlay,
            "stroke": overlay,
            "sigma": blur,
            "sigma_frac": blur,
            "margin": self.kind == "crop",
        }
        for name, allowed in checks.items():
            value = getattr(self, name)
            if value is not None and not allowed:
                raise ConfigError(f"parameter {name!r} is meaningless for kind {self.kind!r}")
        if overlay and (self.color is None or self.stroke is None or self.stroke < 1):
            raise ConfigError(f"prompt {self.id!r} needs a color and a stroke >= 1")
        if blur:
            if (self.sigma is None) == (self.sigma_frac is None):
                raise ConfigError(f"prompt {self.id!r} needs exactly one of sigma / sigma_frac")
            val = self.sigma if self.sigma is not None else self.sigma_frac
            if not (math.isfinite(val) and val > 0):
                raise ConfigError(f"prompt {self.id!r}: blur parameter must be positive")
        if self.kind == "crop" and (self.margin is None or self.margin < 0):
            raise ConfigError(f"prompt {self.id!r} needs a non-negative margin")

    def blur_sigma(self, width: int, height: int) -> float:
        if self.sigma is not None:
            return self.sigma
        return self.sigma_frac * min(width, height)

    def params(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name in ("color", "stroke", "sigma", "sigma_frac", "margin"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value) if isinstance(value, Color) else value
        return out


@dataclass(frozen=True)
class PromptedImage:
    source_digest: bytes
    prompt_id: str
    raster: ImageRaster
    degenerate: bool = False


def _coerce_color(value: Any) -> Color:
    if isinstance(value, Color):
        return value
    if isinstance(value, str):
        value = [int(v) for v in value.replace(" ", "").split(",")]
    try:
        r, g, b = (int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse color {value!r}") from exc
    return Color(r, g, b)


def default_pool(config: Mapping[str, Any] | None = None) -> list[VisualPrompt]:
    """Build the 8-member pool, optionally adjusted by ``config``.

    Recognised keys: ``drop`` (ids to remove), ``stroke``, ``color``,
    ``sigma_frac``, ``sigma``, ``margin`` (applied to every member the parameter
    fits), and ``overrides`` mapping a prompt id to its own parameter dict.
    """
    config = dict(config or {})
    unknown = set(config) - {"drop", "stroke", "color", "sigma_frac", "sigma", "margin", "overrides"}
    if unknown:
        raise ConfigError(f"unknown pool config keys: {sorted(unknown)}")

    color = _coerce_color(config.get("color", RED))
    stroke = int(config.get("stroke", DEFAULT_STROKE))
    if "sigma" in config:
        blur_params = {"sigma": float(config["sigma"])}
    else:
        blur_params = {"sigma_frac": float(config.get("sigma_frac", DEFAULT_SIGMA_FRAC))}
    margin = float(config.get("margin", DEFAULT_CROP_MARGIN))

    pool = []
    for kind in KINDS:
        if kind in OVERLAY_KINDS:
            pool.append(VisualPrompt(kind, kind, color=color, stroke=stroke))
        elif kind in BLUR_KINDS:
            pool.append(VisualPrompt(kind, kind, **blur_params))
        elif kind == "crop":
            pool.append(VisualPrompt(kind, kind, margin=margin))
        else:
            pool.append(VisualPrompt(kind, kind))

    overrides = config.get("overrides") or {}
    by_id = {p.id: p for p in pool}
    for pid, params in overrides.items():
        if pid not in by_id:
            raise ConfigError(f"override for unknown prompt {pid!r}")
        params = dict(params)
        if "color" in params:
            params["color"] = _coerce_color(params["color"])
        if "sigma" in params:
            params.setdefault("sigma_frac", None)
        by_id[pid] = replace(by_id[pid], **params)

    drop = config.get("drop") or []
    if isinstance(drop, str):
        drop = [d.strip() for d in drop.split(",") if d.strip()]
    if "none" in drop:
        raise ConfigError("the 'none' prompt cannot be dropped from the pool")
    missing = set(drop) - set(by_id)
    if missing:
        raise ConfigError(f"cannot drop unknown prompts: {sorted(missing)}")
    return [by_id[p.id] for p in pool if p.id not in drop]


def validate_pool(pool: Sequence[VisualPrompt]) -> None:
    ids = [p.id for p in pool]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate prompt ids in pool: {ids}")
    if sum(p.kind == "none" for p in pool) != 1:
        raise ConfigError("pool must contain exactly one 'none' prompt")


def _union_crop_box(objects: Sequence[RectRegion], margin: float, width: int, height: int) -> RectRegion:
    ux0 = min(o.x0 for o in objects)
    uy0 = min(o.y0 for o in objects)
    ux1 = max(o.x1 for o in objects)
    uy1 = max(o.y1 for o in objects)
    # rounding guards against 0.1 * 30 == 3.0000000000000004
    mx = round(margin * (ux1 - ux0), 9)
    my = round(margin * (uy1 - uy0), 9)
    return RectRegion(
        max(0, math.floor(ux0 - mx)),
        max(0, math.floor(uy0 - my)),
        min(width, math.ceil(ux1 + mx)),
        min(height, math.ceil(uy1 + my)),
    )


def _center_dot(o: RectRegion, stroke: int, width: int, height: int) -> RectRegion:
    # box of side 2*stroke around the object center, clipped to the image
    cx, cy = (o.x0 + o.x1) // 2, (o.y0 + o.y1) // 2
    return RectRegion(max(0, cx - stroke), max(0, cy - stroke), min(width, cx + stroke), min(height, cy + stroke))


def prompt_footprint(p: VisualPrompt, width: int, height: int, objects: Sequence[RectRegion]) -> np.ndarray:
    """Union of pixels an overlay prompt may paint; all-False for other kinds."""
    mask = np.zeros((height, width), dtype=bool)
    for o in objects:
        if p.kind in _SHAPE_FOR_KIND:
            mask |= shape_footprint(_SHAPE_FOR_KIND[p.kind], o, p.stroke, width, height)
        elif p.kind == "center_point":
            mask |= shape_footprint("filled-disc", _center_dot(o, p.stroke, width, height), p.stroke, width, height)
    return mask


_SHAPE_FOR_KIND = {"bounding_box": "rect-outline", "circle": "ellipse-outline", "arrow": "arrow"}


def apply_prompt(p: VisualPrompt, img: ImageRaster, objects: Sequence[RectRegion]) -> PromptedImage:
    """Render prompt ``p`` onto ``img`` anchored on ``objects``.

    Object-anchored prompts given no objects fall back to the unmodified image
    and are marked degenerate.
    """
    for o in objects:
        o.check(img)
    digest = img.digest()

    if p.kind == "none":
        return PromptedImage(digest, p.id, img)
    if p.kind == "blur":
        return PromptedImage(digest, p.id, gaussian_blur(img, p.blur_sigma(img.width, img.height)))
    if not objects:
        return PromptedImage(digest, p.id, img, degenerate=True)

    if p.kind in _SHAPE_FOR_KIND:
        out = img
        for o in objects:
            out = draw_overlay(out, _SHAPE_FOR_KIND[p.kind], o, p.color, p.stroke)
    elif p.kind == "center_point":
        out = img
        for o in objects:
            out = draw_overlay(out, "filled-disc", _center_dot(o, p.stroke, img.width, img.height), p.color, p.stroke)
    elif p.kind == "reverse_blur":
        blurred = gaussian_blur(img, p.blur_sigma(img.width, img.height)).pixels.copy()
        keep = np.zeros((img.height, img.width), dtype=bool)
        for o in objects:
            keep[o.y0 : o.y1, o.x0 : o.x1] = True
        blurred[keep] = img.pixels[keep]
        out = ImageRaster(blurred)
    else:  # crop
        out = crop_region(img, _union_crop_box(objects, p.margin, img.width, img.height))
    return PromptedImage(digest, p.id, out)
