"""Run configuration: an INI file with one section per concern.

Example::

    [paths]
    annotations = data/annotations.json
    images = data/images
    output = out
    # cache defaults to <output>/cache.log

    [model]
    ref = mock:data/profile.json     ; or openai:<model>, anthropic:<model>
    base_url =                       ; optional API base override

    [pool]
    drop = arrow
    stroke = 3
    color = 255,0,0

    [pool.circle]
    stroke = 5

    [questions]
    setup = random
    n_pos = 3
    n_neg = 3
    seed = 0

    [train]
    epochs = 20

    [features]
    provider = handcrafted           ; or an encoder URL

    [endpoints]
    localization =                   ; optional detector URL

    [run]
    max_in_flight = 4

    [eval]
    seed = 0
    include_none = true
    synonyms =                       ; optional TSV

Relative paths resolve against the config file's directory. API keys are
read from ``OPENAI_API_KEY`` / ``ANTHROPIC_API_KEY`` and never from here.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .pope import SETUPS
from .router import TrainConfig

SCHEMA: dict[str, set[str]] = {
    "paths": {"annotations", "images", "output", "cache"},
    "model": {"ref", "base_url"},
    "pool": {"drop", "stroke", "color", "sigma_frac", "sigma", "margin"},
    "questions": {"setup", "n_pos", "n_neg", "seed"},
    "train": {"lr", "epochs", "batch_size", "weight_decay", "seed", "val_fraction", "hidden", "early_stopping",
              "patience"},
    "features": {"provider"},
    "endpoints": {"localization"},
    "run": {"max_in_flight", "retries", "backoff"},
    "eval": {"seed", "include_none", "synonyms"},
}
_PROMPT_KEYS = {"color", "stroke", "sigma", "sigma_frac", "margin"}

# Config keys each stage's outputs depend on; a change invalidates the stage.
STAGE_KEYS: dict[str, tuple[str, ...]] = {
    "render": ("paths.annotations", "paths.images", "pool", "endpoints"),
    "collect": ("paths.annotations", "paths.images", "pool", "endpoints", "model", "questions"),
}
STAGE_KEYS["build-dataset"] = STAGE_KEYS["collect"]
STAGE_KEYS["train"] = STAGE_KEYS["collect"] + ("train", "features")
STAGE_KEYS["route"] = STAGE_KEYS["train"]
STAGE_KEYS["eval"] = STAGE_KEYS["train"] + ("eval",)
STAGE_KEYS["report"] = STAGE_KEYS["eval"]


@dataclass
class RunConfig:
    annotations: Path
    images: Path
    output: Path
    cache: Path
    model: str
    pool: dict[str, Any]
    setup: str
    n_pos: int
    n_neg: int
    seed: int
    train: TrainConfig
    features: str = "handcrafted"
    localization: str | None = None
    base_url: str | None = None
    max_in_flight: int = 4
    retries: int = 3
    backoff: float = 1.0
    eval_seed: int = 0
    include_none: bool = True
    synonyms: Path | None = None
    values: dict[str, dict[str, str]] = field(default_factory=dict)

    def digest(self, stage: str) -> str:
        """Hash of the settings ``stage`` depends on."""
        picked: dict[str, Any] = {}
        for key in STAGE_KEYS[stage]:
            sec, _, name = key.partition(".")
            for s, items in self.values.items():
                if s == sec or s.startswith(sec + "."):
                    for k, v in items.items():
                        if not name or k == name:
                            picked[f"{s}.{k}"] = v
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()


def _int(values, sec, key, default=None) -> int | None:
    raw = values.get(sec, {}).get(key)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: expected an integer, got {raw!r}") from None


def _float(values, sec, key, default=None) -> float | None:
    raw = values.get(sec, {}).get(key)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: expected a number, got {raw!r}") from None


def _bool(values, sec, key, default: bool) -> bool:
    raw = values.get(sec, {}).get(key)
    if raw is None or raw == "":
        return default
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{sec}] {key}: expected a boolean, got {raw!r}")


def _color(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(c) for c in raw.split(","))
    except ValueError:
        raise ConfigError(f"color must be 'r,g,b', got {raw!r}") from None


def _prompt_params(items: dict[str, str], where: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in items.items():
        if k == "color":
            out[k] = _color(v)
        elif k == "stroke":
            out[k] = _int({where: items}, where, k)
        elif k in ("sigma", "sigma_frac", "margin"):
            out[k] = _float({where: items}, where, k)
    return out


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` (the section may itself contain a dot)."""
    lhs, sep, value = text.partition("=")
    sec, dot, key = lhs.strip().rpartition(".")
    if not sep or not dot or not sec or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    return sec, key, value.strip()


def load_config(path: str | Path | None, overrides: Iterable[tuple[str, str, str]] = ()) -> RunConfig:
    """Read and validate a config; ``overrides`` (section, key, value) win over the file.

    Raises:
        ConfigError: on unknown keys, bad values, a missing seed or missing paths.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    values = {s: dict(parser[s]) for s in parser.sections()}
    for sec, key, value in overrides:
        values.setdefault(sec, {})[key] = value

    for sec, items in values.items():
        allowed = _PROMPT_KEYS if sec.startswith("pool.") else SCHEMA.get(sec)
        if allowed is None:
            raise ConfigError(f"unknown config section [{sec}]")
        unknown = set(items) - allowed
        if unknown:
            raise ConfigError(f"[{sec}] unknown keys: {sorted(unknown)}")

    def req_path(key: str) -> Path:
        raw = values.get("paths", {}).get(key)
        if not raw:
            raise ConfigError(f"[paths] {key} is required")
        return (base / raw).resolve()

    annotations, images = req_path("annotations"), req_path("images")
    if not annotations.is_file():
        raise ConfigError(f"annotations file not found: {annotations}")
    if not images.is_dir():
        raise ConfigError(f"image directory not found: {images}")
    output = req_path("output")
    cache_raw = values.get("paths", {}).get("cache")
    cache = (base / cache_raw).resolve() if cache_raw else output / "cache.log"

    model = values.get("model", {}).get("ref", "")
    if not model:
        raise ConfigError("[model] ref is required")
    if model.startswith("mock:"):
        model = "mock:" + str((base / model[5:]).resolve())

    pool_sec = values.get("pool", {})
    pool: dict[str, Any] = _prompt_params(pool_sec, "pool")
    if pool_sec.get("drop"):
        pool["drop"] = [d.strip() for d in pool_sec["drop"].split(",") if d.strip()]
    overrides_by_prompt = {s[5:]: _prompt_params(v, s) for s, v in values.items() if s.startswith("pool.")}
    if overrides_by_prompt:
        pool["overrides"] = overrides_by_prompt

    q = values.get("questions", {})
    if q.get("seed", "") == "":
        raise ConfigError("[questions] seed is required")
    setup = q.get("setup", "random")
    if setup not in SETUPS:
        raise ConfigError(f"[questions] setup must be one of {SETUPS}, got {setup!r}")

    t = values.get("train", {})
    train_kw: dict[str, Any] = {}
    for k in ("lr", "weight_decay", "val_fraction"):
        if t.get(k):
            train_kw[k] = _float(values, "train", k)
    for k in ("epochs", "batch_size", "seed", "hidden", "patience"):
        if t.get(k):
            train_kw[k] = _int(values, "train", k)
    if t.get("early_stopping"):
        train_kw["early_stopping"] = _bool(values, "train", "early_stopping", False)

    syn = values.get("eval", {}).get("synonyms")
    return RunConfig(
        annotations=annotations,
        images=images,
        output=output,
        cache=cache,
        model=model,
        pool=pool,
        setup=setup,
        n_pos=_int(values, "questions", "n_pos", 3),
        n_neg=_int(values, "questions", "n_neg", 3),
        seed=_int(values, "questions", "seed"),
        train=TrainConfig(**train_kw),
        features=values.get("features", {}).get("provider") or "handcrafted",
        localization=values.get("endpoints", {}).get("localization") or None,
        base_url=values.get("model", {}).get("base_url") or None,
        max_in_flight=_int(values, "run", "max_in_flight", 4),
        retries=_int(values, "run", "retries", 3),
        backoff=_float(values, "run", "backoff", 1.0),
        eval_seed=_int(values, "eval", "seed", 0),
        include_none=_bool(values, "eval", "include_none", True),
        synonyms=(base / syn).resolve() if syn else None,
        values=values,
    )
