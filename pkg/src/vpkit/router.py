"""Prompt router: image features -> MLP scores over the pool -> argmax prompt.

The head is a single hidden layer, ``scores = W2 @ relu(W1 @ f + b1) + b2``,
trained with softmax cross-entropy and AdamW in plain numpy. Weights are
kept as float32 in the saved model; training runs on float64 copies.

Weight file layout (``vprouter/1``)::

    b"vprouter/1\\n"
    u32 little-endian header length
    header JSON (dims, provider, prompt_ids, meta)
    W1 (h*d), b1 (h), W2 (n*h), b2 (n) as little-endian float32
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .errors import ConfigError, IncompatibleModelError, ModelParseError, NumericError, ProtocolError, TransportError
from .image import ImageRaster, encode_png, resize_bilinear

log = logging.getLogger(__name__)

MODEL_FORMAT = "vprouter/1"
_MAGIC = MODEL_FORMAT.encode() + b"\n"
FEATURE_SIZE = 336
GRID = 32
BINS = 16


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    provider: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise NumericError(f"feature vector from {self.provider} must be 1-D and finite")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class HandcraftedFeatures:
    """Offline features: 32x32 grayscale thumbnail plus 16-bin RGB histograms.

    The image is first resized to 336x336; the thumbnail is a bilinear
    downsample of that, scaled to [0, 1]. Each channel histogram sums to 1.
    """

    id = "handcrafted/1"
    dim = GRID * GRID + 3 * BINS

    def extract(self, img: ImageRaster) -> FeatureVector:
        big = resize_bilinear(img, FEATURE_SIZE, FEATURE_SIZE)
        small = resize_bilinear(big, GRID, GRID).pixels.astype(np.float64)
        gray = (0.299 * small[..., 0] + 0.587 * small[..., 1] + 0.114 * small[..., 2]) / 255.0
        px = big.pixels.reshape(-1, 3)
        hists = []
        for c in range(3):
            h = np.bincount(px[:, c] // (256 // BINS), minlength=BINS).astype(np.float64)
            hists.append(h / h.sum())
        return FeatureVector(np.concatenate([gray.ravel(), *hists]), self.id)


class EndpointFeatures:
    """Remote encoder: POST PNG bytes, receive ``{"dim": d, "values": [...]}``.

    Results are memoized by image digest.
    """

    def __init__(self, url: str, client: httpx.Client | None = None, timeout: float = 60.0):
        self.url = url
        self.id = f"endpoint:{url}"
        self._client = client or httpx.Client(timeout=timeout)
        self._memo: dict[bytes, FeatureVector] = {}
        self.calls = 0

    def extract(self, img: ImageRaster) -> FeatureVector:
        key = img.digest()
        if key in self._memo:
            return self._memo[key]
        self.calls += 1
        try:
            resp = self._client.post(self.url, content=encode_png(img), headers={"content-type": "image/png"})
        except httpx.TransportError as exc:
            raise TransportError(f"feature endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProtocolError(f"feature endpoint returned {resp.status_code}")
        try:
            doc = resp.json()
            values = np.asarray(doc["values"], dtype=np.float64)
            dim = int(doc["dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError("feature endpoint returned a malformed payload") from exc
        if values.shape != (dim,):
            raise ProtocolError(f"feature endpoint declared dim {dim} but sent {values.shape}")
        fv = FeatureVector(values, self.id)
        self._memo[key] = fv
        return fv


def extract_features(provider, img: ImageRaster) -> FeatureVector:
    return provider.extract(img)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = 512
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    early_stopping: bool = False
    patience: int = 3

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("validation fraction must lie in [0, 1)")
        if self.hidden < 1:
            raise ConfigError("hidden width must be >= 1")


@dataclass
class RouterModel:
    provider: str
    prompt_ids: tuple[str, ...]
    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (n, h)
    b2: np.ndarray  # (n,)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.prompt_ids = tuple(self.prompt_ids)
        self.w1, self.b1, self.w2, self.b2 = (np.ascontiguousarray(a, dtype=np.float32)
                                              for a in (self.w1, self.b1, self.w2, self.b2))
        h, d = self.w1.shape
        n = len(self.prompt_ids)
        if self.b1.shape != (h,) or self.w2.shape != (n, h) or self.b2.shape != (n,):
            raise IncompatibleModelError(
                f"inconsistent layer shapes: w1{self.w1.shape} b1{self.b1.shape} w2{self.w2.shape} "
                f"b2{self.b2.shape} for {n} prompts"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], len(self.prompt_ids)

    def params64(self) -> list[np.ndarray]:
        return [a.astype(np.float64) for a in (self.w1, self.b1, self.w2, self.b2)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RouterModel):
            return NotImplemented
        return (
            self.provider == other.provider
            and self.prompt_ids == other.prompt_ids
            and self.meta == other.meta
            and all(a.tobytes() == b.tobytes() and a.shape == b.shape
                    for a, b in zip((self.w1, self.b1, self.w2, self.b2), (other.w1, other.b1, other.w2, other.b2)))
        )


# ---------- math ----------


def _forward_batch(params: Sequence[np.ndarray], X: np.ndarray):
    w1, b1, w2, b2 = params
    z1 = X @ w1.T + b1
    a1 = np.maximum(z1, 0.0)
    return z1, a1, a1 @ w2.T + b2


def _as_vector(f: FeatureVector | np.ndarray) -> np.ndarray:
    return f.values if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64)


def forward(model: RouterModel, f: FeatureVector | np.ndarray) -> np.ndarray:
    x = _as_vector(f)
    d = model.dims[0]
    if x.shape != (d,):
        raise IncompatibleModelError(f"feature dim {x.shape} does not match model input dim {d}")
    if isinstance(f, FeatureVector) and f.provider != model.provider:
        raise IncompatibleModelError(f"features from {f.provider!r} but model expects {model.provider!r}")
    z1, a1, s = _forward_batch(model.params64(), x[None, :])
    if not np.all(np.isfinite(s)):
        raise NumericError(
            f"non-finite router output: hidden pre-activation finite={bool(np.all(np.isfinite(z1)))}, "
            f"max|hidden|={np.nanmax(np.abs(a1)):.3g}, scores={s[0].tolist()}"
        )
    return s[0]


def softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def cross_entropy(scores: np.ndarray, target: int) -> float:
    """Negative log-probability of ``target`` computed from raw scores."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < s.shape[-1]:
        raise IndexError(f"target {target} out of range for {s.shape[-1]} classes")
    return float(-log_softmax(s)[target])


def loss_and_grads(params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a batch and its gradient for each parameter."""
    w1, b1, w2, b2 = params
    z1, a1, s = _forward_batch(params, X)
    logp = log_softmax(s)
    B = X.shape[0]
    loss = -logp[np.arange(B), y].mean()
    ds = np.exp(logp)
    ds[np.arange(B), y] -= 1.0
    ds /= B
    gw2 = ds.T @ a1
    gb2 = ds.sum(axis=0)
    dz1 = (ds @ w2) * (z1 > 0)
    gw1 = dz1.T @ X
    gb1 = dz1.sum(axis=0)
    return float(loss), [gw1, gb1, gw2, gb2]


def init_params(d: int, h: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    k1, k2 = 1 / math.sqrt(d), 1 / math.sqrt(h)
    return [
        rng.uniform(-k1, k1, size=(h, d)),
        rng.uniform(-k1, k1, size=h),
        rng.uniform(-k2, k2, size=(n, h)),
        rng.uniform(-k2, k2, size=n),
    ]


class AdamW:
    """Adam with decoupled weight decay, applied to every parameter."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.eps, self.wd = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1 - self.lr * self.wd
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def hash_split(ids: Sequence[str], fraction: float) -> np.ndarray:
    """Boolean mask marking ids that fall in the validation share, by SHA-256."""
    out = np.zeros(len(ids), dtype=bool)
    for i, s in enumerate(ids):
        u = int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:8], "big") / 2**64
        out[i] = u < fraction
    return out


def _accuracy(params, X, y) -> float | None:
    if len(y) == 0:
        return None
    _, _, s = _forward_batch(params, X)
    return float(np.mean(np.argmax(s, axis=1) == y))


def fit(
    features: np.ndarray | Sequence[FeatureVector],
    labels: Sequence[str],
    prompt_ids: Sequence[str],
    cfg: TrainConfig | None = None,
    ids: Sequence[str] | None = None,
    provider: str | None = None,
) -> tuple[RouterModel, list[dict[str, Any]]]:
    """Train a router on (features, optimal prompt id) pairs.

    ``ids`` (image ids) drive the hash-based validation split; without them
    every example is used for training.
    """
    cfg = cfg or TrainConfig()
    prompt_ids = tuple(prompt_ids)
    if not len(labels):
        raise ConfigError("cannot train on an empty dataset")
    if isinstance(features, np.ndarray):
        X = np.asarray(features, dtype=np.float64)
    else:
        provs = {f.provider for f in features}
        if len(provs) != 1:
            raise IncompatibleModelError(f"mixed feature providers: {sorted(provs)}")
        provider = provider or provs.pop()
        X = np.stack([f.values for f in features])
    index = {p: i for i, p in enumerate(prompt_ids)}
    bad = sorted({l for l in labels if l not in index})
    if bad:
        raise ConfigError(f"labels {bad} are not in the prompt order {list(prompt_ids)}")
    y = np.array([index[l] for l in labels], dtype=np.intp)
    if X.shape[0] != len(y):
        raise ConfigError("features and labels differ in length")

    if ids is not None and cfg.val_fraction > 0:
        val = hash_split(ids, cfg.val_fraction)
    else:
        val = np.zeros(len(y), dtype=bool)
    Xt, yt, Xv, yv = X[~val], y[~val], X[val], y[val]
    if len(yt) == 0:
        raise ConfigError("validation split left no training examples")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(X.shape[1], cfg.hidden, len(prompt_ids), rng)
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    history: list[dict[str, Any]] = []
    best: tuple[float, list[np.ndarray]] | None = None
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(yt))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, Xt[idx], yt[idx])
            total += loss * len(idx)
            opt.step(grads)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericError(f"non-finite weights after epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": total / len(yt), "val_accuracy": _accuracy(params, Xv, yv)}
        history.append(entry)
        log.info("epoch %d loss %.4f val_acc %s", epoch, entry["train_loss"], entry["val_accuracy"])
        if cfg.early_stopping and len(yv):
            acc = entry["val_accuracy"]
            if best is None or acc > best[0]:
                best, stale = (acc, [p.copy() for p in params]), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best is not None:
        params = best[1]

    meta = {"seed": cfg.seed, "epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "weight_decay": cfg.weight_decay, "examples": int(len(y)), "validation": int(val.sum())}
    model = RouterModel(provider or "unknown", prompt_ids, *params, meta=meta)
    return model, history


def predict(model: RouterModel, f: FeatureVector | np.ndarray) -> str:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest index
    return model.prompt_ids[int(np.argmax(forward(model, f)))]


def route_images(model: RouterModel, provider, images: Mapping[str, ImageRaster]) -> dict[str, str]:
    """Chosen prompt id per image id."""
    return {iid: predict(model, extract_features(provider, img)) for iid, img in images.items()}


def save_model(model: RouterModel, path: str | Path) -> None:
    d, h, n = model.dims
    header = json.dumps(
        {"format": MODEL_FORMAT, "dims": [d, h, n], "provider": model.provider,
         "prompt_ids": list(model.prompt_ids), "meta": model.meta},
        sort_keys=True,
    ).encode("utf-8")
    blobs = b"".join(a.astype("<f4").tobytes() for a in (model.w1, model.b1, model.w2, model.b2))
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + blobs)


def load_model(path: str | Path, prompt_ids: Sequence[str] | None = None) -> RouterModel:
    """Read a weight file; with ``prompt_ids`` also check it matches the pool."""
    data = Path(path).read_bytes()
    if not data.startswith(b"vprouter/"):
        raise ModelParseError(f"{path}: not a router weight file")
    if not data.startswith(_MAGIC):
        tag = data.split(b"\n", 1)[0]
        raise IncompatibleModelError(f"{path}: unsupported version {tag!r}")
    pos = len(_MAGIC)
    if len(data) < pos + 4:
        raise ModelParseError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    try:
        header = json.loads(data[pos : pos + hlen])
        d, h, n = (int(v) for v in header["dims"])
        provider, order, meta = header["provider"], tuple(header["prompt_ids"]), header.get("meta", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelParseError(f"{path}: corrupt header") from exc
    pos += hlen
    if len(order) != n:
        raise IncompatibleModelError(f"{path}: header lists {len(order)} prompts but n={n}")
    sizes = [h * d, h, n * h, n]
    if len(data) - pos != 4 * sum(sizes):
        raise ModelParseError(f"{path}: expected {4 * sum(sizes)} weight bytes, found {len(data) - pos}")
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float32))
        pos += 4 * size
    w1, b1, w2, b2 = arrays
    model = RouterModel(provider, order, w1.reshape(h, d), b1, w2.reshape(n, h), b2, meta)
    if prompt_ids is not None and tuple(prompt_ids) != order:
        raise IncompatibleModelError(f"model prompt order {list(order)} does not match pool {list(prompt_ids)}")
    return model
