"""Command-line pipeline: render, collect, build-dataset, train, route, eval, report.

Every stage writes into its own subdirectory of the output directory and
records input/output digests in ``run_manifest.json``. Before running, a
stage re-verifies the whole upstream chain and refuses to run on stale or
tampered inputs.

Exit codes: 0 ok, 2 configuration error, 3 stale input, 4 provider failure,
5 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .annotations import Corpus, LocalizationClient, load_corpus, objects_for
from .config import RunConfig, load_config, parse_override
from .dataset import BuildConfig, assemble_dataset, collect_scores, read_dataset, read_scores, write_dataset, write_scores
from .errors import (
    AnnotationParseError,
    ConfigError,
    DatasetBuildError,
    GatewayError,
    IncompatibleModelError,
    InvalidParameterError,
    JudgeArityError,
    ProtocolError,
    ProviderError,
    StaleInputError,
    TransportError,
    VPKitError,
)
from .gateway import ChatCompletionsProvider, Gateway, LvlmRequest, MessagesProvider, MockProfile, MockProvider, ResponseCache
from .image import decode_image, encode_png
from .metrics import (
    DESCRIBE_PROMPT,
    ChairInput,
    build_judge_prompt,
    chair,
    default_synonyms,
    load_synonyms,
    run_comparators,
)
from .prompts import apply_prompt, default_pool, validate_pool
from .router import EndpointFeatures, HandcraftedFeatures, extract_features, fit, load_model, route_images, save_model
from .synthetic import BUCKET_PROMPTS, bucket_profile, make_corpus, write_corpus

log = logging.getLogger("vpkit")

EXIT_OK, EXIT_CONFIG, EXIT_STALE, EXIT_PROVIDER, EXIT_INTERNAL = 0, 2, 3, 4, 5
RUN_FORMAT = "vprun/1"
ProviderFactory = Callable[[RunConfig], "tuple[str, Any]"]


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_provider(cfg: RunConfig) -> tuple[str, Any]:
    """Resolve ``[model] ref`` to (model name used in requests, provider)."""
    kind, _, rest = cfg.model.partition(":")
    if not rest:
        raise ConfigError(f"model ref must look like kind:name, got {cfg.model!r}")
    if kind == "mock":
        path = Path(rest)
        if not path.is_file():
            raise ConfigError(f"mock profile not found: {path}")
        try:
            profile = MockProfile.from_json(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, AttributeError) as exc:
            raise ConfigError(f"{path}: bad mock profile: {exc}") from exc
        tag = hashlib.sha256(json.dumps(profile.to_json(), sort_keys=True).encode()).hexdigest()[:16]
        return f"mock/{tag}", MockProvider(profile)
    extra = {"base_url": cfg.base_url} if cfg.base_url else {}
    if kind == "openai":
        return cfg.model, ChatCompletionsProvider(rest, **extra)
    if kind == "anthropic":
        return cfg.model, MessagesProvider(rest, **extra)
    raise ConfigError(f"unknown model kind {kind!r} (expected mock, openai or anthropic)")


class Pipeline:
    def __init__(self, cfg: RunConfig, provider_factory: ProviderFactory | None = None):
        self.cfg = cfg
        self.out = cfg.output
        self.out.mkdir(parents=True, exist_ok=True)
        self.pool = default_pool(cfg.pool)
        validate_pool(self.pool)
        self._provider_factory = provider_factory or make_provider
        self._corpus: Corpus | None = None
        self._gateway: Gateway | None = None
        self.model_name: str | None = None
        self.provider = None

    # ---- manifest chain

    @property
    def manifest_path(self) -> Path:
        return self.out / "run_manifest.json"

    def _manifest(self) -> dict[str, Any]:
        if self.manifest_path.exists():
            try:
                doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            except ValueError:
                raise StaleInputError(f"{self.manifest_path} is corrupt; rerun the pipeline from collect") from None
            if doc.get("format") == RUN_FORMAT:
                return doc
        return {"format": RUN_FORMAT, "stages": {}}

    def _save_manifest(self, doc: dict[str, Any]) -> None:
        doc["tool_version"] = __version__
        doc["config_digest"] = hashlib.sha256(json.dumps(self.cfg.values, sort_keys=True).encode()).hexdigest()
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def _rel(self, p: Path) -> str:
        try:
            return str(p.relative_to(self.out))
        except ValueError:
            return str(p)

    def _abs(self, s: str) -> Path:
        p = Path(s)
        return p if p.is_absolute() else self.out / p

    def verify(self, stage: str, _seen: set[str] | None = None) -> None:
        """Check ``stage`` and everything upstream of it is complete and untouched."""
        seen = _seen if _seen is not None else set()
        if stage in seen:
            return
        seen.add(stage)
        entry = self._manifest()["stages"].get(stage)
        if not entry or entry.get("status") != "done":
            raise StaleInputError(f"stage '{stage}' has not completed; run `vpkit {stage}` first")
        if entry.get("config_digest") != self.cfg.digest(stage):
            raise StaleInputError(f"configuration changed since '{stage}' ran; rerun `vpkit {stage}`")
        for kind in ("inputs", "outputs"):
            for rel, digest in entry.get(kind, {}).items():
                path = self._abs(rel)
                if not path.is_file() or _sha(path) != digest:
                    raise StaleInputError(f"{kind[:-1]} {path} of stage '{stage}' is missing or modified; "
                                          f"rerun `vpkit {stage}`")
        for up in entry.get("upstream", []):
            self.verify(up, seen)

    def _begin(self, stage: str) -> None:
        doc = self._manifest()
        doc["stages"][stage] = {"status": "running", "started": _now(), "config_digest": self.cfg.digest(stage)}
        self._save_manifest(doc)

    def _finish(self, stage: str, inputs: Sequence[Path], outputs: Sequence[Path], stats: dict[str, Any],
                upstream: Sequence[str] = ()) -> None:
        doc = self._manifest()
        entry = doc["stages"].setdefault(stage, {"started": _now(), "config_digest": self.cfg.digest(stage)})
        entry.update(
            status="done",
            finished=_now(),
            inputs={self._rel(p): _sha(p) for p in inputs},
            outputs={self._rel(p): _sha(p) for p in outputs},
            upstream=list(upstream),
            stats=stats,
        )
        self._save_manifest(doc)

    def _source_inputs(self) -> list[Path]:
        paths = [self.cfg.annotations]
        if self.cfg.model.startswith("mock:"):
            paths.append(Path(self.cfg.model[5:]))
        return paths

    # ---- shared resources

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            corpus = load_corpus(self.cfg.annotations, self.cfg.images)
            if self.cfg.localization:
                client = LocalizationClient(self.cfg.localization)
                records = []
                for rec in corpus.records:
                    if not rec.boxes:
                        boxes = objects_for(rec, corpus.image(rec), client)
                        rec = replace(rec, boxes=tuple(boxes))
                    records.append(rec)
                corpus = Corpus(records, corpus.stats, corpus.image_dir, corpus.images)
            self._corpus = corpus
        return self._corpus

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            self.model_name, self.provider = self._provider_factory(self.cfg)
            self._gateway = Gateway({self.model_name: self.provider}, ResponseCache(self.cfg.cache),
                                    retries=self.cfg.retries, backoff=self.cfg.backoff,
                                    max_in_flight=self.cfg.max_in_flight)
        return self._gateway

    def close(self) -> None:
        if self._gateway is not None:
            self._gateway.cache.close()

    def _features(self):
        if self.cfg.features == "handcrafted":
            return HandcraftedFeatures()
        return EndpointFeatures(self.cfg.features)

    def _dir(self, stage: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    # ---- stages

    def render(self) -> dict[str, int]:
        self._begin("render")
        d = self._dir("render")
        written = skipped = 0
        errors: list[str] = []
        outputs = []
        for rec in self.corpus.records:
            try:
                img = self.corpus.image(rec)
            except OSError as exc:
                errors.append(f"{rec.image_id}: {exc}")
                log.error("cannot read image for %s: %s", rec.image_id, exc)
                continue
            (d / rec.image_id).mkdir(exist_ok=True)
            for p in self.pool:
                raster = apply_prompt(p, img, rec.regions).raster
                target = d / rec.image_id / f"{p.id}.png"
                outputs.append(target)
                if target.exists():
                    try:
                        if decode_image(target.read_bytes()).digest() == raster.digest():
                            skipped += 1
                            continue
                    except VPKitError:
                        pass
                    log.info("re-rendering %s (content mismatch)", target)
                target.write_bytes(encode_png(raster))
                written += 1
        stats = {"written": written, "skipped": skipped, "errors": len(errors)}
        self._finish("render", [self.cfg.annotations], outputs, stats)
        print(f"render: {written} written, {skipped} up to date, {len(errors)} errors")
        if errors:
            raise ConfigError(f"{len(errors)} image(s) could not be read, first: {errors[0]}")
        return stats

    def _build_cfg(self) -> BuildConfig:
        return BuildConfig(self.model_name, self.cfg.setup, self.cfg.n_pos, self.cfg.n_neg, self.cfg.seed,
                           self.cfg.max_in_flight)

    def collect(self) -> dict[str, int]:
        self._begin("collect")
        gw = self.gateway
        before = gw.provider_calls
        scores = collect_scores(self.corpus, self.pool, gw, self._build_cfg())
        path = self._dir("collect") / "scores.jsonl"
        write_scores(scores, path)
        stats = {"images": len(scores), "provider_calls": gw.provider_calls - before, "cache_entries": len(gw.cache),
                 "model": self.model_name}
        self._finish("collect", self._source_inputs(), [path], stats)
        print(f"collect: {len(scores)} images, {stats['provider_calls']} provider calls, "
              f"{stats['cache_entries']} cache entries")
        incomplete = [s.image_id for s in scores if s.status == "incomplete"]
        if incomplete:
            raise GatewayError(f"{len(incomplete)} image(s) incomplete (first: {incomplete[0]}); "
                               "answers so far are cached, rerun `vpkit collect` to resume")
        return stats

    def build_dataset(self) -> dict[str, Any]:
        self.verify("collect")
        self._begin("build-dataset")
        scores_path = self.out / "collect" / "scores.jsonl"
        model = self._manifest()["stages"]["collect"]["stats"]["model"]
        examples, manifest = assemble_dataset(read_scores(scores_path), self.pool, {
            "model": model,
            "questions": {"setup": self.cfg.setup, "n_pos": self.cfg.n_pos, "n_neg": self.cfg.n_neg,
                          "seed": self.cfg.seed},
        })
        if not examples:
            raise DatasetBuildError("no image has a unique optimal prompt; dataset would be empty")
        d = self._dir("dataset")
        write_dataset(examples, manifest, d)
        self._finish("build-dataset", [scores_path], [d / "dataset.jsonl", d / "manifest.json"],
                     manifest["counts"], ["collect"])
        c = manifest["counts"]
        print(f"build-dataset: {c['examples']} examples of {c['total']} images "
              f"({c['excluded_tie']} ties, {c['excluded_degenerate']} degenerate, "
              f"{c['excluded_incomplete']} incomplete)")
        return manifest

    def train(self) -> dict[str, Any]:
        self.verify("build-dataset")
        self._begin("train")
        data_path = self.out / "dataset" / "dataset.jsonl"
        examples = read_dataset(data_path)
        by_id = {r.image_id: r for r in self.corpus.records}
        provider = self._features()
        feats = []
        for ex in examples:
            img = self.corpus.image(by_id[ex.image_id])
            if img.digest().hex() != ex.feature_ref:
                raise StaleInputError(f"image {ex.image_id} changed since collect; rerun `vpkit collect`")
            feats.append(extract_features(provider, img).values)
        model, history = fit(np.stack(feats), [e.label for e in examples], [p.id for p in self.pool],
                             self.cfg.train, ids=[e.image_id for e in examples], provider=provider.id)
        d = self._dir("train")
        save_model(model, d / "model.vpr")
        with open(d / "log.jsonl", "w", encoding="utf-8") as fh:
            for row in history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        last = history[-1] if history else {}
        self._finish("train", [data_path], [d / "model.vpr", d / "log.jsonl"],
                     {"examples": len(examples), "epochs": len(history), **last}, ["build-dataset"])
        print(f"train: {len(examples)} examples, {len(history)} epochs, last {last}")
        return last

    def route(self) -> dict[str, str]:
        self.verify("train")
        self._begin("route")
        model_path = self.out / "train" / "model.vpr"
        model = load_model(model_path, [p.id for p in self.pool])
        provider = self._features()
        if model.provider != provider.id:
            raise IncompatibleModelError(f"model was trained on {model.provider!r} features, "
                                         f"config uses {provider.id!r}")
        routes = route_images(model, provider, {r.image_id: self.corpus.image(r) for r in self.corpus.records})
        path = self._dir("route") / "routes.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for iid in sorted(routes):
                fh.write(json.dumps({"image_id": iid, "prompt_id": routes[iid]}, sort_keys=True) + "\n")
        hist = {p.id: sum(v == p.id for v in routes.values()) for p in self.pool}
        self._finish("route", [model_path], [path], {"images": len(routes), "histogram": hist}, ["train"])
        print(f"route: {len(routes)} images routed")
        return routes

    def _describe(self, rec, prompt_id: str) -> str:
        p = next(p for p in self.pool if p.id == prompt_id)
        prompted = apply_prompt(p, self.corpus.image(rec), rec.regions)
        return self.gateway.query(LvlmRequest(self.model_name, prompted, DESCRIBE_PROMPT)).text

    def eval(self, chair_captions: str | bool | None = None, judge: bool = False) -> dict[str, Any]:
        self.verify("collect")
        routes = None
        upstream = ["collect"]
        inputs = [self.out / "collect" / "scores.jsonl"]
        stages = self._manifest()["stages"]
        if stages.get("route", {}).get("status") == "done":
            self.verify("route")
            route_path = self.out / "route" / "routes.jsonl"
            with open(route_path, encoding="utf-8") as fh:
                routes = {d["image_id"]: d["prompt_id"] for d in map(json.loads, fh) if d}
            upstream.append("route")
            inputs.append(route_path)
        self._begin("eval")
        d = self._dir("eval")
        scores = read_scores(inputs[0])
        report = run_comparators(scores, self.pool, routes, self.cfg.eval_seed, self.cfg.include_none)
        (d / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        (d / "report.txt").write_text(report.to_table(), encoding="utf-8")
        outputs = [d / "report.csv", d / "report.txt"]
        ok_ids = [s.image_id for s in scores if s.status == "ok"]
        by_id = {r.image_id: r for r in self.corpus.records}

        if chair_captions:
            result = self._chair(chair_captions, ok_ids, by_id, routes, d, inputs, outputs)
            (d / "chair.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            outputs.append(d / "chair.json")
        if judge:
            if len(self.pool) != 8:
                raise JudgeArityError(f"the judge protocol needs an 8-prompt pool, this one has {len(self.pool)}")
            jd = d / "judge"
            jd.mkdir(exist_ok=True)
            for iid in ok_ids:
                descs = [self._describe(by_id[iid], p.id) for p in self.pool]
                (jd / f"{iid}.txt").write_text(build_judge_prompt(descs), encoding="utf-8")
                outputs.append(jd / f"{iid}.txt")
        self._finish("eval", inputs, outputs, {"images": report.n_images}, upstream)
        print(report.to_table(), end="")
        return {"report": report}

    def _chair(self, captions, ok_ids, by_id, routes, d: Path, inputs: list, outputs: list) -> dict[str, Any]:
        cats = self.corpus.stats.categories
        synonyms = load_synonyms(self.cfg.synonyms) if self.cfg.synonyms else default_synonyms(cats)
        if self.cfg.synonyms:
            inputs.append(self.cfg.synonyms)
        groups: dict[str, list[ChairInput]] = {}
        if isinstance(captions, str):
            path = Path(captions).resolve()
            inputs.append(path)
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        row = json.loads(line)
                        rec = by_id[row["image_id"]]
                    except (ValueError, KeyError) as exc:
                        raise ConfigError(f"{path}:{lineno}: bad caption line ({exc})") from exc
                    groups.setdefault(row.get("strategy", "captions"), []).append(
                        ChairInput(row["text"], rec.present))
        else:
            strategies = {"baseline": {i: "none" for i in ok_ids}}
            if routes is not None:
                strategies["router"] = {i: routes[i] for i in ok_ids}
            rows = []
            for name, choice in strategies.items():
                for iid in ok_ids:
                    text = self._describe(by_id[iid], choice[iid])
                    rows.append({"strategy": name, "image_id": iid, "prompt_id": choice[iid], "text": text})
                    groups.setdefault(name, []).append(ChairInput(text, by_id[iid].present))
            desc_path = d / "descriptions.jsonl"
            desc_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
            outputs.append(desc_path)
        return {name: chair(items, synonyms, cats) for name, items in sorted(groups.items())}

    def report(self) -> str:
        self.verify("eval")
        self._begin("report")
        parts = []
        stages = self._manifest()["stages"]
        ds = self.out / "dataset" / "manifest.json"
        inputs = [self.out / "eval" / "report.txt"]
        if stages.get("build-dataset", {}).get("status") == "done":
            self.verify("build-dataset")
            m = json.loads(ds.read_text(encoding="utf-8"))
            parts.append("dataset: " + ", ".join(f"{k}={v}" for k, v in m["counts"].items()))
            parts.append("labels: " + ", ".join(f"{k}={v}" for k, v in m["label_histogram"].items()))
            inputs.append(ds)
        if stages.get("train", {}).get("status") == "done":
            t = stages["train"]["stats"]
            val = t.get("val_accuracy")
            parts.append(f"router: {t.get('examples')} examples, {t.get('epochs')} epochs, "
                         f"final train loss {t.get('train_loss', 0.0):.4f}, "
                         f"val accuracy {'n/a' if val is None else f'{val:.4f}'}")
        parts.append("")
        parts.append(inputs[0].read_text(encoding="utf-8").rstrip("\n"))
        chair_path = self.out / "eval" / "chair.json"
        if chair_path.exists():
            parts.append("")
            for name, r in json.loads(chair_path.read_text(encoding="utf-8")).items():
                parts.append(f"CHAIR {name}: CH_S={r['ch_s']:.4f} CH_I={r['ch_i']:.4f} "
                             f"({r['sentences']} sentences, {r['mentions']} mentions)")
            inputs.append(chair_path)
        text = "\n".join(parts) + "\n"
        path = self._dir("report") / "report.txt"
        path.write_text(text, encoding="utf-8")
        self._finish("report", inputs, [path], {}, ["eval"])
        print(text, end="")
        return text


# ---- argument handling

def cmd_synth(args) -> int:
    corpus, buckets = make_corpus(args.n, seed=args.seed, size=args.size, degenerate_every=args.degenerate_every)
    out = Path(args.out)
    write_corpus(corpus, out, bucket_profile(corpus, buckets, BUCKET_PROMPTS))
    ini = out / "vpkit.ini"
    if not ini.exists():
        ini.write_text(
            "[paths]\nannotations = annotations.json\nimages = images\noutput = run\n\n"
            "[model]\nref = mock:profile.json\n\n"
            f"[questions]\nsetup = random\nn_pos = 3\nn_neg = 3\nseed = {args.seed}\n\n"
            f"[train]\nseed = {args.seed}\n",
            encoding="utf-8",
        )
    print(f"synth: {args.n} images written to {out}; config at {ini}")
    return EXIT_OK


def _add_common(ap: argparse.ArgumentParser, suppress: bool) -> None:
    # Registered on the main parser and on every subcommand, so options work
    # before or after the command name.
    d = {"default": argparse.SUPPRESS} if suppress else {}
    ap.add_argument("-c", "--config", help="INI run configuration", **d)
    ap.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                    help="override a config key (repeatable)", **d)
    ap.add_argument("--output", help="output directory ([paths] output)", **d)
    ap.add_argument("--annotations", help="annotation JSON ([paths] annotations)", **d)
    ap.add_argument("--images", help="image directory ([paths] images)", **d)
    ap.add_argument("--cache", help="response cache file ([paths] cache)", **d)
    ap.add_argument("--model", help="model ref ([model] ref), e.g. mock:profile.json", **d)
    ap.add_argument("--seed", help="question seed ([questions] seed)", **d)
    ap.add_argument("--max-in-flight", help="concurrent provider requests ([run] max_in_flight)", **d)
    ap.add_argument("-v", "--verbose", action="count", **d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpkit", description="Visual-prompt selection pipeline.")
    ap.add_argument("--version", action="version", version=f"vpkit {__version__}")
    _add_common(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=text)
        _add_common(sp, suppress=True)
        return sp

    for name, text in [
        ("render", "write every prompted image to render/"),
        ("collect", "query the LVLM for every image, prompt and question"),
        ("build-dataset", "keep images with a unique best prompt"),
        ("train", "fit the router"),
        ("route", "pick a prompt per image with the router"),
        ("report", "summarize the run"),
        ("run", "collect, build-dataset, train, route, eval and report in order"),
    ]:
        add(name, text)
    ev = add("eval", "compare selection strategies")
    ev.add_argument("--chair", nargs="?", const=True, default=None, metavar="CAPTIONS",
                    help="compute CHAIR; from a captions JSONL if given, else from generated descriptions")
    ev.add_argument("--judge", action="store_true", help="write judge prompts to eval/judge/")
    sy = sub.add_parser("synth", help="write a synthetic corpus, mock profile and config")
    sy.add_argument("out")
    sy.add_argument("--n", type=int, default=64)
    sy.add_argument("--size", type=int, default=48)
    sy.add_argument("--degenerate-every", type=int, default=0)
    sy.add_argument("--seed", type=int, default=0)
    return ap


def _overrides(args) -> list[tuple[str, str, str]]:
    out = [parse_override(s) for s in args.set or []]
    cwd = Path.cwd()
    for flag, sec, key, is_path in [
        ("output", "paths", "output", True), ("annotations", "paths", "annotations", True),
        ("images", "paths", "images", True), ("cache", "paths", "cache", True),
        ("model", "model", "ref", False), ("seed", "questions", "seed", False),
        ("max_in_flight", "run", "max_in_flight", False),
    ]:
        value = getattr(args, flag)
        if value is None:
            continue
        if is_path:
            value = str((cwd / value).resolve())
        elif flag == "model" and value.startswith("mock:"):
            value = "mock:" + str((cwd / value[5:]).resolve())
        out.append((sec, key, value))
    return out


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StaleInputError):
        return EXIT_STALE
    if isinstance(exc, (ProviderError, GatewayError, TransportError, ProtocolError)):
        return EXIT_PROVIDER
    if isinstance(exc, (ConfigError, AnnotationParseError, InvalidParameterError, JudgeArityError,
                        IncompatibleModelError, FileNotFoundError)):
        return EXIT_CONFIG
    return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None, provider_factory: ProviderFactory | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose or 0, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    pipe = None
    try:
        if args.command == "synth":
            return cmd_synth(args)
        pipe = Pipeline(load_config(args.config, _overrides(args)), provider_factory)
        if args.command == "run":
            for step in (pipe.collect, pipe.build_dataset, pipe.train, pipe.route, pipe.eval, pipe.report):
                step()
        elif args.command == "eval":
            pipe.eval(args.chair, args.judge)
        else:
            getattr(pipe, args.command.replace("-", "_"))()
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        if code == EXIT_INTERNAL and not isinstance(exc, VPKitError):
            log.exception("internal error")
        print(f"vpkit: error: {exc}", file=sys.stderr)
        return code
    finally:
        if pipe is not None:
            pipe.close()


if __name__ == "__main__":
    sys.exit(main())
