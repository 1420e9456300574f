"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``; the criterion lines print either way.
"""

import hashlib
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from vpkit.cli import EXIT_OK, main, make_provider
from vpkit.dataset import BuildConfig, assemble_dataset, collect_scores
from vpkit.gateway import Gateway, MockProfile, MockProvider
from vpkit.image import ImageRaster, RectRegion
from vpkit.metrics import (
    JUDGE_CRITERIA,
    ChairInput,
    ConfusionCounts,
    build_judge_prompt,
    chair,
    default_synonyms,
    format_judge_reply,
    parse_judge_scores,
    pope_metrics,
    run_comparators,
)
from vpkit.pope import AnswerOutcome, PresenceQuestion, generate_questions
from vpkit.prompts import apply_prompt, default_pool, prompt_footprint
from vpkit.router import (
    HandcraftedFeatures,
    RouterModel,
    TrainConfig,
    cross_entropy,
    extract_features,
    fit,
    forward,
    hash_split,
    init_params,
    load_model,
    loss_and_grads,
    predict,
    save_model,
    softmax,
)
from vpkit.synthetic import BUCKET_PROMPTS, bucket_profile, make_corpus

POOL = default_pool()


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert."""

    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
        with capsys.disabled():
            print(line)
        assert ok, line

    return emit


def mock_gateway(profile):
    return Gateway({"mock": MockProvider(profile)})


def random_profile(rng, corpus, pool_ids):
    mods = {}
    for rec in corpus.records:
        if rng.random() < 0.5:
            pid = pool_ids[int(rng.integers(len(pool_ids)))]
            mods[corpus.image(rec).digest().hex()] = {pid: float(rng.uniform(-0.5, 0.5))}
    return MockProfile({pid: float(rng.uniform(0, 1)) for pid in pool_ids if rng.random() < 0.8},
                       float(rng.uniform(0, 1)), mods)


# 1 ------------------------------------------------------------------------

def brute_force(corpus, profile, cfg):
    """Recount correctness straight from the hash rule, then pick labels."""
    counts, labels = {}, {}
    for rec in corpus.records:
        if not rec.boxes:
            labels[rec.image_id] = None
            continue
        digest = corpus.image(rec).digest()
        qs = generate_questions(rec, corpus.stats, cfg.setup, cfg.n_pos, cfg.n_neg, cfg.seed)
        row = {}
        for p in POOL:
            acc = profile.accuracy.get(p.id, profile.default)
            acc = min(1.0, max(0.0, acc + profile.image_modifiers.get(digest.hex(), {}).get(p.id, 0.0)))
            hits = 0
            for q in qs:
                h = hashlib.sha256(digest + p.id.encode() + q.text.encode()).digest()
                hits += int.from_bytes(h[:8], "big") / 2**64 < acc
            row[p.id] = (hits, len(qs))
        counts[rec.image_id] = row
        best = max(Fraction(*v) for v in row.values())
        winners = [pid for pid, v in row.items() if Fraction(*v) == best]
        labels[rec.image_id] = winners[0] if len(winners) == 1 else "tie"
    return counts, labels


def test_criterion_01_oracle_equivalence(report):
    t0 = time.perf_counter()
    corpus, _ = make_corpus(64, seed=11, degenerate_every=13)
    rng = np.random.default_rng(11)
    profile = random_profile(rng, corpus, [p.id for p in POOL])
    cfg = BuildConfig("mock", seed=3)
    scores = collect_scores(corpus, POOL, mock_gateway(profile), cfg)
    examples, manifest = assemble_dataset(scores, POOL)
    counts, labels = brute_force(corpus, profile, cfg)
    elapsed = time.perf_counter() - t0

    got_counts = {s.image_id: {r.prompt_id: (r.correct, r.total) for r in s.records} for s in scores if s.status == "ok"}
    want_labels = {i: l for i, l in labels.items() if l not in (None, "tie")}
    ok = (
        got_counts == counts
        and {e.image_id: e.label for e in examples} == want_labels
        and manifest["counts"]["excluded_tie"] == sum(l == "tie" for l in labels.values())
        and manifest["counts"]["excluded_degenerate"] == sum(l is None for l in labels.values())
        and elapsed < 10
    )
    report(1, "scores/ties/labels equal brute-force recount", ok,
           f"{len(examples)} labels, {manifest['counts']['excluded_tie']} ties, "
           f"{manifest['counts']['excluded_degenerate']} degenerate, {elapsed:.2f}s (< 10s)")


# 2 ------------------------------------------------------------------------

def test_criterion_02_ordering_law(report):
    rng = np.random.default_rng(22)
    pool_ids = [p.id for p in POOL]
    violations = 0
    for k in range(20):
        corpus, _ = make_corpus(24, seed=100 + k)
        profile = random_profile(rng, corpus, pool_ids)
        scores = collect_scores(corpus, POOL, mock_gateway(profile), BuildConfig("mock", seed=k))
        rep = run_comparators(scores, POOL, seed=k)
        o, b, r = rep.row("oracle").mean_s, rep.row("best_vp").mean_s, rep.random_expected_s
        violations += not (o >= b >= r)

    # alternating optimum: digest parity decides which of two prompts is perfect
    corpus, _ = make_corpus(24, seed=7)
    mods = {}
    for rec in corpus.records:
        d = corpus.image(rec).digest()
        mods[d.hex()] = {"bounding_box" if d[-1] % 2 == 0 else "circle": 1.0}
    scores = collect_scores(corpus, POOL, mock_gateway(MockProfile({}, 0.0, mods)), BuildConfig("mock"))
    rep = run_comparators(scores, POOL)
    o_alt, b_alt = rep.row("oracle").mean_s, rep.row("best_vp").mean_s
    ok = violations == 0 and o_alt > b_alt
    report(2, "Oracle >= best VP >= random-VP expectation", ok,
           f"0 violations expected, got {violations} over 20 profiles; alternating optimum "
           f"Oracle {float(o_alt):.4f} > best {float(b_alt):.4f}")


# 3 ------------------------------------------------------------------------

def test_criterion_03_router_learnability(report):
    t0 = time.perf_counter()
    corpus, buckets = make_corpus(1600, seed=5)
    profile = bucket_profile(corpus, buckets, BUCKET_PROMPTS)
    scores = collect_scores(corpus, POOL, mock_gateway(profile), BuildConfig("mock"))
    examples, _ = assemble_dataset(scores, POOL)

    ids = [s.image_id for s in scores]
    held = dict(zip(ids, hash_split(ids, 0.2)))
    images = {r.image_id: corpus.image(r) for r in corpus.records}
    feats = HandcraftedFeatures()
    train = [e for e in examples if not held[e.image_id]]
    test = [e for e in examples if held[e.image_id]]
    X = np.stack([extract_features(feats, images[e.image_id]).values for e in train])
    model, log = fit(X, [e.label for e in train], [p.id for p in POOL], TrainConfig(),
                     ids=[e.image_id for e in train], provider=feats.id)
    routes = {s.image_id: predict(model, extract_features(feats, images[s.image_id]))
              for s in scores if held[s.image_id]}
    acc = float(np.mean([routes[e.image_id] == e.label for e in test]))
    rep = run_comparators([s for s in scores if held[s.image_id]], POOL, routes)
    gap = float(rep.row("oracle").mean_s - rep.row("router").mean_s)
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and gap <= 0.02 and elapsed < 60 and len(log) == 20
    report(3, "router learns a visible optimum", ok,
           f"held-out selection accuracy {acc:.4f} (>= 0.95) on {len(test)} images, "
           f"Oracle - router S gap {gap:.4f} (<= 0.02), {elapsed:.1f}s (< 60s)")


# 4 ------------------------------------------------------------------------

def test_criterion_04_gradient_check(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    step = 1e-5
    for _ in range(100):
        params = init_params(16, 8, 4, rng)
        X = rng.normal(size=(1, 16))
        y = rng.integers(0, 4, size=1)
        _, analytic = loss_and_grads(params, X, y)
        for p, a in zip(params, analytic):
            flat, ga = p.reshape(-1), a.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                lp, _ = loss_and_grads(params, X, y)
                flat[i] = old - step
                lm, _ = loss_and_grads(params, X, y)
                flat[i] = old
                num = (lp - lm) / (2 * step)
                denom = max(abs(ga[i]), abs(num))
                if denom > 0:
                    worst = max(worst, abs(ga[i] - num) / denom)
    report(4, "analytic gradients match central differences", worst < 1e-4,
           f"max relative error {worst:.2e} (< 1e-4) over 100 points, d=16 h=8 n=4")


# 5 ------------------------------------------------------------------------

def test_criterion_05_numeric_identities(report):
    rng = np.random.default_rng(5)
    worst_sum = 0.0
    for _ in range(1000):
        s = rng.normal(scale=float(rng.choice([1, 10, 300])), size=int(rng.integers(2, 12)))
        worst_sum = max(worst_sum, abs(softmax(s).sum() - 1.0))
    ce_err = abs(cross_entropy(np.zeros(8), 0) - math.log(8))
    changed = 0
    for _ in range(1000):
        d, h, n = 6, 5, 8
        w = [rng.normal(size=(h, d)), rng.normal(size=h), rng.normal(size=(n, h)), rng.normal(size=n)]
        m = RouterModel("p", [f"p{i}" for i in range(n)], *w)
        shifted = RouterModel("p", m.prompt_ids, m.w1, m.b1, m.w2, m.b2 + np.float32(rng.normal(scale=3)))
        x = rng.normal(size=d)
        s = forward(m, x)
        changed += predict(m, x) != predict(shifted, x)
        changed += int(np.argmax(softmax(s))) != int(np.argmax(softmax(s + rng.normal(scale=100))))
    ok = worst_sum <= 1e-9 and ce_err <= 1e-12 and changed == 0
    report(5, "softmax/cross-entropy/argmax identities", ok,
           f"max |sum softmax - 1| {worst_sum:.1e} (<= 1e-9), |CE - ln 8| {ce_err:.1e} (<= 1e-12), "
           f"{changed} argmax changes under shifts (0 expected)")


# 6 ------------------------------------------------------------------------

def test_criterion_06_pope_metrics(report):
    rng = np.random.default_rng(6)
    q_pos = PresenceQuestion("i", "cat", "positive", "random", "q")
    q_neg = PresenceQuestion("i", "dog", "negative", "random", "q")
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        outs = []
        for _ in range(n):
            q = q_pos if rng.random() < 0.5 else q_neg
            parsed = str(rng.choice(["yes", "no", "unknown"]))
            outs.append(AnswerOutcome(q, parsed, (parsed == "yes") == q.truth and parsed != "unknown"))
        # independent recount over the answer list, in exact arithmetic
        yes_true = sum(o.parsed == "yes" and o.question.truth for o in outs)
        yes_all = sum(o.parsed == "yes" for o in outs)
        true_all = sum(o.question.truth for o in outs)
        right = sum((o.parsed == "yes") == o.question.truth for o in outs)
        prec = Fraction(yes_true, yes_all) if yes_all else Fraction(0)
        rec = Fraction(yes_true, true_all) if true_all else Fraction(0)
        want = {"accuracy": float(Fraction(right, n)), "precision": float(prec), "recall": float(rec),
                "f1": float(2 * prec * rec / (prec + rec)) if prec + rec else 0.0}
        mismatches += pope_metrics(ConfusionCounts.from_outcomes(outs)) != want
    m = pope_metrics(ConfusionCounts(tp=90, fp=10, tn=85, fn=15))
    worked = {"accuracy": 0.8750, "precision": 0.9000, "recall": 0.8571, "f1": 0.8780}
    worst = max(abs(m[k] - v) for k, v in worked.items())
    ok = mismatches == 0 and worst <= 5e-5
    report(6, "POPE metrics vs recount oracle", ok,
           f"{mismatches} mismatches over 1000 tables (0 expected); worked example "
           + " ".join(f"{k}={m[k]:.4f}" for k in worked) + f" (max dev {worst:.1e} <= 5e-5)")


# 7 ------------------------------------------------------------------------

TOY_CAPTIONS = [
    # (text, truth, sentences, hallucinated sentences, mentions, hallucinated mentions), counted by hand
    ("A cat sits on a mat. Two dogs play nearby.", {"cat", "dog"}, 2, 0, 2, 0),
    ("A man walks past a bus! There is no car.", {"person", "bus"}, 2, 1, 3, 1),
    ("Hot dogs on the dining table. A dragon watches. The table is wooden?", {"hot dog"}, 3, 3, 4, 3),
    ("A tree.   A tree and a cat.", {"tree"}, 2, 1, 3, 1),
    ("Nothing of note here.", {"car"}, 1, 0, 0, 0),
]


def test_criterion_07_chair(report):
    syn = default_synonyms(["cat", "dog", "car", "tree", "dragon", "person", "dining table", "hot dog", "bus"])
    r = chair([ChairInput(t, frozenset(g)) for t, g, *_ in TOY_CAPTIONS], syn)
    sent = sum(c[2] for c in TOY_CAPTIONS)
    bad = sum(c[3] for c in TOY_CAPTIONS)
    men = sum(c[4] for c in TOY_CAPTIONS)
    hal = sum(c[5] for c in TOY_CAPTIONS)
    one_in_four = chair([ChairInput("A cat, a dog, a car and a tree.", frozenset({"cat", "dog", "car"}))], syn)
    ok = (r["ch_s"] == bad / sent and r["ch_i"] == hal / men
          and (r["sentences"], r["hallucinated_sentences"], r["mentions"], r["hallucinated_mentions"])
          == (sent, bad, men, hal)
          and one_in_four["ch_i"] == 0.25)
    report(7, "CHAIR equals hand counts", ok,
           f"CH_S {r['ch_s']:.4f} (want {bad}/{sent}), CH_I {r['ch_i']:.4f} (want {hal}/{men}), "
           f"1-of-4 CH_I {one_in_four['ch_i']}")


# 8 ------------------------------------------------------------------------

def test_criterion_08_rendering_invariants(report):
    rng = np.random.default_rng(8)
    failures = []
    for case in range(50):
        w, h = int(rng.integers(8, 80)), int(rng.integers(8, 80))
        img = ImageRaster(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
        boxes = []
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
            boxes.append(RectRegion(x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))))
        for p in POOL:
            out = apply_prompt(p, img, boxes).raster
            if p.kind == "none" and not (out == img):
                failures.append((case, p.id, "identity"))
            if p.kind != "crop" and (out.width, out.height) != (w, h):
                failures.append((case, p.id, "size"))
            if p.kind == "reverse_blur":
                for b in boxes:
                    if not np.array_equal(out.pixels[b.y0:b.y1, b.x0:b.x1], img.pixels[b.y0:b.y1, b.x0:b.x1]):
                        failures.append((case, p.id, "in-box"))
            if p.kind in ("bounding_box", "circle", "arrow", "center_point"):
                mask = prompt_footprint(p, w, h, boxes)
                if not np.array_equal(out.pixels[~mask], img.pixels[~mask]):
                    failures.append((case, p.id, "out-of-footprint"))
                changed = np.any(out.pixels != img.pixels, axis=2)
                if np.any(changed & ~mask):
                    failures.append((case, p.id, "changed outside footprint"))
    report(8, "rendering invariants", not failures,
           f"50 random images x {len(POOL)} prompts, {len(failures)} violations"
           + (f", first {failures[0]}" if failures else ""))


# 9 ------------------------------------------------------------------------

def test_criterion_09_determinism_and_cache(report, tmp_path):
    assert main(["synth", str(tmp_path / "d"), "--n", "32", "--degenerate-every", "11"]) == EXIT_OK
    ini = str(tmp_path / "d" / "vpkit.ini")
    out = tmp_path / "d" / "run"
    stages = ["collect", "build-dataset", "train", "route", "eval", "report"]

    def run_all():
        built = []

        def factory(cfg):
            name, provider = make_provider(cfg)
            built.append(provider)
            return name, provider

        codes = [main(["-c", ini, s], provider_factory=factory) for s in stages]
        files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
                 if p.is_file() and p.name not in ("run_manifest.json", "cache.log")}
        return codes, sum(p.calls for p in built), files

    codes1, calls1, files1 = run_all()
    codes2, calls2, files2 = run_all()
    model = load_model(out / "train" / "model.vpr")
    save_model(model, tmp_path / "again.vpr")
    round_trip = load_model(tmp_path / "again.vpr") == model and \
        (tmp_path / "again.vpr").read_bytes() == (out / "train" / "model.vpr").read_bytes()
    ok = set(codes1 + codes2) == {0} and calls1 > 0 and calls2 == 0 and files1 == files2 and round_trip
    report(9, "warm rerun is call-free and byte-identical", ok,
           f"cold run {calls1} provider calls, warm run {calls2} (0 expected), "
           f"{len(files1)} artifacts identical={files1 == files2}, model round-trip bitwise={round_trip}")


# 10 -----------------------------------------------------------------------

JUDGE_LINES = [
    "1. Accuracy: How precisely does the description reflect the actual objects, details, and attributes (such as "
    "color, shape, and number of objects) visible in the image?",
    "2. Detail: How thoroughly does the description capture visual details of the objects, including finer elements "
    "like positions, relative sizes, and relationships?",
    "3. Comprehensiveness: How well does the description cover all key elements of the image, without omitting "
    "important objects or details?",
    "4. Relevance: Does the description focus on significant and pertinent details from the image. The score "
    "decreases if the description includes unnecessary or unrelated information that distracts from the core "
    "details of the image.",
    "5. Robustness: Does the description avoid mentioning any objects or attributes that are not present in the "
    "image? Descriptions without any false information score higher. If nonexistent elements are included, the "
    "score decreases.",
    "Total Score: total1 | total2 | total3 | total4 | total5 | total6 | total7 | total8",
]


def test_criterion_10_judge_protocol(report):
    descs = [f"description number {k}" for k in range(1, 9)]
    lines = build_judge_prompt(descs).splitlines()
    verbatim = all(l in lines for l in JUDGE_LINES) and all(d in lines for d in descs)
    rng = np.random.default_rng(10)
    scores = {c: tuple(int(v) for v in rng.integers(1, 11, 8)) for c in JUDGE_CRITERIA}
    parsed = parse_judge_scores(format_judge_reply(scores))
    round_trip = parsed.scores == scores and parsed.mismatches == ()
    bad_totals = list(parsed.totals)
    bad_totals[2] += 1
    flagged = parse_judge_scores(format_judge_reply(scores, bad_totals)).mismatches == (2,)
    report(10, "judge prompt and reply parsing", verbatim and round_trip and flagged,
           f"criteria lines verbatim={verbatim}, round-trip={round_trip}, inconsistent total flagged={flagged}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
