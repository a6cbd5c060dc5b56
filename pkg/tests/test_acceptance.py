"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line. Run with `pytest tests/test_acceptance.py -v -s`.
The toy decoupling experiment trains five seeds in parallel worker
processes and takes several minutes; everything else is fast.
"""

import concurrent.futures
import json
import math
import time

import numpy as np
import pytest

from grounding3d import gradchecks
from grounding3d import pipeline as P
from grounding3d import tensor as T
from grounding3d.attention import FFNParams
from grounding3d.certainty import (
    MASK_TOKEN,
    CaptionRecord,
    MaskPolicy,
    kmeans_1d_k2,
    mask_records,
    mask_caption,
    partition_certainty,
)
from grounding3d.decouple import DecoupleParams, decouple_features, reverse_cross_attention
from grounding3d.evaluate import EvalSample, evaluate
from grounding3d.geometry import Box3D, iou_3d, monte_carlo_iou3d
from grounding3d.losses import (
    LossWeights,
    OrientationBins,
    aggregate,
    focal_loss,
    laplacian_depth_loss,
    multibin_loss,
)
from grounding3d.tensor import Tensor, backward


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


# --- gradient integrity -------------------------------------------------------


def test_gradient_integrity_under_budget():
    start = time.perf_counter()
    results = gradchecks.run_scope("all", seed=0)
    elapsed = time.perf_counter() - start
    worst = max(err for _, err in results)
    ok = worst < 1e-5 and elapsed < 60.0
    assert report("gradient-integrity", ok,
                  f"(worst {worst:.2e}, {len(results)} checks, {elapsed:.1f}s)")


# --- attention oracle ----------------------------------------------------------


def loop_attention(q_in, kv_in, p):
    q = q_in @ p.w_q.data
    k = kv_in @ p.w_k.data
    v = kv_in @ p.w_v.data
    dk = p.width // p.heads
    m, n = q_in.shape[0], kv_in.shape[0]
    concat = np.zeros((m, p.width))
    for h in range(p.heads):
        qh, kh, vh = (x[:, h * dk:(h + 1) * dk] for x in (q, k, v))
        for i in range(m):
            logits = [sum(qh[i][t] * kh[j][t] for t in range(dk)) / math.sqrt(dk)
                      for j in range(n)]
            z = sum(math.exp(l) for l in logits)
            for c in range(dk):
                concat[i, h * dk + c] = sum(math.exp(logits[j]) / z * vh[j][c]
                                            for j in range(n))
    return concat @ p.w_o.data


def test_attention_matches_loop_oracle_100_seeds():
    from grounding3d.attention import AttentionParams, mhca, mhsa

    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.choice([4, 8]))
        heads = int(rng.choice([1, 2, 4]))
        p = AttentionParams.create(rng, d, heads)
        q_in = rng.standard_normal((int(rng.integers(1, 5)), d))
        kv = rng.standard_normal((int(rng.integers(1, 5)), d))
        worst = max(worst, float(np.max(np.abs(
            mhca(Tensor(q_in), Tensor(kv), p).data - loop_attention(q_in, kv, p)))))
        x = rng.standard_normal((int(rng.integers(1, 5)), d))
        worst = max(worst, float(np.max(np.abs(
            mhsa(Tensor(x), p).data - loop_attention(x, x, p)))))
    assert report("attention-oracle", worst < 1e-10, f"(worst |diff| {worst:.2e})")


# --- dimension-decoupling symmetry ----------------------------------------------


def test_decouple_symmetry_and_hand_cases():
    rng = np.random.default_rng(0)
    p = DecoupleParams.create(rng, m=4, d=8, heads=2, d_ff=16)
    tokens = Tensor(rng.standard_normal((5, 8)))
    t2d, t3d = decouple_features(tokens, p)
    s2d, s3d = decouple_features(tokens, p.swapped())
    swap_exact = np.array_equal(s2d.data, t3d.data) and np.array_equal(s3d.data, t2d.data)

    q = Tensor(rng.standard_normal((1, 3)))
    single = reverse_cross_attention(q, Tensor(rng.standard_normal((1, 3))),
                                     FFNParams.identity(3))
    m1_ok = np.allclose(single.data, 2.0 * q.data, atol=1e-12)

    qh = np.array([[1.0, 2.0], [-0.5, 0.75]])
    kh = np.array([[0.25, -1.0], [2.0, 0.5]])
    ffn = FFNParams.create(rng, 2, 4)
    scale = 1.0 / math.sqrt(2.0)
    a = qh @ kh.T * scale
    inv = np.exp(1.0 - a)
    weights = inv / inv.sum(axis=1, keepdims=True)
    hidden = np.maximum(weights @ qh @ ffn.w1.data + ffn.b1.data, 0.0)
    expected = qh + hidden @ ffn.w2.data + ffn.b2.data
    got = reverse_cross_attention(Tensor(qh), Tensor(kh), ffn)
    hand_err = float(np.max(np.abs(got.data - expected)))

    ok = swap_exact and m1_ok and hand_err < 1e-12
    assert report("decouple-symmetry", ok,
                  f"(swap exact: {swap_exact}, m=1 closed form: {m1_ok}, "
                  f"hand case err {hand_err:.2e})")


# --- rotated 3D IoU vs Monte Carlo -----------------------------------------------


def random_pair(rng):
    center = (rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(4, 30))
    dims = tuple(rng.uniform(0.5, 4.0, size=3))
    a = Box3D(center, dims, rng.uniform(-math.pi, math.pi))
    b = Box3D(tuple(np.asarray(center) + rng.uniform(-1.5, 1.5, 3)),
              tuple(np.maximum(0.3, np.asarray(dims) + rng.uniform(-0.5, 0.5, 3))),
              a.yaw + rng.uniform(-0.6, 0.6))
    return a, b


def test_iou3d_oracle_200_pairs_under_budget():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    worst_dev = 0.0
    violations = 0
    for _ in range(200):
        a, b = random_pair(rng)
        exact = iou_3d(a, b)
        est, err = monte_carlo_iou3d(a, b, n_samples=1_000_000,
                                     seed=int(rng.integers(1 << 31)))
        dev = abs(exact - est)
        worst_dev = max(worst_dev, dev)
        if dev > max(0.005, 4.0 * err):
            violations += 1

    sym_err = 0.0
    for _ in range(50):
        a, b = random_pair(rng)
        sym_err = max(sym_err, abs(iou_3d(a, b) - iou_3d(b, a)))
        ident = iou_3d(a, a)
        sym_err = max(sym_err, abs(ident - 1.0))
        dx, dy, dz = rng.uniform(-5, 5, 3)
        dyaw = rng.uniform(-math.pi, math.pi)
        c, s = math.cos(dyaw), math.sin(dyaw)

        def moved(box):
            x, y, z = box.center
            return Box3D((c * x + s * z + dx, y + dy, -s * x + c * z + dz),
                         box.dims, box.yaw + dyaw)

        sym_err = max(sym_err, abs(iou_3d(moved(a), moved(b)) - iou_3d(a, b)))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and sym_err < 1e-9 and elapsed < 180.0
    assert report("iou3d-oracle", ok,
                  f"(worst dev {worst_dev:.4f}, invariance err {sym_err:.1e}, "
                  f"{elapsed:.0f}s)")


# --- exact 1-D 2-means --------------------------------------------------------------


_MASK_CACHE = {}


def brute_force_min_wcss(values):
    n = len(values)
    if n not in _MASK_CACHE:
        masks = np.arange(1, (1 << n) - 1, dtype=np.uint32)
        _MASK_CACHE[n] = np.array([(masks >> i) & 1 for i in range(n)], dtype=np.float64).T
    sel = _MASK_CACHE[n]
    vals = np.asarray(values)
    c1 = sel.sum(axis=1)
    c2 = n - c1
    s1 = sel @ vals
    s2 = vals.sum() - s1
    sq = np.sum(vals ** 2)
    return float(np.min(sq - s1 ** 2 / c1 - s2 ** 2 / c2))


def test_kmeans_exactness_1000_trials():
    rng = np.random.default_rng(0)
    worst_excess = 0.0
    contiguous = True
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        values = rng.uniform(-1, 1, size=n).tolist()
        part = kmeans_1d_k2(values)
        achieved = 0.0
        for side in (part.high_indices, part.low_indices):
            if side:
                group = np.asarray([values[i] for i in side])
                achieved += float(np.sum((group - group.mean()) ** 2))
        worst_excess = max(worst_excess, achieved - brute_force_min_wcss(values))
        if not part.no_split:
            if min(values[i] for i in part.high_indices) < \
                    max(values[i] for i in part.low_indices):
                contiguous = False
    ok = worst_excess < 1e-10 and contiguous
    assert report("kmeans-exactness", ok,
                  f"(worst objective excess {worst_excess:.2e}, contiguity {contiguous})")


# --- loss closed forms ----------------------------------------------------------------


def test_loss_closed_forms():
    probs = np.full((1, 9), 0.5 / 8)
    probs[0, 3] = 0.5
    focal = focal_loss(Tensor(probs), [3]).item()
    focal_ok = abs(focal - 0.25 * 0.25 * math.log(2.0)) < 1e-9

    bins = OrientationBins(12)
    ce = multibin_loss(Tensor(np.zeros((1, 12))), Tensor(np.zeros((1, 12))),
                       [bins.centers()[5]], bins).item()
    ce_ok = abs(ce - math.log(12.0)) < 1e-9

    e = 0.8
    sigma = Tensor([[math.sqrt(2.0) * e]], trainable=True)
    loss = laplacian_depth_loss(Tensor([[e]]), sigma, Tensor([[0.0]]))
    grad = backward(loss, leaves=[sigma])[id(sigma)][0, 0]
    laplace_ok = abs(grad) < 1e-6

    bd = aggregate(1, 1, 1, 1, 1, 1, 1, 1, weights=LossWeights())
    agg_ok = bd.loss_2d == 19.0 and bd.overall == 23.0

    ok = focal_ok and ce_ok and laplace_ok and agg_ok
    assert report("loss-closed-forms", ok,
                  f"(focal {focal:.6f}, CE {ce:.6f}, d/dsigma {grad:.1e}, "
                  f"weighted2d {bd.loss_2d})")


# --- evaluation harness ------------------------------------------------------------------


def eval_sample(sid, gt, pred, image="img0"):
    return EvalSample(sid, gt, pred, "car", gt.center[2], "none", 0.0, image)


def test_eval_harness_fixture_boundary_and_stability():
    gt = Box3D((0, 0, 10), (1, 1, 1), 0.0)

    def with_iou(target):
        o = (1.0 - target) / (1.0 + target)
        return Box3D((o, 0, 10), (1, 1, 1), 0.0)

    samples = [eval_sample(f"s{i}", gt, with_iou(v)) for i, v in
               enumerate([0.3, 0.6, 0.1])]
    table = evaluate(samples)
    text = table.render_text()
    fixture_ok = "66.67" in text and "33.33" in text

    boundary = evaluate([eval_sample(
        "b", Box3D((0, 0, 10), (2.0, 2.0, 1.0), 0.0),
        Box3D((0, 0, 10), (1.0, 1.0, 1.0), 0.0))])
    boundary_ok = boundary.buckets["overall"].hits[0.25] == 1

    headers_ok = all(h in text for h in
                     ("Unique", "Multiple", "Overall", "Acc@0.25", "Acc@0.5",
                      "Near/Easy", "Medium/Moderate", "Far/Hard"))

    rng = np.random.default_rng(1)
    many = []
    for i in range(40):
        g = Box3D((rng.uniform(-4, 4), 0, rng.uniform(5, 50)),
                  tuple(rng.uniform(0.5, 3, 3)), rng.uniform(-math.pi, math.pi))
        p = Box3D((g.center[0] + rng.uniform(-1, 1), g.center[1], g.center[2]),
                  g.dims, g.yaw)
        many.append(EvalSample(f"s{i:02d}", g, p, str(rng.choice(["car", "van"])),
                               g.center[2], str(rng.choice(["none", "partial", "severe"])),
                               float(rng.uniform(0, 1)), f"img{i % 5}"))
    shuffled = many[:]
    rng.shuffle(shuffled)
    stable_ok = (evaluate(many).render_text().encode() ==
                 evaluate(shuffled).render_text().encode())

    ok = fixture_ok and boundary_ok and headers_ok and stable_ok
    assert report("eval-harness", ok,
                  f"(fixture {fixture_ok}, boundary {boundary_ok}, "
                  f"headers {headers_ok}, shuffle-stable {stable_ok})")


# --- lexical certainty pipeline -------------------------------------------------------------


def test_mask_records_fixture_and_guards():
    region = np.array([1.0, 0.0, 0.0, 0.0])
    words = np.array([[0.0, 1.0, 0.0, 0.0],
                      [1.0, 0.0, 0.0, 0.0],     # matches the region exactly
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]])
    rec = CaptionRecord("fix0", ("the", "car", "on", "left"), words, region)
    part = partition_certainty(rec)
    masked = mask_caption(rec.tokens, part)
    exact_ok = masked == ["the", MASK_TOKEN, "on", "left"]

    records = [rec] + [
        CaptionRecord(f"fix{i}", ("a", "b", "c"),
                      np.random.default_rng(i).standard_normal((3, 4)),
                      np.random.default_rng(i + 100).standard_normal(4))
        for i in range(1, 6)
    ]
    p0_stream, _ = mask_records(records, MaskPolicy(probability=0.0), seed=5)
    p0_ok = all(tokens == list(r.tokens) for r, (_, tokens) in zip(records, p0_stream))

    idem_ok = mask_caption(masked, part) == masked

    all_high = CaptionRecord(
        "allhigh", ("red", "car"),
        np.array([[1.0, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]]), region)
    guarded = mask_caption(all_high.tokens, partition_certainty(all_high))
    guard_ok = MASK_TOKEN in guarded and any(t != MASK_TOKEN for t in guarded)

    policy = MaskPolicy(probability=0.5)
    blob1 = json.dumps([a.to_dict() for a in mask_records(records, policy, seed=9)[1]])
    blob2 = json.dumps([a.to_dict() for a in mask_records(records, policy, seed=9)[1]])
    determinism_ok = blob1.encode() == blob2.encode()

    ok = exact_ok and p0_ok and idem_ok and guard_ok and determinism_ok
    assert report("certainty-masking", ok,
                  f"(exact-word {exact_ok}, p0-identity {p0_ok}, idempotent {idem_ok}, "
                  f"never-mask-all {guard_ok}, deterministic {determinism_ok})")


# --- toy decoupling experiment ----------------------------------------------------------------


def _run_seed(seed: int) -> dict:
    cfg = P.ToyConfig(seed=seed)
    null_params = P.init_toy_params(
        cfg, samples=P.synth_generate(cfg.n_train, cfg, seed=cfg.seed + 101))
    null = P.probe_decoupling(null_params, cfg, seed=seed + 9000)
    result = P.train_toy(cfg)
    probe = P.probe_decoupling(result.params, cfg, seed=seed + 9000)
    return {
        "seed": seed,
        "null_matched": null.matched, "null_crossed": null.crossed,
        "matched": probe.matched, "crossed": probe.crossed,
        "initial_loss": result.initial_loss, "final_loss": result.final_loss,
    }


@pytest.fixture(scope="module")
def decoupling_runs():
    start = time.perf_counter()
    with concurrent.futures.ProcessPoolExecutor(max_workers=2) as pool:
        runs = list(pool.map(_run_seed, range(5)))
    elapsed = time.perf_counter() - start
    return runs, elapsed


def test_toy_training_halves_loss_within_budget(decoupling_runs):
    runs, elapsed = decoupling_runs
    halved = all(r["final_loss"] < 0.5 * r["initial_loss"] for r in runs)
    in_budget = elapsed < 600.0
    ok = halved and in_budget
    losses = ", ".join(f"{r['initial_loss']:.1f}->{r['final_loss']:.1f}" for r in runs)
    assert report("toy-loss-halving", ok, f"({losses}; wall {elapsed:.0f}s)")


def test_toy_untrained_probes_symmetric(decoupling_runs):
    runs, _ = decoupling_runs
    null_gap = float(np.mean([r["null_matched"] for r in runs]) -
                     np.mean([r["null_crossed"] for r in runs]))
    ok = abs(null_gap) < 0.1
    assert report("toy-null-symmetry", ok, f"(untrained mean gap {null_gap:+.3f})")


def test_toy_trained_decoupling_gap(decoupling_runs):
    runs, _ = decoupling_runs
    matched = float(np.mean([r["matched"] for r in runs]))
    crossed = float(np.mean([r["crossed"] for r in runs]))
    gap = matched - crossed
    per_seed = ", ".join(f"s{r['seed']}:{r['matched'] - r['crossed']:+.2f}" for r in runs)
    ok = gap >= 0.2
    assert report("toy-decoupling-gap", ok,
                  f"(mean matched {matched:.3f} - crossed {crossed:.3f} = {gap:+.3f}; "
                  f"{per_seed})")
