"""Acceptance criteria, one test each; a pass/fail line per criterion is
printed as it runs and repeated in the terminal summary."""
import time

import numpy as np
import pytest

from grcvit import complexity as cx
from grcvit import estimator as est
from grcvit.cli import gradcheck_tiny
from grcvit.imgcore import GrayImage, RgbImage, SyntheticSpec, generate, textured_corpus, textured_rgb
from grcvit.model import (
    AdaptiveRouting,
    FineTrainConfig,
    GrcViT,
    RandomRouting,
    cyclic_shift,
    reference_config,
    route_and_forward,
    textured_dataset,
    tiny_config,
    train_fine_toy,
    window_mhsa,
    window_partition,
    window_reverse,
)
from grcvit.model.flops import LayerSpec, flops_grc, flops_swin, reference_sweep
from grcvit.tensor import Tensor

from test_model import brute_attention, random_attention_params

REPORT = {}


def report(n, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}" + (f" ({detail})" if detail else "")
    REPORT[n] = line
    print(line)
    assert ok, line


def test_criterion_01_threshold_reparameterisation():
    t0 = time.perf_counter()
    ab = np.random.default_rng(0).uniform(-10, 10, size=(1000, 2))
    ok = True
    for a, b in ab:
        th = cx.thresholds_from_raw(cx.EstimatorParams(a=float(a), b=float(b)))
        ok &= 0.0 < th.alpha < th.beta < 1.0
    dt = time.perf_counter() - t0
    report(1, "threshold ordering over 1000 draws", ok and dt < 1.0, f"{dt:.3f}s")


def test_criterion_02_descriptor_suite():
    t0 = time.perf_counter()
    const = cx.extract_features(generate(SyntheticSpec("constant"))).as_array()
    cb = cx.extract_features(generate(SyntheticSpec("checkerboard", period=1))).as_array()
    half = np.zeros((16, 16))
    half[:, 8:] = 1.0
    e_half = cx.shannon_entropy(GrayImage(half))
    e_full = cx.shannon_entropy(GrayImage(((np.arange(1024) % 256) / 255.0).reshape(32, 32)))
    dt = time.perf_counter() - t0
    ok = (const.tolist() == [0.0, 0.0, 0.0] and bool(np.all(cb >= const)) and abs(e_half - 0.125) <= 1e-12
          and abs(e_full - 1.0) <= 1e-9 and dt < 5.0)
    report(2, "descriptor trivial and ordering cases", ok, f"checkerboard={np.round(cb, 4).tolist()}, {dt:.2f}s")


def test_criterion_03_quantile_buckets():
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(r.integers(3, 400))
        scores = r.permutation(np.linspace(0.0, 1.0, n) + r.uniform(0, 1e-3))
        feats = np.repeat(scores[:, None], 3, axis=1)
        t = est.compute_quantile_targets(est.ComplexityCorpus([str(i) for i in range(n)], feats))
        sizes = np.bincount(t.labels, minlength=4)[1:]
        worst = max(worst, float(np.max(np.abs(sizes - n / 3))))
    report(3, "tertile bucket sizes within 1 of N/3", worst <= 1.0, f"worst deviation {worst:.3f}")


def test_criterion_04_estimator_training():
    t0 = time.perf_counter()
    ids, images, _ = textured_corpus(100, size=64, seed=0)
    corpus = est.ComplexityCorpus.from_images(ids, images)
    targets = est.compute_quantile_targets(corpus)
    params, trace = est.train_estimator(corpus, targets, est.CoarseTrainConfig.desk())
    dt = time.perf_counter() - t0
    ratio = trace[-1].loss / trace[0].loss
    agree = est.routing_agreement(params, corpus, targets)
    valid = all(np.isfinite([r.alpha, r.beta]).all() and 0 < r.alpha < 1 and 0 < r.beta < 1 for r in trace)
    ok = len(corpus) == 300 and len(trace) == 16 and ratio < 0.5 and agree >= 0.9 and valid and dt < 120
    report(4, "estimator training on 300 synthetic images", ok,
           f"loss ratio {ratio:.3f}, agreement {agree:.3f}, {dt:.1f}s")


def test_criterion_05_window_machinery():
    ok = True
    for s, m in [(4, 2), (8, 4), (14, 14), (28, 14), (56, 7)]:
        x = np.random.default_rng(s).normal(size=(2, s, s, 3))
        ok &= window_reverse(window_partition(Tensor(x), m), m, s).data.tobytes() == x.tobytes()
        ok &= cyclic_shift(cyclic_shift(Tensor(x), m // 2), -(m // 2)).data.tobytes() == x.tobytes()
    report(5, "partition/reverse and shift/unshift are bit-exact", ok)


def test_criterion_06_attention_oracle():
    worst, row_err = 0.0, 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        wins = r.normal(size=(4, 4, 4))
        params = random_attention_params(r, 4, 2, 1)
        rec = []
        got = window_mhsa(Tensor(wins), *(Tensor(p) for p in params), heads=1, recorder=rec).data
        want, _ = brute_attention(wins, *params, heads=1)
        worst = max(worst, float(np.max(np.abs(got - want))))
        row_err = max(row_err, float(np.max(np.abs(rec[0].sum(axis=-1) - 1.0))))
    report(6, "window attention vs dense loop oracle", worst < 1e-6 and row_err <= 1e-6,
           f"max abs {worst:.2e}, row-sum error {row_err:.2e}")


def test_criterion_07_full_model_gradcheck():
    t0 = time.perf_counter()
    err = gradcheck_tiny(seed=0, h=1e-5)
    dt = time.perf_counter() - t0
    report(7, "tiny-model gradient check, all parameters", err < 1e-3 and dt < 300,
           f"max rel error {err:.2e}, {dt:.0f}s")


def test_criterion_08_flops():
    layer = LayerSpec(56, 56, 96, 7)
    exact = flops_swin([layer]).total == 145_108_992 and flops_grc([layer]).total == 117_110_784
    below = all(flops_grc(l).total < flops_swin(l).total for _, l in reference_sweep())
    report(8, "FLOPs single-layer values and sweep ordering", exact and below)


@pytest.mark.slow
def test_criterion_09_routing_ablation():
    t0 = time.perf_counter()
    adaptive, random = [], []
    for seed in range(3):
        train = textured_dataset(600, 32, seed=2 * seed + 100)
        test = textured_dataset(150, 32, seed=2 * seed + 101)
        # coarse stage fitted on the training images without labels
        corpus = est.ComplexityCorpus.from_images([str(i) for i in range(len(train))],
                                                  [RgbImage(im) for im in train.images])
        params, _ = est.train_estimator(corpus, est.compute_quantile_targets(corpus),
                                        est.CoarseTrainConfig.desk(seed=seed))
        cfg = FineTrainConfig.desk(seed=seed, epochs=10)
        _, tr_a = train_fine_toy(tiny_config(), train, AdaptiveRouting(params), cfg, test=test)
        _, tr_r = train_fine_toy(tiny_config(), train, RandomRouting(seed), cfg, test=test)
        adaptive.append(tr_a[-1]["test_accuracy"])
        random.append(tr_r[-1]["test_accuracy"])
    dt = time.perf_counter() - t0
    gap = 100 * (np.mean(adaptive) - np.mean(random))
    report(9, "adaptive beats random routing by 5 points", gap >= 5.0 and dt < 900,
           f"adaptive {np.mean(adaptive):.3f}, random {np.mean(random):.3f}, {dt:.0f}s")


def test_criterion_10_backbone_sharing():
    cfg = reference_config()
    total = GrcViT(cfg).num_parameters()
    singles = [GrcViT(cfg.single(g)).num_parameters() for g in (1, 2, 3)]
    ok = all(total < 3 * s for s in singles) and total < sum(singles)
    report(10, "shared model smaller than three single-granularity models", ok,
           f"shared {total}, singles {singles}")


def test_criterion_11_patch_counts():
    cfg = reference_config()
    counts = [cfg.num_tokens(g) for g in (1, 2, 3)]
    model = GrcViT(cfg, seed=0)
    img = RgbImage(np.full((224, 224, 3), 0.5))
    embedded = [model.patch_embed(img, g).shape[0] for g in (1, 2, 3)]
    report(11, "patch counts 196/784/3136", counts == embedded == [196, 784, 3136], f"{counts}")


def test_criterion_12_persistence(tmp_path):
    model = GrcViT(tiny_config(), seed=7)
    params = cx.EstimatorParams((0.4, -0.3, 0.9), a=0.2, b=-0.4)
    model.save(tmp_path / "model")
    params.save(tmp_path / "est.json")
    model2 = GrcViT.load(tmp_path / "model")
    params2 = cx.EstimatorParams.load(tmp_path / "est.json")
    ok = params2 == params
    for k in range(6):
        img = textured_rgb(k % 3, k, 32)
        g1, l1 = route_and_forward(img, params, None, model)
        g2, l2 = route_and_forward(img, params2, None, model2)
        ok &= g1 == g2 and l1.tobytes() == l2.tobytes()
        for g in (1, 2, 3):
            ok &= model.forward(img, g).data.tobytes() == model2.forward(img, g).data.tobytes()
    report(12, "checkpoint and estimator JSON roundtrips are bit-exact", ok)
