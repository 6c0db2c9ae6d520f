"""Acceptance criteria 1-9, each reported as one PASS/FAIL line in the terminal summary.

The end-to-end criteria share one default synthetic composite dataset (and a
noise-free twin for the CAM check), generated once per session.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from rcnmer.data import FlowDataset, attention_favoring_maps, generate_dataset, load_dataset
from rcnmer.data import precompute_flows
from rcnmer.engine import (
    BatchNormState,
    Tensor,
    adaptive_avgpool2d,
    batchnorm2d,
    broadcast_mul,
    classwise_bce,
    concat,
    conv2d,
    dropout,
    grad_check,
    grad_check_detailed,
    linear,
    maxpool2d,
    one_hot,
    relu,
    resize_bilinear,
    softmax,
    softmax_cross_entropy,
    softplus,
)
from rcnmer.evaluation import (
    DESK_TRAIN_CONFIG,
    cam_map,
    checkpoint_bytes,
    compute_uar,
    compute_uf1,
    run_loso,
    top_decile_inside,
    train_fold,
    train_single,
)
from rcnmer.flow import FlowField, estimate_flow, optical_strain, warp
from rcnmer.models import NAMED_KINDS, attention_map, build_named, named_descriptor, normalize_by_max
from rcnmer.search import SearchConfig, search

from oracles import naive_conv2d

SEEDS = (0, 1, 2, 3, 4)
BACKBONE_CONVS = [  # (kernel, stride, padding, dilation) of every convolution in the backbone
    (3, 3, 1, 1), (3, 3, 2, 2), (3, 3, 3, 3), (1, 1, 0, 1), (3, 1, 1, 1),
]


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- shared data --------------------------------------------------------------

@pytest.fixture(scope="session")
def composite(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("composite")
    manifest = generate_dataset(root, seed=0)
    cache, _ = precompute_flows(manifest, None, [60, 250], root / "flows")
    data = {r: load_dataset(manifest, cache, r) for r in (60, 250)}
    return {"root": root, "manifest": manifest, "data": data, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def loso_runs(composite):
    """Memoized LOSO reports keyed by (kind, R, seed), shared by criteria 5, 6 and 9."""
    cache = {}

    def get(kind, r, seed):
        key = (kind, r, seed)
        if key not in cache:
            desc = named_descriptor(kind, 16, 5, 3, r)
            cache[key] = run_loso(composite["data"][r], desc, DESK_TRAIN_CONFIG.with_(seed=seed))
        return cache[key]

    return get


# -- 1. gradient suite --------------------------------------------------------

def _primitive_cases(rng):
    x = lambda *s: t64(rng.normal(size=s))
    bn = BatchNormState.create(3, np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    w3, w1, b = x(3, 3, 3, 3), x(3, 3, 1, 1), x(3)
    lw, lb = x(4, 12), x(4)
    mask_rng = int(rng.integers(1 << 30))
    onehot = one_hot(rng.integers(0, 4, 2), 4, np.float64)
    cls = rng.normal(size=(3, 3 * 2 * 2))
    cases = {
        "relu": (lambda v: relu(v), [x(2, 3, 7, 7)]),
        "maxpool": (lambda v: maxpool2d(v), [x(2, 3, 8, 8)]),
        "adaptive_pool": (lambda v: adaptive_avgpool2d(v, 3), [x(2, 3, 7, 7)]),
        "resize": (lambda v: resize_bilinear(v, 11, 5), [x(2, 3, 6, 7)]),
        "bn_train": (lambda v: batchnorm2d(v, bn, True), [x(3, 3, 5, 5), bn.gamma, bn.beta]),
        "bn_eval": (lambda v: batchnorm2d(v, bn, False), [x(2, 3, 5, 5), bn.gamma, bn.beta]),
        "linear": (lambda v: linear(v, lw, lb), [x(2, 12), lw, lb]),
        "softmax": (lambda v: softmax(v), [x(3, 5)]),
        "softplus": (lambda v: softplus(v), [x(7)]),
        "dropout": (lambda v: dropout(v, 0.5, True, np.random.default_rng(mask_rng)), [x(2, 3, 4, 4)]),
        "broadcast_mul": (lambda v: broadcast_mul(v[0], v[1]), [x(2, 3, 5, 5), x(2, 1, 5, 5)]),
        "concat": (lambda v: concat([v[0], v[1]], axis=1), [x(2, 2, 3, 3), x(2, 1, 3, 3)]),
        "normalize_by_max": (lambda v: normalize_by_max(relu(v) + 0.1), [x(2, 1, 4, 4)]),
        "attention_map": (lambda v: attention_map(v, cls, 2, (6, 6)), [x(2, 3, 4, 4)]),
        "classwise_bce": (lambda v: classwise_bce(softmax(v), onehot), [x(2, 4)]),
        "softmax_ce": (lambda v: softmax_cross_entropy(v, onehot.argmax(1)), [x(2, 4)]),
    }
    for k, s, p, d in BACKBONE_CONVS:
        w = w3 if k == 3 else w1
        cases[f"conv_k{k}s{s}p{p}d{d}"] = (lambda v, w=w, s=s, p=p, d=d: conv2d(v, w, b, s, p, d),
                                           [x(2, 3, 10, 10), w, b])
    return cases


def test_criterion_1_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    worst_prim, worst_model = 0.0, 0.0
    checked, kinks = 0, 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, (fn, tensors) in _primitive_cases(rng).items():
            multi = name in ("broadcast_mul", "concat")
            proj = {}

            def f(_, fn=fn, tensors=tensors, multi=multi, proj=proj):
                out = fn(tensors) if multi else fn(tensors[0])
                if "p" not in proj:
                    proj["p"] = t64(np.random.default_rng(seed).normal(size=out.shape))
                return (out * proj["p"]).sum()

            worst_prim = max(worst_prim, grad_check(f, tensors, h=1e-6))
        for kind in NAMED_KINDS:
            model = build_named(kind, feature_maps=3, pool_size=5, resolution=20, seed=seed, dtype=np.float64,
                                dropout_ratio=0.0)
            x = t64(rng.normal(size=(2, 3, 20, 20)))
            y = one_hot(rng.integers(0, 3, 2), 3, np.float64)
            # attention treats the classifier weights as constants, so they are only checked without it
            params = [t for n, t in model.named_parameters()
                      if n != "cls.weight" or model.descriptor.attention_placement == "none"]
            f = lambda _: classwise_bce(model(x, training=True).probs, y)
            # conv biases ahead of batch-stat BN have a zero gradient: the floor stops round-off noise
            # from counting as a relative error of one; coordinates are sampled to fit the time budget,
            # and ones where a ReLU or max switches inside +-h are skipped and counted
            res = grad_check_detailed(f, [x, *params], h=1e-6, floor=1e-2, max_coords=3,
                                      rng=np.random.default_rng(seed), kink_tol=1e-4)
            worst_model = max(worst_model, res.error)
            checked += res.checked
            kinks += res.kinks
    seconds = time.perf_counter() - t0
    # a handful of kinks is expected; many would mean the detector is hiding real errors
    ok = worst_prim < 1e-5 and worst_model < 1e-5 and seconds < 300 and kinks <= 0.01 * checked
    record(acceptance_log, 1, ok, f"20 seeds; max rel err primitives {worst_prim:.2e}, "
                                  f"architectures {worst_model:.2e} (< 1e-5, {kinks}/{checked + kinks} kink coords skipped); "
                                  f"{seconds:.0f}s (< 300s)")


# -- 2. oracle suite ----------------------------------------------------------

def test_criterion_2_oracles(acceptance_log):
    rng = np.random.default_rng(2)
    mismatches = 0
    for i in range(200):
        k, s, p, d = BACKBONE_CONVS[i % len(BACKBONE_CONVS)]
        n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
        h, w = (int(v) for v in rng.integers(d * (k - 1) + 1, 13, size=2))
        # integer data keeps every partial sum exact, so equality is bitwise
        x = rng.integers(-8, 9, size=(n, cin, h, w)).astype(np.float64)
        wt = rng.integers(-8, 9, size=(cout, cin, k, k)).astype(np.float64)
        b = rng.integers(-8, 9, size=cout).astype(np.float64)
        ours = conv2d(t64(x), t64(wt), t64(b), s, p, d).data
        ref = naive_conv2d(x, wt, b, s, p, d)
        mismatches += ours.shape != ref.shape or not np.array_equal(ours, ref)
    cm = [[8, 1, 1], [1, 3, 1], [0, 1, 4]]
    uar, uf1 = compute_uar(cm), compute_uf1(cm)
    ok = mismatches == 0 and abs(uar - 0.7333) < 1e-4 and abs(uar - 11 / 15) < 1e-6 \
        and abs(uf1 - 0.7231) < 1e-4 and abs(uf1 - (16 / 19 + 0.6 + 8 / 11) / 3) < 1e-6
    record(acceptance_log, 2, ok, f"conv2d exact on {200 - mismatches}/200 cases; UAR {uar:.6f}, UF1 {uf1:.6f}")


# -- 3. parameter-count invariance ------------------------------------------

def test_criterion_3_parameter_invariance(acceptance_log):
    variants = ["rcn", "rcn-w", "rcn-s", "rcn-a", "rcn-c", "rcn-f", "rcn-p"]
    bad = []
    for m, k, c in [(16, 5, 3), (32, 7, 3), (8, 3, 5), (64, 9, 3)]:
        counts = {v: build_named(v, m, k, c, resolution=60).parameter_count() for v in variants}
        if len(set(counts.values())) != 1:
            bad.append(((m, k, c), counts))
    base = build_named("rcn", 16, 5, 3, 60).parameter_count()
    record(acceptance_log, 3, not bad, f"{len(variants)} variants x 4 (M,K,C) settings identical "
                                       f"(RCN M16 K5 C3: {base} parameters)" if not bad else f"mismatch {bad}")


# -- 4. flow suite ------------------------------------------------------------

def _texture(n, seed):
    t = ndimage.gaussian_filter(np.random.default_rng(seed).random((n, n)), 3.0)
    return 0.1 + 0.8 * (t - t.min()) / (t.max() - t.min())


def test_criterion_4_flow_suite(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    epes = []
    inner = (slice(10, -10), slice(10, -10))
    for i in range(8):
        mag, ang = rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
        dx, dy = mag * np.cos(ang), mag * np.sin(ang)
        f = _texture(80, 40 + i)
        g = warp(f, np.full(f.shape, -dx), np.full(f.shape, -dy))  # content moves by +d
        flow = estimate_flow(f, g)
        epes.append(float(np.hypot(flow.vx - dx, flow.vy - dy)[inner].mean()))
    f = _texture(64, 3)
    zero = estimate_flow(f, f)
    zero_err = max(np.abs(zero.vx).max(), np.abs(zero.vy).max())
    uniform = optical_strain(FlowField(np.full((30, 30), 2.5), np.full((30, 30), -1.25)))
    xx = np.tile(np.arange(30.0), (30, 1))
    linear_strain = optical_strain(FlowField(0.3 * xx, -0.2 * xx.T))  # exx=0.3, eyy=-0.2
    strain_err = max(np.abs(uniform).max(), np.abs(linear_strain - np.hypot(0.3, 0.2)).max())
    seconds = time.perf_counter() - t0
    ok = np.mean(epes) < 0.2 and zero_err <= 1e-6 and strain_err <= 1e-6 and seconds < 120
    record(acceptance_log, 4, ok, f"mean EPE {np.mean(epes):.3f} px over 8 translations of 1-3 px (< 0.2); "
                                  f"zero-motion {zero_err:.1e}, strain identities {strain_err:.1e}; {seconds:.0f}s")


# -- 5. resolution/complexity trend -------------------------------------------

def test_criterion_5_complexity_trend(acceptance_log, composite, loso_runs):
    t0 = time.perf_counter()
    small = [loso_runs("model2", 60, s).uar for s in SEEDS]
    large = [loso_runs("model4", 250, s).uar for s in SEEDS]
    seconds = composite["seconds"] + time.perf_counter() - t0
    gaps = np.subtract(small, large)
    ok = np.mean(small) > np.mean(large) and (gaps > 0).sum() >= 4 and seconds < 7200
    record(acceptance_log, 5, ok, f"UAR Model2@60 {np.mean(small):.4f} vs Model4@250 {np.mean(large):.4f}; "
                                  f"gap > 0 in {(gaps > 0).sum()}/5 seeds; {seconds / 60:.1f} min (< 120)")


# -- 6. module benefit --------------------------------------------------------

def test_criterion_6_module_benefit(acceptance_log, loso_runs):
    means = {k: float(np.mean([loso_runs(k, 60, s).uar for s in SEEDS])) for k in ("rcn", "rcn-a", "rcn-s", "rcn-w")}
    better = [k for k in ("rcn-a", "rcn-s", "rcn-w") if means[k] > means["rcn"]]
    detail = ", ".join(f"{k.upper()} {v:.4f}" for k, v in means.items())
    record(acceptance_log, 6, len(better) >= 2, f"{detail}; {len(better)}/3 variants above RCN (need 2)")


# -- 7. search sanity ---------------------------------------------------------

SEARCH_CFG = SearchConfig(epochs=20, arch_lr=0.3)


def test_criterion_7_search(acceptance_log):
    x, y, s = attention_favoring_maps()
    data = FlowDataset(x, y, s, np.array(["contrived"] * len(y)), np.array([f"c{i:03d}" for i in range(len(y))]))
    wins, worst_sum = 0, 0.0
    for seed in SEEDS:
        res = search(data, cfg=replace(SEARCH_CFG, seed=seed))
        wins += res.node_ranking["attention"][0][0] != "none"
        for rec in res.log:
            if rec["type"] == "epoch":
                for c in rec["coefficients"].values():
                    worst_sum = max(worst_sum, abs(sum(c) - 1.0))
    ok = wins >= 4 and worst_sum <= 1e-6
    record(acceptance_log, 7, ok, f"attention placement ranked above 'none' in {wins}/5 seeds (need 4); "
                                  f"max |sum(coef) - 1| = {worst_sum:.1e}")


# -- 8. CAM localization ------------------------------------------------------

def test_criterion_8_cam_localization(acceptance_log, tmp_path_factory):
    root = tmp_path_factory.mktemp("clean")
    manifest = generate_dataset(root, seed=0, clean=True)
    cache, _ = precompute_flows(manifest, None, [60], root / "flows")
    data = load_dataset(manifest, cache, 60, with_masks=True)
    held = ["sub09", "sub10", "sub11"]  # one subject per domain
    train, test = data.where_subject(held, include=False), data.where_subject(held)
    # trained past the usual stop so localization reflects a settled model rather than two epochs of fitting
    model, _ = train_single(train, named_descriptor("rcn", 16, 5, 3, 60), DESK_TRAIN_CONFIG.with_(loss_stop=0.1))
    cams, _ = cam_map(model, test.x)
    inside = float(np.mean([top_decile_inside(c, m) for c, m in zip(cams, test.masks)]))
    record(acceptance_log, 8, inside >= 0.5, f"{inside:.3f} of top-decile CAM pixels inside the motion region "
                                             f"over {len(test)} held-out samples (need 0.5; mask covers "
                                             f"{test.masks.mean():.3f} of the image)")


# -- 9. determinism and leakage ----------------------------------------------

def test_criterion_9_determinism_and_leakage(acceptance_log, composite, loso_runs):
    data = composite["data"][60]
    desc = named_descriptor("rcn-a", 16, 5, 3, 60)
    cfg = DESK_TRAIN_CONFIG.with_(seed=9)
    a, _ = train_single(data, desc, cfg)
    b, _ = train_single(data, desc, cfg)
    same_ckpt = checkpoint_bytes(a, cfg.to_dict()) == checkpoint_bytes(b, cfg.to_dict())
    first = loso_runs("rcn", 60, 0)
    again = run_loso(data, named_descriptor("rcn", 16, 5, 3, 60), DESK_TRAIN_CONFIG.with_(seed=0))
    same_report = first.records(timings=False) == again.records(timings=False)
    # perturb every held-out sample (inputs and labels); the fold's model must not change
    held = data.subjects == "sub04"
    noisy = FlowDataset(data.x.copy(), data.y.copy(), data.subjects, data.domains, data.sample_ids)
    noisy.x[held] = np.random.default_rng(0).normal(0, 10, noisy.x[held].shape).astype(np.float32)
    noisy.y[held] = (noisy.y[held] + 1) % 3
    fa, *_ = train_fold(data, desc, cfg, 4, "sub04")
    fb, *_ = train_fold(noisy, desc, cfg, 4, "sub04")
    no_leak = checkpoint_bytes(fa) == checkpoint_bytes(fb)
    ok = same_ckpt and same_report and no_leak
    record(acceptance_log, 9, ok, f"checkpoint rerun identical: {same_ckpt}; LOSO report rerun identical: "
                                  f"{same_report}; held-out perturbation leaves fold checkpoint identical: {no_leak}")
