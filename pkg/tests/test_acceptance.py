"""Acceptance criteria, one test (or a few) per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture before it
asserts; the lines are repeated in the terminal summary.  The trained models
are built once per module.  The seeded comparisons (8b, 9b, 12) run on a
reduced-geometry generator to fit the time budget; see the README.
"""
import struct
import time
import warnings

import numpy as np
import pytest
from scipy.special import expit

from amc3d import tensor as T
from amc3d.auxseg import SegDecoderConfig, assemble_token_volume, init_decoder
from amc3d.backbone import BackboneConfig, encode_slices, init_random_backbone, prepare_slices
from amc3d.calibration import apply_calibration, ensemble_logits, fit_platt
from amc3d.errors import ContractError, FingerprintError
from amc3d.fusion import attention_pool, classify_volume, fuse_views
from amc3d.interpret import box_mass_ratio, class_to_patch_map, volume_heatmap, volume_saliency
from amc3d.lora import LoraAdapter, apply_adapted, count_trainable, merge_adapter
from amc3d.manifest import Sample, load_samples
from amc3d.metrics import compute_auroc, operating_point, trapezoid_auroc, youden_threshold
from amc3d.plugin import Engine, load_plugin, new_plugin, plugin_to_bytes, save_plugin
from amc3d.synthetic import SyntheticSpec, generate_synthetic_dataset
from amc3d.train import (AdamW, TrainConfig, assert_excludes_backbone, focal_loss, predict_logits,
                         train_plugin)
from amc3d.volume import Volume

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
REDUCED = SyntheticSpec(n=120, size=(32, 32, 8), radius=(4.0, 7.0), radius_s=(1.0, 2.0), masks=True)
REDUCED_BACKBONE = BackboneConfig(image_size=(32, 32))


def _perturb(plugin, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    for t in plugin.parameters():
        t.data = (t.data + scale * rng.standard_normal(t.shape)).astype(t.data.dtype)
    return plugin


def _random_volume(rng, size=(64, 64), S=None):
    S = S or int(rng.integers(2, 9))
    return Volume(rng.random((1, *size, S)).astype(np.float32))


def _labels(samples):
    return np.array([s.label[0] for s in samples])


# ---------------------------------------------------------------- shared trained models

@pytest.fixture(scope="module")
def headline(tmp_path_factory):
    """Default generator, default toy backbone, seed-fixed plugin training."""
    t0 = time.perf_counter()
    m = generate_synthetic_dataset(tmp_path_factory.mktemp("headline"), SyntheticSpec(), seed=0)
    train, val, test = (load_samples(m, s) for s in ("train", "val", "test"))
    w = init_random_backbone(BackboneConfig(), 0)
    checksum_before = w.checksum()
    plugin = new_plugin(w, seed=0, task_id="lesion")
    result = train_plugin(plugin, w, train, val, TrainConfig(epochs=100, seed=0, patience=3))
    z = predict_logits(test, plugin, w)
    return {"weights": w, "plugin": plugin, "result": result, "test": test, "val": val,
            "auroc": compute_auroc(z[:, 0], _labels(test)), "checksum_before": checksum_before,
            "seconds": time.perf_counter() - t0, "manifest": m}


@pytest.fixture(scope="module")
def aux_runs(tmp_path_factory):
    """Masked and unmasked training for five seeds on one reduced dataset."""
    t0 = time.perf_counter()
    m = generate_synthetic_dataset(tmp_path_factory.mktemp("reduced"), REDUCED, seed=0)
    train, val, test = (load_samples(m, s) for s in ("train", "val", "test"))
    unmasked = [Sample(s.id, s.views, s.label, None, s.boxes) for s in train]
    w = init_random_backbone(REDUCED_BACKBONE, 0)
    runs = []
    for seed in SEEDS:
        row = {}
        for name, data in (("mask", train), ("nomask", unmasked)):
            plugin = new_plugin(w, seed=seed, decoder=(name == "mask"), task_id=f"{name}{seed}")
            res = train_plugin(plugin, w, data, val, TrainConfig(epochs=10, seed=seed))
            row[name] = res.history[9].val_auroc
            row[name + "_plugin"] = plugin
        runs.append(row)
    return {"runs": runs, "weights": w, "val": val, "test": test,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def two_view_runs(tmp_path_factory):
    from dataclasses import replace
    spec = replace(REDUCED, views=2, masks=False)
    m = generate_synthetic_dataset(tmp_path_factory.mktemp("twoview"), spec, seed=0)
    train, val, test = (load_samples(m, s) for s in ("train", "val", "test"))
    w = init_random_backbone(REDUCED_BACKBONE, 0)

    def only(samples, i):
        return [Sample(s.id, [s.views[i]], s.label) for s in samples]

    rows = []
    for seed in SEEDS:
        row = {}
        for name, views, subset in (("both", 2, None), ("view0", 1, 0), ("view1", 1, 1)):
            tr, va, te = ((train, val, test) if subset is None else
                          (only(train, subset), only(val, subset), only(test, subset)))
            plugin = new_plugin(w, views=views, seed=seed, task_id=f"{name}{seed}")
            train_plugin(plugin, w, tr, va, TrainConfig(epochs=10, seed=seed))
            row[name] = compute_auroc(predict_logits(te, plugin, w)[:, 0], _labels(te))
        rows.append(row)
    return rows


# ---------------------------------------------------------------- 1. gradients

def _fd_report(f, x0, tol):
    rep = T.finite_difference_check(f, x0, step=1e-5, tolerance=tol)
    return rep.max_rel_error, rep.passed


def test_01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}
    with T.precision("f64"):
        y = rng.integers(0, 2, (6, 3))
        errors["focal"] = _fd_report(lambda z: focal_loss(z, y), rng.standard_normal((6, 3)) * 2, 1e-5)

        H0, q0, r = rng.standard_normal((7, 8)), rng.standard_normal(8), rng.standard_normal(8)
        errors["pool/H"] = _fd_report(
            lambda H: T.sum_(T.mul(attention_pool(H, q0).embedding, r)), H0, 1e-5)
        errors["pool/q"] = _fd_report(
            lambda q: T.sum_(T.mul(attention_pool(H0, q).embedding, r)), q0, 1e-5)

        W, x = rng.standard_normal((10, 6)), rng.standard_normal((4, 10))
        A0, B0, r2 = rng.standard_normal((3, 6)), rng.standard_normal((10, 3)), rng.standard_normal((4, 6))
        errors["lora/A"] = _fd_report(
            lambda A: T.sum_(T.mul(apply_adapted(x, W, LoraAdapter(A, T.Tensor(B0), 16.0, "t")), r2)),
            A0, 1e-5)
        errors["lora/B"] = _fd_report(
            lambda B: T.sum_(T.mul(apply_adapted(x, W, LoraAdapter(T.Tensor(A0), B, 16.0, "t")), r2)),
            B0, 1e-5)

        dec = init_decoder(SegDecoderConfig(in_channels=4, channels=(3, 2),
                                            upsample=((2, 2, 1), (2, 1, 1))), 1)
        r3 = rng.standard_normal((2, 8, 4, 3))
        errors["decoder/tokens"] = _fd_report(
            lambda tok: T.sum_(T.mul(dec(assemble_token_volume(T.reshape(tok, (3, 4, 4)), (2, 2)),
                                         (8, 4, 3)), r3)),
            rng.standard_normal(48), 1e-5)

        errors["end-to-end"] = _end_to_end_check(rng)
    seconds = time.perf_counter() - t0
    ok = all(p for _, p in errors.values()) and seconds < 120
    detail = ", ".join(f"{k} {e:.1e}" for k, (e, _) in errors.items()) + f"; {seconds:.0f}s"
    criterion("1", ok, detail)
    assert ok


def _end_to_end_check(rng):
    """Tape vs central differences for 32 plugin coordinates of the full pipeline."""
    w = init_random_backbone(BackboneConfig(), 0).astype(np.float64)
    plugin = _perturb(new_plugin(w, num_classes=2, seed=0), 1, scale=0.05)
    vol = _random_volume(rng, S=3)
    r = rng.standard_normal(2)

    def value():
        return T.sum_(T.mul(classify_volume([vol], plugin, w).logits, r))

    named = plugin.named_tensors()
    pools = {
        "lora_A": [k for k in named if k.endswith("lora_A")],
        "lora_B": [k for k in named if k.endswith("lora_B")],
        "task_query": ["task_query"], "head.weight": ["head.weight"], "head.bias": ["head.bias"],
    }
    quota = {"lora_A": 8, "lora_B": 8, "task_query": 8, "head.weight": 6, "head.bias": 2}
    picks = []
    for kind, n in quota.items():
        for _ in range(n):
            name = pools[kind][rng.integers(len(pools[kind]))]
            picks.append((name, int(rng.integers(named[name].size))))
    params = [named[k] for k in named]
    grads = dict(zip(named, T.backward(value(), wrt=params)))
    analytic, numeric = [], []
    with T.no_grad():
        for name, i in picks:
            flat = named[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = float(value().data)
            flat[i] = orig - 1e-5
            fm = float(value().data)
            flat[i] = orig
            numeric.append((fp - fm) / 2e-5)
            analytic.append(grads[name].reshape(-1)[i])
    a, n = np.array(analytic), np.array(numeric)
    denom = np.maximum.reduce([np.abs(a), np.abs(n), np.full_like(n, 1e-3 * np.abs(n).max())])
    err = float((np.abs(a - n) / denom).max())
    return err, err < 1e-4


# ---------------------------------------------------------------- 2. identity at init

def test_02_lora_identity_at_init(criterion):
    w = init_random_backbone(BackboneConfig(), 0)
    plugin = new_plugin(w, num_classes=2, seed=3)
    rng = np.random.default_rng(2)
    same = 0
    with T.no_grad():
        for _ in range(50):
            vol = _random_volume(rng)
            a = classify_volume([vol], plugin, w).logits.data
            b = classify_volume([vol], plugin, w, frozen=True).logits.data
            same += int(np.array_equal(a, b))
    criterion("2", same == 50, f"{same}/50 volumes bit-identical")
    assert same == 50


# ---------------------------------------------------------------- 3. frozen backbone

def test_03_frozen_backbone(headline, criterion):
    w, plugin = headline["weights"], headline["plugin"]
    unchanged = headline["result"].backbone_checksum == headline["checksum_before"] == w.checksum()
    assert_excludes_backbone(plugin.param_groups(), w)
    leak = T.Tensor(w["blocks.0.attn.q.weight"], requires_grad=True)
    leak.data = w["blocks.0.attn.q.weight"]        # share memory with the backbone
    try:
        AdamW({"head": [leak]}, frozen=w)
        refused = False
    except ContractError:
        refused = True
    no_overlap = not any(np.shares_memory(p.data, t) for p in plugin.parameters()
                         for t in w.tensors.values())
    ok = unchanged and refused and no_overlap
    criterion("3", ok, f"checksum unchanged={unchanged}, backbone tensor refused={refused}, "
                       f"no shared memory={no_overlap}")
    assert ok


# ---------------------------------------------------------------- 4. permutation invariance

def test_04_slice_permutation_invariance(criterion):
    w = init_random_backbone(BackboneConfig(), 0)
    plugin = _perturb(new_plugin(w, num_classes=2, seed=0), 5)
    rng = np.random.default_rng(4)
    worst = 0.0
    with T.no_grad():
        for _ in range(100):
            vol = _random_volume(rng)
            perm = rng.permutation(vol.shape[-1])
            shuffled = Volume(vol.data[..., perm])
            a = classify_volume([vol], plugin, w).logits.data
            b = classify_volume([shuffled], plugin, w).logits.data
            worst = max(worst, float(np.abs(a - b).max()))
    criterion("4", worst <= 1e-6, f"max |Δlogit| {worst:.2e} over 100 volumes (f32)")
    assert worst <= 1e-6


# ---------------------------------------------------------------- 5. merge equivalence

def test_05_merge_equivalence(criterion):
    w = init_random_backbone(BackboneConfig(), 0)
    plugin = _perturb(new_plugin(w, seed=0), 7, scale=0.02)
    rng = np.random.default_rng(5)
    worst, layers = 0.0, 0
    for target, ad in plugin.adapters[0].adapters.items():
        W = w[target + ".weight"]
        x = rng.standard_normal((100, W.shape[0])).astype(np.float32)
        unmerged = apply_adapted(x, W, ad).data
        merged = x @ merge_adapter(W, ad).astype(np.float32)
        worst = max(worst, float(np.abs(unmerged - merged).max()))
        layers += 1
    criterion("5", worst <= 1e-5, f"max |Δ| {worst:.2e} over {layers} adapted layers × 100 inputs")
    assert worst <= 1e-5


# ---------------------------------------------------------------- 6. calibration contract

def test_06_calibration_contract(criterion):
    rng = np.random.default_rng(6)
    anchor, auc_gap, positive = 0.0, 0.0, 0
    for _ in range(200):
        n, K = int(rng.integers(10, 80)), int(rng.integers(1, 4))
        y = rng.integers(0, 2, (n, K))
        y[0], y[1] = 0, 1
        z = rng.standard_normal((n, K)) * 2 + rng.uniform(0, 2) * y
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")      # a ≤ 0 is reported; it is tallied below
            params = fit_platt(z, y)
        p = apply_calibration(z, params)
        for c in range(K):
            a, b, t = params.a[c], params.b[c], params.threshold[c]
            anchor = max(anchor, abs(expit(a * t + b) - 0.5))
            if a > 0:
                positive += 1
                auc_gap = max(auc_gap, abs(compute_auroc(p[:, c], y[:, c]) -
                                           compute_auroc(z[:, c], y[:, c])))
    ok = anchor <= 1e-9 and auc_gap <= 1e-15
    criterion("6", ok, f"max |σ(a·t*+b)-0.5| {anchor:.1e}; max AUROC change {auc_gap:.1e} "
                       f"over {positive} classes with a>0")
    assert ok


# ---------------------------------------------------------------- 7. metrics oracles

def _pairwise(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


def _youden_sweep(s, y):
    """Every cutoff ``s >= c`` over the observed scores plus one above all of them."""
    P, N = int((y == 1).sum()), int((y == 0).sum())
    best = None
    for c in np.append(np.unique(s), np.inf):
        pred = s >= c
        tp, tn = int((pred & (y == 1)).sum()), int((~pred & (y == 0)).sum())
        # J·P·N in integers, so exact ties stay ties
        key = (tp * N + tn * P - P * N, tp)
        if best is None or key > best[0]:
            best = (key, tp / P, tn / N)
    (j, _), sens, spec = best
    return j / (P * N), sens, spec


def test_07_metrics_oracles(criterion):
    rng = np.random.default_rng(7)
    worst, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        if y.all() or not y.any():
            continue
        s = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))   # plenty of ties
        ref = _pairwise(s, y)
        worst = max(worst, abs(ref - trapezoid_auroc(s, y)), abs(ref - compute_auroc(s, y)))
        done += 1
    mismatches, checked = 0, 0
    for _ in range(500):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        if y.all() or not y.any():
            continue
        s = np.round(rng.random(n), 2)
        op = youden_threshold(s, y)
        j, sens, spec = _youden_sweep(s, y)
        again = operating_point(s, y, op.threshold)
        if (abs(op.youden_j - j) > 1e-12 or (op.sensitivity, op.specificity) != (sens, spec)
                or (again.sensitivity, again.specificity) != (sens, spec)):
            mismatches += 1
        checked += 1
    ok = worst <= 1e-12 and mismatches == 0
    criterion("7", ok, f"AUROC oracle gap {worst:.1e} on 1000 sets; Youden mismatches "
                       f"{mismatches}/{checked}")
    assert ok


# ---------------------------------------------------------------- 8. synthetic end to end

def test_08a_synthetic_headline(headline, criterion):
    res = headline["result"]
    ok = headline["auroc"] >= 0.95 and len(res.history) <= 100
    criterion("8a", ok, f"test AUROC {headline['auroc']:.4f} (best epoch {res.best_epoch} of "
                        f"{len(res.history)}, {headline['seconds']:.0f}s)")
    assert ok


def test_08b_aux_supervision_direction(headline, aux_runs, criterion):
    runs = aux_runs["runs"]
    wins = sum(r["mask"] >= r["nomask"] for r in runs)
    total = headline["seconds"] + aux_runs["seconds"]
    pairs = " ".join(f"{r['mask']:.3f}/{r['nomask']:.3f}" for r in runs)
    ok = wins >= 3 and total < 15 * 60
    criterion("8b", ok, f"mask ≥ no-mask at epoch 10 in {wins}/5 seeds (val AUROC {pairs}); "
                        f"criterion 8 total {total / 60:.1f} min")
    assert wins >= 3
    assert total < 15 * 60


# ---------------------------------------------------------------- 9. multi-view

def test_09a_single_view_bypasses_fusion(criterion):
    w = init_random_backbone(BackboneConfig(), 0)
    plugin = _perturb(new_plugin(w, num_classes=2, seed=1), 9)
    rng = np.random.default_rng(9)
    same = 0
    with T.no_grad():
        for _ in range(10):
            vol = _random_volume(rng)
            res = classify_volume([vol], plugin, w)
            enc = encode_slices(prepare_slices(vol), w, plugin.adapters[0])
            pooled = attention_pool(enc.class_tokens, plugin.view_queries[0]).embedding
            fused, fusion_pool = fuse_views([pooled], plugin.task_query)
            direct = plugin.head(pooled).data
            same += int(np.array_equal(res.logits.data[0], direct) and fused is pooled
                        and fusion_pool is None and res.fusion_pool is None)
    criterion("9a", same == 10, f"{same}/10 volumes identical to the bypassed path")
    assert same == 10


def test_09b_two_views_beat_best_single(two_view_runs, criterion):
    wins = sum(r["both"] >= max(r["view0"], r["view1"]) for r in two_view_runs)
    detail = " ".join(f"{r['both']:.3f}/{max(r['view0'], r['view1']):.3f}" for r in two_view_runs)
    criterion("9b", wins >= 3, f"V=2 ≥ best single view in {wins}/5 seeds (test AUROC {detail})")
    assert wins >= 3


# ---------------------------------------------------------------- 10. heatmaps

def test_10a_heatmap_localization(headline, criterion):
    w, plugin = headline["weights"], headline["plugin"]
    ratios = [box_mass_ratio(volume_saliency(s.views, plugin, w, mode="last", normalize=False),
                             s.boxes)
              for s in headline["test"] if s.label[0] == 1]
    frac = float(np.mean(np.array(ratios) >= 2.0))
    criterion("10a", frac >= 0.7, f"box mass ≥ 2× uniform on {frac:.0%} of {len(ratios)} positive "
                                  f"test volumes (median ratio {np.median(ratios):.1f})")
    assert frac >= 0.7


def test_10b_uniform_attention_is_flat(criterion):
    cfg = BackboneConfig(image_size=(32, 32))
    w = init_random_backbone(cfg, 0)
    # zero query/key projections make every attention row uniform
    for i in range(cfg.depth):
        for k in ("q", "k"):
            w.tensors[f"blocks.{i}.attn.{k}.weight"][:] = 0
            w.tensors[f"blocks.{i}.attn.{k}.bias"][:] = 0
    plugin = new_plugin(w, seed=0)
    plugin.task_query.data[:] = 0                   # uniform slice weights too
    vol = _random_volume(np.random.default_rng(10), size=(32, 32), S=5)
    end_to_end = volume_saliency([vol], plugin, w, mode="last", normalize=True).values
    L = cfg.num_patches + 1
    direct = volume_heatmap(
        np.stack([class_to_patch_map(np.full((4, L, L), 1.0 / L), cfg.grid, cfg.image_size)] * 5),
        np.full(5, 0.2)).values
    spread = max(float(np.ptp(end_to_end)), float(np.ptp(direct)))
    criterion("10b", spread <= 1e-6, f"max-min of uniform-attention heatmap {spread:.1e}")
    assert spread <= 1e-6


# ---------------------------------------------------------------- 11. plugin lifecycle

def _expected_plugin_size(plugin, manifest_len):
    body = sum(2 + len(name.encode()) + 2 + 8 * t.ndim for name, t in plugin.named_tensors().items())
    return 12 + manifest_len + 12 + body + 4 * plugin.num_trainable()


def test_11_plugin_lifecycle(headline, tmp_path, criterion):
    w, a = headline["weights"], headline["plugin"]
    b = _perturb(new_plugin(w, seed=11, task_id="other"), 11)
    vol = headline["test"][0].views
    save_plugin(tmp_path / "a.amcp", a)
    back = load_plugin(tmp_path / "a.amcp", w)
    raw = (tmp_path / "a.amcp").read_bytes()
    with T.no_grad():
        ref = classify_volume(vol, a, w).logits.data
        roundtrip = (np.array_equal(classify_volume(vol, back, w).logits.data, ref)
                     and plugin_to_bytes(back) == raw)
    eng = Engine(w, a)
    first = eng.logits(vol)
    eng.swap_plugin(b).logits(vol)
    swap_ok = np.array_equal(eng.swap_plugin(a).logits(vol), first) and np.array_equal(first, ref[0])
    other = init_random_backbone(BackboneConfig(), 1)
    refusals = 0
    for action in (lambda: load_plugin(tmp_path / "a.amcp", other),
                   lambda: Engine(other).swap_plugin(a),
                   lambda: classify_volume(vol, a, other)):
        try:
            action()
        except FingerprintError:
            refusals += 1
    manifest_len = struct.unpack_from("<I", raw, 8)[0]
    counted = count_trainable(a.adapters, a.queries(), a.head)
    dec = new_plugin(w, seed=0, decoder=True)
    dec_raw = plugin_to_bytes(dec)
    size_ok = (len(raw) == _expected_plugin_size(a, manifest_len) and counted == a.num_trainable()
               and len(dec_raw) == _expected_plugin_size(dec, struct.unpack_from("<I", dec_raw, 8)[0]))
    ok = roundtrip and swap_ok and refusals == 3 and size_ok
    criterion("11", ok, f"round-trip={roundtrip}, A→B→A exact={swap_ok}, mismatches refused "
                        f"{refusals}/3, bytes {len(raw)} = header+manifest+4×{counted}: {size_ok}")
    assert ok


# ---------------------------------------------------------------- 12. ensembling

def test_12_ensemble(aux_runs, criterion):
    w, val, test = aux_runs["weights"], aux_runs["val"], aux_runs["test"]
    yv, yt = _labels(val)[:, None], _labels(test)
    members, aucs = [], []
    for run in aux_runs["runs"]:
        plugin = run["nomask_plugin"]
        plugin.platt = fit_platt(predict_logits(val, plugin, w), yv)
        z = plugin.calibrated_logits(predict_logits(test, plugin, w))
        members.append(z)
        aucs.append(compute_auroc(z[:, 0], yt))
    ens = compute_auroc(ensemble_logits(members)[:, 0], yt)
    single = aux_runs["runs"][0]["nomask_plugin"]
    z1 = single.calibrated_logits(predict_logits(test, single, w))
    one_is_plain = np.array_equal(ensemble_logits([z1]), z1)
    ok = ens >= np.median(aucs) and one_is_plain
    criterion("12", ok, f"ensemble AUROC {ens:.4f} vs median member {np.median(aucs):.4f} "
                        f"(members {' '.join(f'{a:.3f}' for a in aucs)}); 1-member == plain: "
                        f"{one_is_plain}")
    assert ok
