"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed at the end of the run.

The benchmark criteria train every method on ten seeds and take about
twelve minutes on one core.
"""

import json
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import directional_grad_errors, random_box, record_criterion
from oracles import naive_coco, random_instance
from s4od import pipelines as pl
from s4od.detector import (
    Detection, DetectorConfig, DetectorParams, SimTeacherConfig, Supervision, anchor_set, assign_anchors,
    detection_loss, simulated_teacher, zero_grads,
)
from s4od.evaluation import calibrate_gamma_h, coco_ap, max_iou
from s4od.formats import FormatError, load_annotations, load_detections, save_annotations, save_detections
from s4od.geometry import (
    BBox, ROTATIONS, Transform, flip_transform, iou, rotate_flip_box, sample_transform, transform_box,
    transform_image,
)
from s4od.scenegen import SceneConfig, generate_dataset
from s4od.selector import (
    SelectorConfig, SelectorFeatures, SelectorParams, build_features, class_weights, classify, label_pseudo_boxes,
    selector_loss, train_selector,
)

SMALL = DetectorConfig(d_feat=4, context=0, scales=(8.0, 12.0), aspects=(1.0, 2.0))

# reduced from 500 curated / 2000 web scenes so that ten seeds fit the time budget;
# the smaller curated set gets more epochs
BENCH = pl.BenchmarkConfig(n_curated=250, n_web=300, n_test=150)
BENCH_CFG = pl.PipelineConfig(teacher_epochs=40, pretrain_epochs=6, finetune_epochs=40)
SEEDS = range(10)
SENSITIVITY_SEEDS = range(3)


def check(name, ok, detail=""):
    record_criterion(name, ok, detail)
    assert ok, f"{name}: {detail}"


# -- exact and oracle criteria -------------------------------------------------

def test_ap_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    mismatched_none = 0
    for _ in range(200):
        dets, gts = random_instance(rng, max_images=5, max_dets=6, max_gts=4)
        got, want = coco_ap(dets, gts), naive_coco(dets, gts)
        for k, v in want.items():
            g = getattr(got, k)
            if (v is None) != (g is None):
                mismatched_none += 1
            elif v is not None:
                worst = max(worst, abs(g - v))
    secs = time.perf_counter() - t0
    check("AP oracle equivalence", worst <= 1e-9 and mismatched_none == 0 and secs < 10,
          f"max |diff| {worst:.1e} over 200 instances, {secs:.1f}s")


def _dyadic_box(rng):
    x, y = rng.integers(0, 480, 2) / 8
    w, h = rng.integers(1, 160, 2) / 8
    return BBox(float(x), float(y), float(w), float(h))


def _int_box(rng, W, H):
    w, h = int(rng.integers(1, W // 2)), int(rng.integers(1, H // 2))
    return BBox(float(rng.integers(0, W - w + 1)), float(rng.integers(0, H - h + 1)), float(w), float(h))


def test_geometry_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cases = 0
    failures = []
    for _ in range(2000):
        a, b = random_box(rng, lo=0.5), random_box(rng, lo=0.5)
        v = iou(a, b)
        if not (v == iou(b, a) and 0.0 <= v <= 1.0 and iou(a, a) == 1.0):
            failures.append(("iou", a, b))
        cases += 1
    for _ in range(2000):
        b = _int_box(rng, 64, 48)
        f = flip_transform()
        out, W, H = b, 64, 48
        for _ in range(4):
            out = rotate_flip_box(out, 90, False, W, H)
            W, H = H, W
        if out != b or transform_box(transform_box(b, f, 64, 48), f, 64, 48) != b:
            failures.append(("group", b))
        cases += 1
    for _ in range(200):
        img = rng.random((int(rng.integers(2, 9)), int(rng.integers(2, 9)), 2))
        back, flipped = img, transform_image(transform_image(img, flip_transform()), flip_transform())
        for _ in range(4):
            back = transform_image(back, Transform(90))
        if not (np.array_equal(back, img) and np.array_equal(flipped, img)):
            failures.append(("image group", img.shape))
        cases += 1
    for _ in range(2000):
        a, b = _dyadic_box(rng), _dyadic_box(rng)
        t = Transform(int(rng.choice(ROTATIONS)), bool(rng.integers(2)))
        if iou(transform_box(a, t, 100, 100), transform_box(b, t, 100, 100)) != iou(a, b):
            failures.append(("invariance", a, b, t))
        cases += 1
    for _ in range(2000):
        b = _int_box(rng, 32, 24)
        x, y, w, h = (int(v) for v in b.as_tuple())
        im = np.zeros((24, 32), dtype=np.int64)
        im[y:y + h, x:x + w] = np.arange(1, w * h + 1).reshape(h, w)
        t = Transform(int(rng.choice(ROTATIONS)), bool(rng.integers(2)))
        tb = transform_box(b, t, 32, 24)
        ti = transform_image(im, t)
        X, Y, Wb, Hb = (int(v) for v in tb.as_tuple())
        if ti[Y:Y + Hb, X:X + Wb].sum() != im.sum() or ti.sum() != im.sum():
            failures.append(("mass", b, t))
        cases += 1
    for _ in range(2000):
        protected = [random_box(rng, lo=2.0) for _ in range(int(rng.integers(0, 3)))]
        t = sample_transform(rng, protected, 64, 64)
        for b in protected:
            moved = rotate_flip_box(b, t.rotation, t.hflip, 64, 64)
            tb = transform_box(b, t, 64, 64)
            if tb is None or (tb.w, tb.h) != (moved.w, moved.h):
                failures.append(("crop", b, t))
        cases += 1
    secs = time.perf_counter() - t0
    check("geometry suite", not failures and cases >= 10_000 and secs < 30,
          f"{cases} cases, {len(failures)} failures, {secs:.1f}s")


def _detector_case(rng):
    img = rng.random((16, int(rng.choice([16, 20])), 3))
    H, W = img.shape[:2]
    p = DetectorParams.init(SMALL, rng)
    p.raw_mean = rng.normal(0, 0.1, SMALL.d_raw)
    p.wc = rng.normal(0, 0.5, p.wc.shape)
    p.Wr = rng.normal(0, 0.5, p.Wr.shape)
    sup = Supervision([random_box(rng, W, H, lo=4.0) for _ in range(2)], [random_box(rng, W, H, lo=3.0)])
    return img, p, sup


def test_gradient_checks():
    t0 = time.perf_counter()
    worst = {"detector": 0.0, "selector": 0.0, "consistency": 0.0}
    counts = dict.fromkeys(worst, 0)

    seed = 0
    while counts["detector"] < 20:
        rng = np.random.default_rng([1, seed])
        seed += 1
        img, p, sup = _detector_case(rng)
        _, grads, info = detection_loss(img, p, sup)
        if info.n_pos == 0:
            continue
        g = np.concatenate([grads[n].ravel() for n in p.arrays()])
        errs = directional_grad_errors(lambda v: detection_loss(img, p.with_flat(v), sup)[0], p.flat(), g, rng)
        worst["detector"] = max(worst["detector"], *errs)
        counts["detector"] += 1

    cfg = SelectorConfig(hidden_roi=6, hidden_meta=4)
    for k in range(20):
        rng = np.random.default_rng([2, k])
        n, F = 12, int(rng.integers(2, 8))
        feats = SelectorFeatures(rng.normal(size=(n, F)), rng.random((n, 7)))
        labels = rng.integers(0, 3, n)
        p = SelectorParams.init(F, cfg, rng)
        p.a = rng.normal(0, 0.3, p.a.shape)
        w = class_weights(labels)
        _, grads = selector_loss(p, feats, labels, w)
        g = np.concatenate([grads[k2].ravel() for k2 in p.arrays()])
        errs = directional_grad_errors(lambda v: selector_loss(p.with_flat(v), feats, labels, w)[0], p.flat(), g, rng)
        worst["selector"] = max(worst["selector"], *errs)
        counts["selector"] += 1

    for k in range(20):
        rng = np.random.default_rng([3, k])
        img, p, sup = _detector_case(rng)
        H, W = img.shape[:2]
        t = sample_transform(rng, sup.positives, W, H)
        grads = zero_grads(p)
        pl.consistency_loss(p, img, sup.positives, t, sup.ambiguous, grads=grads)
        g = np.concatenate([grads[n].ravel() for n in p.arrays()])
        f = lambda v: pl.consistency_loss(p.with_flat(v), img, sup.positives, t, sup.ambiguous)
        worst["consistency"] = max(worst["consistency"], *directional_grad_errors(f, p.flat(), g, rng))
        counts["consistency"] += 1

    secs = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and all(c >= 20 for c in counts.values()) and secs < 60
    check("gradient checks", ok, ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f", {secs:.1f}s")


def test_safe_zone_exactness():
    checked = 0
    ok = True
    for k in range(50):
        rng = np.random.default_rng([4, k])
        img = rng.random((32, 32, 3))
        p = DetectorParams.init(SMALL, rng)
        p.wc = rng.normal(0, 0.5, p.wc.shape)
        sup = Supervision([random_box(rng, 32, 32, lo=6.0)], [random_box(rng, 32, 32, lo=4.0) for _ in range(2)])
        anchors = anchor_set(32, 32, SMALL)
        ref = assign_anchors(anchors, sup, SMALL)
        base, g0, info = detection_loss(img, p, sup)
        ok &= not info.dlogits[ref.excluded].any() and not info.dreg[ref.excluded].any()
        tiny = BBox(float(rng.uniform(0, 31)), float(rng.uniform(0, 31)), 0.5, 0.5)
        for amb in (sup.ambiguous[::-1], sup.ambiguous + sup.ambiguous[:1], sup.ambiguous + [tiny]):
            alt = Supervision(sup.positives, amb)
            if not np.array_equal(assign_anchors(anchors, alt, SMALL).excluded, ref.excluded):
                continue
            loss, g1, _ = detection_loss(img, p, alt)
            ok &= loss == base and all(np.array_equal(g0[n], g1[n]) for n in g0)
            checked += 1
    check("safe-zone exactness", ok and checked >= 100, f"{checked} perturbations, bitwise")


def test_reduction_identities():
    data = pl.make_datasets(pl.BenchmarkConfig(n_curated=60, n_web=30, n_test=10), 0)
    cfg = pl.PipelineConfig(teacher_epochs=15, pretrain_epochs=3, finetune_epochs=3,
                            selector=SelectorConfig(hidden_roi=32, hidden_meta=8, epochs=3))
    teacher = pl.train_teacher(data.curated, cfg)
    sel = pl.fit_selector(teacher, data.curated, cfg)
    grouper = pl.selector_grouper(sel.params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = pl.run_s4od(data, replace(cfg, consistency_weight=0.0), teacher, grouper)
        b = pl.run_s2od(data, cfg, teacher, grouper)
        low = replace(cfg, sod_conf_thresh=0.2)
        c = pl.run_s2od(data, low, teacher, pl.confidence_grouper(low.sod_conf_thresh))
        d = pl.run_sod(data, low, teacher)
    first = a.params.tobytes() == b.params.tobytes() and a.record.student == b.record.student
    second = c.params.tobytes() == d.params.tobytes() and c.record.student == d.record.student
    check("reduction identities", first and second and not d.record.pretrain_skipped,
          f"S4OD(0)==S2OD {first}, S2OD(confidence)==SOD {second}")


def test_selector_beats_confidence_at_zero_correlation():
    t0 = time.perf_counter()
    tc = SimTeacherConfig(rho=0.0)
    wins, lines = 0, []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        train = generate_dataset(SceneConfig(), 200, rng)
        test = generate_dataset(SceneConfig(id_offset=1000), 200, rng)

        def rows(scenes):
            F, L, M = [], [], []
            for s in scenes:
                d = simulated_teacher(s, tc, rng)
                F.append(build_features(d, s.width, s.height, tc.feature_dim))
                L.append(label_pseudo_boxes([x.box for x in d], s.gt_boxes, 0.6, 0.05))
                M.append(max_iou([x.box for x in d], s.gt_boxes))
            return SelectorFeatures.concat(F, tc.feature_dim), np.concatenate(L), np.concatenate(M)

        f, lab, _ = rows(train)
        params, _ = train_selector(f, lab, seed=seed)
        ft, _, m = rows(test)
        _, prob = classify(params, ft)
        conf = ft.meta[:, 0] > 0.7
        # matched yield: the selector keeps as many boxes as the confidence rule does
        top = np.argsort(-prob[:, 1], kind="stable")[:conf.sum()]
        p_conf, p_sel = (m[conf] >= 0.6).mean(), (m[top] >= 0.6).mean()
        wins += p_sel > p_conf
        lines.append(f"{p_sel:.2f}>{p_conf:.2f}")
    secs = time.perf_counter() - t0
    check("selector beats confidence thresholding", wins >= 9 and secs < 180,
          f"{wins}/10 seeds, {secs:.0f}s")


# -- benchmark criteria ----------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    records = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in SEEDS:
            records += pl.run_benchmark_seed(BENCH, BENCH_CFG, seed)
    return records, time.perf_counter() - t0


def test_calibration_contract(benchmark):
    records, _ = benchmark
    rng = np.random.default_rng(5)
    argmax_ok = True
    for _ in range(50):
        dets, gts = random_instance(rng, max_dets=8)
        if any(dets.values()):
            res = calibrate_gamma_h(dets, gts)
            argmax_ok &= res.gamma_h == res.table[int(np.argmax([v for _, v in res.table]))][0]
    tables = [r.gamma_table for r in records if r.method == "S2OD"]
    for r in records:
        if r.gamma_table:
            argmax_ok &= r.gamma_h == r.gamma_table[int(np.argmax([v for _, v in r.gamma_table]))][0]
    def monotone(vals):
        d = np.diff(vals)
        return bool(np.all(d >= 0) or np.all(d <= 0))
    non_monotone = sum(not monotone([v for _, v in t]) for t in tables)
    picks = sorted({r.gamma_h for r in records if r.method == "S2OD"})
    check("calibration contract", argmax_ok and non_monotone > 0,
          f"argmax exact; {non_monotone}/{len(tables)} benchmark tables non-monotone; picks {picks}")


def test_benchmark_ordering(benchmark):
    records, secs = benchmark
    s = pl.summarize(records)
    mean = {k: v["mean"] for k, v in s.items()}
    s4, bd = s["S4OD"]["values"], s["BD"]["values"]
    beats_bd = sum(s4[k] > bd[k] for k in bd)
    claims = {
        "S2OD>SOD": mean["S2OD"] > mean["SOD"],
        "S4OD>=S2OD": mean["S4OD"] >= mean["S2OD"],
        "CSD-sel>=CSD": mean["CSD-selective"] >= mean["CSD"],
        "S4OD>BD 8/10": beats_bd >= 8,
    }
    detail = " ".join(f"{k}={'ok' if v else 'no'}" for k, v in claims.items())
    detail += "; means " + " ".join(f"{k}={100 * v:.1f}" for k, v in mean.items())
    detail += f"; S4OD>BD in {beats_bd}/10; {secs / 60:.1f} min"
    print("\n" + pl.results_table(records))
    check("benchmark ordering", all(claims.values()) and secs < 15 * 60, detail)


def test_sensitivity_pattern():
    records = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in SENSITIVITY_SEEDS:
            records += pl.sensitivity_seed(BENCH, BENCH_CFG, seed)

    def mean_by(method, key):
        out = {}
        for r in records:
            if r.method == method:
                out.setdefault(key(r.config), []).append(r.student["ap_50_95"])
        return {k: float(np.mean(v)) for k, v in out.items()}

    sod = mean_by("SOD", lambda c: c["sod_conf_thresh"])
    s4 = mean_by("S4OD", lambda c: (c["gamma_h"], c["gamma_l"]))
    r_sod = max(sod.values()) - min(sod.values())
    r_s4 = max(s4.values()) - min(s4.values())
    ok = r_sod > r_s4
    detail = (f"SOD range {100 * r_sod:.2f} over {sorted(sod)}, S4OD range {100 * r_s4:.2f}, "
              f"{len(SENSITIVITY_SEEDS)} seeds; soft")
    record_criterion("sensitivity pattern", ok, detail)
    if not ok:
        warnings.warn(f"sensitivity pattern not observed: {detail}", UserWarning)


def test_round_trip_formats(tmp_path):
    scenes = generate_dataset(SceneConfig(annotation_jitter=1.5), 20, np.random.default_rng(0))
    save_annotations(tmp_path / "a.json", scenes)
    anns = load_annotations(tmp_path / "a.json")
    ann_ok = anns.boxes == {s.image_id: s.gt_boxes for s in scenes}

    rng = np.random.default_rng(1)
    dets = {s.image_id: [Detection(random_box(rng), float(rng.random())) for _ in range(3)] for s in scenes}
    save_detections(tmp_path / "d.json", dets)
    back = load_detections(tmp_path / "d.json")
    det_ok = all([(d.box, d.score) for d in back[i]] == [(d.box, d.score) for d in v] for i, v in dets.items())

    p = DetectorParams.init(DetectorConfig(), rng)
    p.save(tmp_path / "p.json")
    s = SelectorParams.init(32, SelectorConfig(hidden_roi=8, hidden_meta=4), rng)
    s.save(tmp_path / "s.json")
    par_ok = DetectorParams.load(tmp_path / "p.json").tobytes() == p.tobytes() and \
        np.array_equal(SelectorParams.load(tmp_path / "s.json").flat(), s.flat())

    bad = [
        ({"images": [{"id": 1, "width": 8, "height": 8}],
          "annotations": [{"image_id": 1, "bbox": [0, 0, -1, 2], "category_id": 1}]}, "width must be > 0"),
        ([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 2.0}], "outside [0, 1]"),
        ({"images": "x", "annotations": []}, "must be arrays"),
    ]
    rejected = 0
    for doc, needle in bad:
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        loader = load_detections if isinstance(doc, list) else load_annotations
        try:
            loader(path)
        except FormatError as e:
            rejected += needle in str(e) and str(path) in str(e)
    check("round-trip file formats", ann_ok and det_ok and par_ok and rejected == len(bad),
          f"annotations {ann_ok}, detections {det_ok}, params {par_ok}, {rejected}/{len(bad)} malformed rejected")
