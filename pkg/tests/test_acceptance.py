"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line for its criterion (also collected
in the terminal summary). The discrimination study trains the segmentation
network and the autoencoder once at desk scale and shares them between tests,
so this module takes roughly half an hour on one CPU core.
"""
import csv
import json
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np
import pytest
from sklearn.cluster import KMeans

from myoscan import pipeline
from myoscan.autodiff import (
    Network,
    NetworkSpec,
    batch_norm,
    conv2d,
    dropout,
    elu,
    finite_difference_check,
    fully_connected,
    identity,
    max_pool2d,
    softmax,
    upsample2d,
)
from myoscan.classifier import RbfSVC
from myoscan.cli import run
from myoscan.config import parse_config
from myoscan.encoder import EncodingMap, axial_patches, build_cae_spec, sample_mask_voxels
from myoscan.errors import DataError
from myoscan.evaluation import auc_score, cross_validate, roc_curve_auc
from myoscan.features import (
    ClusterAssignment,
    aggregate_max_features,
    cluster_encoding_std,
    cluster_voxels,
)
from myoscan.pipeline import Workspace, check_hygiene, read_features
from myoscan.segmentation import build_segmentation_spec, dice, mad
from myoscan.segmentation.patches import normalize_intensity

from conftest import VERBS, run_all

pytestmark = pytest.mark.acceptance

RESULTS = []

# Desk-scale study: narrower segmentation streams, d=128, a coarse SVM grid
# and encodings on every 8th myocardium voxel keep it within a CPU budget.
STUDY_INI = """\
[experiment]
seed = 1

[phantom]
n_seg_train = 8
n_cae_train = 4
n_classify = 60
contrast_delta = -300

[segmentation]
filters = 4 8 16
units = 256
epochs = 10
minibatches = 20
batch_size = 64
learning_rate = 0.03
near_distance = 8

[cae]
d = 128
epochs = 5
train_minibatches = 10
val_minibatches = 2
batch_size = 64
learning_rate = 0.01
patch_step = 10
encode_step = 8

[svm]
exponent_step = 2

[cv]
folds = 10
repeats = 5

[sweep]
k_values = 1 10 20 auto
cluster_seeds = 0 1 2 3
cutoffs =
"""


def record(capsys, number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


@dataclass
class Study:
    detectable: str
    null: str
    seconds: float
    stage_seconds: dict
    loaded: dict = field(default_factory=dict)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    cfg = parse_config(STUDY_INI)
    null_cfg = parse_config(STUDY_INI.replace("contrast_delta = -300", "contrast_delta = 0"))
    det, null = str(root / "detectable"), str(root / "null")

    # record which patients each stage reads
    loaded, original = {}, pipeline.load_patient
    current = ["?"]

    def spy(ws, rec):
        loaded.setdefault(current[0], set()).add(rec["id"])
        return original(ws, rec)

    pipeline.load_patient = spy
    stage_seconds = {}
    start = time.perf_counter()
    try:
        for verb in ("phantom-gen", "seg-train", "seg-run", "seg-eval", "cae-train", "encode", "features",
                     "classify"):
            current[0] = verb
            t = time.perf_counter()
            run(verb, cfg, det)
            stage_seconds[verb] = time.perf_counter() - t
        # the null condition reuses both trained networks
        current[0] = "null"
        run("phantom-gen", null_cfg, null)
        for rel in (("seg", "segmenter.myow"), ("cae", "cae_d128.myow")):
            os.makedirs(os.path.join(null, rel[0]), exist_ok=True)
            shutil.copy(os.path.join(det, *rel), os.path.join(null, *rel))
        for verb in ("seg-run", "encode", "features", "classify"):
            t = time.perf_counter()
            run(verb, null_cfg, null)
            stage_seconds["null " + verb] = time.perf_counter() - t
    finally:
        pipeline.load_patient = original
    seconds = time.perf_counter() - start
    return Study(det, null, seconds, stage_seconds, loaded)


def _roc(ws_root):
    folder = os.path.join(ws_root, "classify")
    name = next(f for f in sorted(os.listdir(folder)) if f.endswith(".json"))
    with open(os.path.join(folder, name)) as fh:
        return json.load(fh)


def _all_kinds_net(seed=0):
    spec = NetworkSpec({"a": (1, 8, 8), "b": (1, 6, 6)})
    spec.add("a_conv", conv2d(2, (3, 3), bias=False), "a")
    spec.add("a_bn", batch_norm(), "a_conv")
    spec.add("a_act", elu(), "a_bn")
    spec.add("a_pool", max_pool2d(2), "a_act")
    spec.add("b_up", upsample2d(2), "b")
    spec.add("b_conv", conv2d(2, (3, 3), padding="same", bias=False), "b_up")
    spec.add("b_pool", max_pool2d(3), "b_conv")
    spec.add("b_id", identity(), "b_pool")
    spec.add("fuse", fully_connected(5, bias=False), "a_pool", "b_id")
    spec.add("fuse_bn", batch_norm(), "fuse")
    spec.add("fuse_act", elu(), "fuse_bn")
    spec.add("drop", dropout(0.5), "fuse_act")
    spec.add("logits", fully_connected(2), "drop")
    spec.add("prob", softmax(), "logits")
    return Network(spec, dtype=np.float64, seed=seed)


def _decoder_net(seed=0):
    spec = NetworkSpec({"x": (1, 8, 8)})
    spec.add("conv", conv2d(2, (3, 3), padding="same", bias=False), "x")
    spec.add("bn", batch_norm(), "conv")
    spec.add("act", elu(), "bn")
    spec.add("pool", max_pool2d(2), "act")
    spec.add("code", fully_connected(6), "pool")
    spec.add("code_act", elu(), "code")
    spec.add("fc", fully_connected(2 * 5 * 5, output_shape=(2, 5, 5)), "code_act")
    spec.add("up", upsample2d(2), "fc")
    spec.add("out", conv2d(1, (3, 3)), "up")
    return Network(spec, dtype=np.float64, seed=seed)


def test_01_gradients(capsys):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    errs = []
    for seed in range(3):
        xs = [rng.normal(size=(5, 1, 8, 8)), rng.normal(size=(5, 1, 6, 6))]
        errs.append(finite_difference_check(_all_kinds_net(seed), xs, rng.integers(0, 2, 5),
                                            "cross_entropy_softmax"))
        x = rng.normal(size=(4, 1, 8, 8))
        errs.append(finite_difference_check(_decoder_net(seed), x, rng.normal(size=(4, 1, 8, 8)),
                                            "mean_squared_error"))
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-4 and elapsed < 60
    assert record(capsys, 1, ok, f"max relative error {max(errs):.2e}, {elapsed:.1f} s")


def _brute_surface(m):
    out = set()
    for p in zip(*np.nonzero(m)):
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                if not (0 <= q[axis] < m.shape[axis]) or not m[tuple(q)]:
                    out.add(tuple(int(v) for v in p))
    return sorted(out)


def _brute_mad(a, b, sp):
    sa = np.array(_brute_surface(a), float) * sp
    sb = np.array(_brute_surface(b), float) * sp
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))  # every pair
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sa) + len(sb))


def test_02_metric_oracles(capsys):
    rng = np.random.default_rng(2)
    worst_dice, worst_mad = 0.0, 0.0
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(3, 21, 3))
        a = rng.random(shape) < rng.uniform(0.02, 0.2)
        b = rng.random(shape) < rng.uniform(0.02, 0.2)
        a.flat[0] = b.flat[-1] = True
        sa = set(zip(*np.nonzero(a)))
        sb = set(zip(*np.nonzero(b)))
        ref = 2 * len(sa & sb) / (len(sa) + len(sb))
        worst_dice = max(worst_dice, abs(dice(a, b) - ref))
        sp = tuple(rng.uniform(0.4, 1.5, 3))
        worst_mad = max(worst_mad, abs(mad(a, b, sp) - _brute_mad(a, b, sp)))
    ok = worst_dice == 0.0 and worst_mad < 1e-9
    assert record(capsys, 2, ok, f"dice max error {worst_dice:g}, MAD max error {worst_mad:.1e} mm")


def test_03_architecture(capsys):
    seg = build_segmentation_spec()
    ladder = [(16, (5, 5)), (16, (5, 5)), "pool", (32, (3, 3)), (32, (3, 3)), "pool", (64, (3, 3)), (64, (3, 3))]
    streams = [f"{s}_{p}" for s in ("small", "large") for p in ("axial", "coronal", "sagittal")]
    ok = True
    for stream in streams:
        got = []
        if stream.startswith("large"):
            # large-scale input is max-pooled 3x3 down to the small patch size first
            ok &= seg.node(f"{stream}_p0").spec.stride == (3, 3)
        for node in seg.nodes:
            if not node.name.startswith(stream + "_") or node.name.endswith("_p0"):
                continue
            if node.spec.kind == "conv2d":
                got.append((node.spec.filters, node.spec.kernel))
            elif node.spec.kind == "max_pool2d":
                got.append("pool")
        ok &= got == ladder
    ok &= seg.node("fuse").spec.units == 256 and seg.node("logits").spec.units == 2
    cae = build_cae_spec(512)
    ok &= cae.node("enc_conv").spec.filters == 16 and cae.node("enc_conv").spec.kernel == (5, 5)
    ok &= cae.node("code").spec.units == 512
    ok &= cae.node("dec_fc").spec.units == 10816
    ok &= cae.node("output").spec.filters == 1 and cae.node("output").spec.kernel == (5, 5)
    assert record(capsys, 3, ok, "six stream ladders and the autoencoder ladder")


def test_04_desk_segmentation(capsys, study):
    with open(os.path.join(study.detectable, "seg", "eval.csv")) as fh:
        rows = {r["id"]: r for r in csv.DictReader(fh)}
    manifest = pipeline.read_manifest(Workspace(study.detectable))
    held_out = [p["id"] for p in pipeline.patients(manifest, "classify")[:8]]
    refined = np.array([float(rows[i]["dice"]) for i in held_out])
    rough = np.array([float(rows[i]["rough_dice"]) for i in held_out])
    minutes = study.stage_seconds["seg-train"] / 60
    better = int((refined >= rough).sum())
    ok = refined.mean() >= 0.85 and better >= 6 and minutes <= 15
    assert record(capsys, 4, ok, f"mean Dice {refined.mean():.3f} (rough {rough.mean():.3f}), refined >= rough on "
                                 f"{better}/8, training {minutes:.1f} min")


def test_05_cae_learning(capsys, study):
    with open(os.path.join(study.detectable, "cae", "cae_d128_loss.csv")) as fh:
        val = [float(r["val_mse"]) for r in csv.DictReader(fh)]
    cfg = parse_config(STUDY_INI)
    model = pipeline.autoencoder(cfg).load(os.path.join(study.detectable, "cae", "cae_d128.myow"))
    untrained = model.untrained(seed=5)
    ws = Workspace(study.detectable)
    rec = pipeline.patients(pipeline.read_manifest(ws), "classify")[0]
    vol, mask = pipeline.load_patient(ws, rec)
    idx = sample_mask_voxels(mask, 1)
    idx = np.random.default_rng(0).choice(idx, 100, replace=False)
    vox = np.column_stack(np.unravel_index(idx, mask.shape))
    X = axial_patches(normalize_intensity(vol.voxels), vox, normalized=True)

    def err(m):
        return float(np.mean([(m.reconstruct(x) - x) ** 2 for x in X]))

    e_trained, e_untrained = err(model), err(untrained)
    ok = val[-1] <= 0.9 * val[0] and e_trained < e_untrained
    assert record(capsys, 5, ok, f"validation MSE {val[0]:.4f} -> {val[-1]:.4f}; held-out reconstruction "
                                 f"{e_trained:.4f} trained vs {e_untrained:.4f} untrained")


def test_06_clustering(capsys):
    rng = np.random.default_rng(6)
    worst, voronoi = 0.0, True
    for trial in range(10):
        mask = np.zeros((12, 12, 12), bool)
        mask.reshape(-1)[rng.choice(mask.size, int(rng.integers(40, 201)), replace=False)] = True
        a = cluster_voxels(mask, 4, seed=trial, spacing=(0.5, 0.5, 0.9))
        x = a.coordinates()
        best = KMeans(4, init="random", n_init=100, random_state=trial).fit(x).inertia_
        worst = max(worst, a.objective / best - 1.0)
        d = ((x[:, None, :] - a.centroids[None]) ** 2).sum(-1)
        voronoi &= bool(np.all(d[np.arange(len(x)), a.labels] <= d.min(axis=1) + 1e-12))
    ok = worst <= 0.05 and voronoi
    assert record(capsys, 6, ok, f"worst objective excess {100 * worst:.2f}% over best of 100 restarts, "
                                 f"Voronoi {'holds' if voronoi else 'violated'}")


def test_07_feature_oracle(capsys):
    rng = np.random.default_rng(7)
    worst, invariant = 0.0, True
    for _ in range(50):
        shape = (6, 6, 6)
        idx = np.sort(rng.choice(216, 20, replace=False)).astype(np.uint64)
        enc = EncodingMap(shape, idx, rng.normal(size=(20, 3)))
        labels = rng.integers(2, size=20)
        assign = ClusterAssignment(2, np.zeros((2, 3)), labels, idx, shape, (1.0, 1.0, 1.0))
        brute = np.zeros((2, 3))
        for c in range(2):
            for j in range(3):
                vals = [float(v) for v, lab in zip(enc.encodings[:, j], labels) if lab == c]
                if vals:
                    mu = sum(vals) / len(vals)
                    brute[c, j] = (sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5
        std = cluster_encoding_std(enc, assign)
        feats = aggregate_max_features(std).features
        worst = max(worst, np.abs(std - brute).max(), np.abs(feats - brute.max(axis=0)).max())
        p, q = rng.permutation(20), rng.permutation(20)
        enc_p = EncodingMap(shape, idx[p], enc.encodings[p])
        assign_q = ClusterAssignment(2, assign.centroids, labels[q], idx[q], shape, assign.spacing)
        invariant &= np.array_equal(aggregate_max_features(cluster_encoding_std(enc_p, assign_q)).features, feats)
    ok = worst < 1e-9 and invariant
    assert record(capsys, 7, ok, f"max deviation {worst:.1e}, permutation invariance "
                                 f"{'exact' if invariant else 'broken'}")


def test_08_svm(capsys):
    rng = np.random.default_rng(8)
    kkt, acc, flip = 0.0, 1.0, 0.0
    for trial in range(5):
        X = rng.normal(size=(60, 3))
        y = (X[:, 0] + 0.7 * rng.normal(size=60) > 0).astype(int)
        m = RbfSVC(C=2.0 ** trial, gamma=0.5).fit(X, y)
        kkt = max(kkt, m.kkt_residuals(X).max())
        flipped = RbfSVC(C=2.0 ** trial, gamma=0.5).fit(X, 1 - y)
        flip = max(flip, np.abs(m.decision_function(X) + flipped.decision_function(X)).max())
        B = np.vstack([rng.normal(0, 1, (20, 2)), rng.normal(6, 1, (20, 2))])
        yb = np.r_[np.zeros(20, int), np.ones(20, int)]
        acc = min(acc, float((RbfSVC(C=10.0, gamma=0.5).fit(B, yb).predict(B) == yb).mean()))
    ok = kkt <= 1e-3 and acc == 1.0 and flip <= 1e-6
    assert record(capsys, 8, ok, f"max KKT residual {kkt:.1e}, blob accuracy {acc:.2f}, label flip {flip:.1e}")


def test_09_auc_oracle(capsys):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(4, 40))
        s = rng.integers(0, 6, n).astype(float)  # heavy ties
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        pos, neg = s[y == 1], s[y == 0]
        ref = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
        mismatches += roc_curve_auc(s, y).auc != ref or auc_score(s, y) != ref
    assert record(capsys, 9, mismatches == 0, f"{100 - mismatches}/100 exact matches")


def test_10_discrimination(capsys, study):
    det, null = _roc(study.detectable), _roc(study.null)
    minutes = study.seconds / 60
    ok = det["auc"] >= 0.85 and 0.4 <= null["auc"] <= 0.6 and minutes <= 30
    assert record(capsys, 10, ok, f"detectable AUC {det['auc']:.3f} (sd {det['auc_std']:.3f}), null AUC "
                                  f"{null['auc']:.3f} (sd {null['auc_std']:.3f}), {minutes:.1f} min")


def test_11_sweeps(capsys, study):
    cfg = parse_config(STUDY_INI)
    run("sweep", cfg, study.detectable)
    run("report", cfg, study.detectable)
    with open(os.path.join(study.detectable, "sweep", "summary.json")) as fh:
        summary = json.load(fh)
    k_auc = dict(zip(summary["clusters"]["values"], summary["clusters"]["auc_mean"]))
    seeds = summary["seed"]
    with open(os.path.join(study.detectable, "report", "report.md")) as fh:
        text = fh.read()
    listed = f"min AUC: {seeds['auc_min']}" in text and f"max AUC: {seeds['auc_max']}" in text
    ok = k_auc["1"] < max(k_auc.values()) and len(seeds["values"]) == 4 and listed
    shown = ", ".join(f"k={k}: {v:.3f}" for k, v in k_auc.items())
    assert record(capsys, 11, ok, f"{shown}; seed AUC range [{seeds['auc_min']:.3f}, {seeds['auc_max']:.3f}]")


def test_12_reproducibility(capsys, tiny_config, tiny_workspace, tmp_path):
    codes = run_all(tiny_config, tmp_path)
    same = []
    for verb in VERBS:
        with open(os.path.join(tiny_workspace, f"run_{verb}.json")) as fh:
            a = json.load(fh)["outputs"]
        with open(tmp_path / f"run_{verb}.json") as fh:
            b = json.load(fh)["outputs"]
        same.append(a == b and len(a) > 0)
    ok = all(c == 0 for c in codes.values()) and all(same)
    assert record(capsys, 12, ok, f"{sum(same)}/{len(VERBS)} verbs byte-identical on rerun")


def test_13_hygiene(capsys, study, monkeypatch):
    ws = Workspace(study.detectable)
    manifest = pipeline.read_manifest(ws)
    split = {s: {p["id"] for p in pipeline.patients(manifest, s)} for s in pipeline.SPLITS}
    ok = study.loaded["seg-train"] <= split["seg_train"]
    ok &= study.loaded["cae-train"] <= split["cae_train"]
    ids, ffr, X = read_features(ws, "auto", 128, 0)
    ok &= set(ids) == split["classify"]
    try:
        check_hygiene(ws, ids[:5] + sorted(split["seg_train"])[:1])
        ok = False
    except DataError:
        pass

    # instrumented cross-validation on the real feature table
    rows = {tuple(r): i for i, r in zip(ids, X)}
    fitted = []
    original = RbfSVC.fit

    def spy(self, Xf, yf):
        fitted.append({rows[tuple(r)] for r in np.asarray(Xf)})
        return original(self, Xf, yf)

    monkeypatch.setattr(RbfSVC, "fit", spy)
    log = []
    y = (ffr <= 0.78).astype(int)
    cross_validate(X, y, folds=5, repeats=1, seed=0, C_grid=[1.0, 4.0], gamma_grid=[2.0 ** -7], inner_folds=3,
                   ids=np.array(ids), observer=lambda e, i: log.append((e, set(i))))
    held, outer_train, leaks = None, None, 0
    fit_iter = iter(fitted)
    for event, members in log:
        if event == "outer_test":
            held = members
        elif event == "outer_train":
            outer_train = members
        elif event in ("inner_train", "inner_val"):
            leaks += bool(members & held) or not members <= outer_train
        if event == "inner_train":
            for _ in range(2):  # one fit per grid cell
                leaks += bool(next(fit_iter) & held)
        elif event == "fit":
            leaks += bool(next(fit_iter) & held)
    ok &= leaks == 0 and next(fit_iter, None) is None
    assert record(capsys, 13, ok, f"{len(fitted)} SVM fits inspected, {leaks} leaks; training patients excluded")
