"""Pipeline stages behind the command-line verbs.

Every stage reads its inputs from, and writes its outputs to, one workspace
directory::

    phantoms/             pNNNN.myov, pNNNN.myom, phantoms.json
    seg/                  segmenter.myow, loss.csv, pred/*.myom, rough/*.myom, eval.csv
    cae/                  cae_d{d}.myow, cae_d{d}_loss.csv
    enc/d{d}/             pNNNN.myoe
    features/             features_k{k}_d{d}_s{seed}.csv
    classify/             roc_*.json, roc_*.svg, metrics.csv
    sweep/                sweep.csv, sweep_*.svg, summary.json
    report/               report.json, report.md
    run_<verb>.json       config hash, stage seeds, output checksums

Stages return a dict of metrics; the caller writes the run manifest.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autodiff import load_weights
from .autodiff.serialize import atomic_write
from .config import ExperimentConfig
from .encoder import ConvAutoencoder, axial_patches, encode_myocardium, load_encodings, save_encodings
from .errors import DataError, ParameterError
from .evaluation import cross_validate, operating_points, roc_svg
from .features import default_cluster_count, patient_features
from .phantom import PhantomParams, write_phantoms
from .segmentation import MultiscaleSegmenter, dice, mad
from .segmentation.patches import normalize_intensity
from .volume_io import load_mask, load_volume, save_mask

log = logging.getLogger(__name__)

SPLITS = ("seg_train", "cae_train", "classify")


@dataclass
class Workspace:
    root: str
    written: list = field(default_factory=list)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def write(self, rel, data):
        if isinstance(data, str):
            data = data.encode()
        full = self.path(rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        atomic_write(full, data)
        self.written.append(rel)

    def track(self, rel):
        self.written.append(rel)

    def checksums(self):
        out = {}
        for rel in sorted(set(self.written)):
            with open(self.path(rel), "rb") as fh:
                out[rel] = hashlib.sha256(fh.read()).hexdigest()
        return out


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def read_manifest(ws):
    try:
        with open(ws.path("phantoms", "phantoms.json"), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no phantom manifest at {exc.filename}; run phantom-gen first") from exc


def patients(manifest, *splits):
    return [p for p in manifest["patients"] if p["split"] in splits]


def load_patient(ws, rec):
    return load_volume(ws.path("phantoms", rec["volume"])), load_mask(ws.path("phantoms", rec["mask"]))


def phantom_params(cfg: ExperimentConfig):
    p = cfg["phantom"]
    return PhantomParams(dims=p["dims"], spacing=p["spacing"], lesion_probability=p["lesion_probability"],
                         contrast_delta=p["contrast_delta"], texture_ratio=p["texture_ratio"])


def segmenter(cfg: ExperimentConfig):
    s = cfg["segmentation"]
    return MultiscaleSegmenter(filters=s["filters"], units=s["units"], drop_rate=s["drop_rate"], epochs=s["epochs"],
                               minibatches_per_epoch=s["minibatches"], batch_size=s["batch_size"],
                               learning_rate=s["learning_rate"], momentum=s["momentum"],
                               near_distance=s["near_distance"], random_state=cfg.stage_seed("seg_train"))


def autoencoder(cfg: ExperimentConfig, d=None):
    c = cfg["cae"]
    return ConvAutoencoder(d=d or c["d"], epochs=c["epochs"], train_minibatches=c["train_minibatches"],
                           val_minibatches=c["val_minibatches"], batch_size=c["batch_size"],
                           learning_rate=c["learning_rate"], momentum=c["momentum"],
                           random_state=cfg.stage_seed("cae_train"))


def _load_segmenter(ws, cfg):
    path = ws.path("seg", "segmenter.myow")
    if not os.path.exists(path):
        raise DataError(f"missing segmentation weights {path}; run seg-train first")
    return segmenter(cfg).load(path)


def analysis_mask(ws, cfg, rec):
    """Mask used for CAE patches and encodings (predicted or reference)."""
    if cfg["cae"]["mask_source"] == "reference":
        return load_mask(ws.path("phantoms", rec["mask"]))
    path = ws.path("seg", "pred", f"{rec['id']}.myom")
    if not os.path.exists(path):
        raise DataError(f"missing predicted mask {path}; run seg-run first")
    return load_mask(path)


# -- stages -------------------------------------------------------------------
def phantom_gen(ws, cfg):
    p = cfg["phantom"]
    n = (p["n_seg_train"], p["n_cae_train"], p["n_classify"])
    seeds = cfg.substream("phantoms").generate_state(sum(n))
    splits = [s for s, count in zip(SPLITS, n) for _ in range(count)]
    manifest = write_phantoms(ws.path("phantoms"), seeds, phantom_params(cfg), splits, cutoff=cfg["cv"]["cutoff"])
    for rec in manifest["patients"]:
        ws.track(os.path.join("phantoms", rec["volume"]))
        ws.track(os.path.join("phantoms", rec["mask"]))
    ws.track(os.path.join("phantoms", "phantoms.json"))
    labels = [r["label"] for r in patients(manifest, "classify")]
    return {"n_phantoms": len(seeds), "classify_positive_fraction": float(np.mean(labels)),
            "splits": {s: c for s, c in zip(SPLITS, n)}}


def seg_train(ws, cfg):
    recs = patients(read_manifest(ws), "seg_train")
    data = [load_patient(ws, r) for r in recs]
    model = segmenter(cfg).fit([v for v, _ in data], [m for _, m in data])
    os.makedirs(ws.path("seg"), exist_ok=True)
    model.save(ws.path("seg", "segmenter.myow"))
    ws.track(os.path.join("seg", "segmenter.myow"))
    ws.write(os.path.join("seg", "loss.csv"),
             csv_text(["epoch", "loss"], [(i + 1, float(v)) for i, v in enumerate(model.loss_trace_)]))
    return {"train_ids": [r["id"] for r in recs], "final_loss": float(model.loss_trace_[-1])}


def seg_run(ws, cfg):
    model = _load_segmenter(ws, cfg)
    s = cfg["segmentation"]
    statuses = {}
    # segmentation-training patients never need a predicted mask
    for rec in patients(read_manifest(ws), "cae_train", "classify"):
        vol, _ = load_patient(ws, rec)
        result = model.segment(vol, stride=s["grid_stride"], max_iters=s["max_iters"])
        for kind, mask in (("pred", result.mask), ("rough", result.rough)):
            rel = os.path.join("seg", kind, f"{rec['id']}.myom")
            os.makedirs(ws.path("seg", kind), exist_ok=True)
            save_mask(ws.path(rel), mask)
            ws.track(rel)
        statuses[rec["id"]] = result.status
    return {"segmented": len(statuses), "status": statuses}


def seg_eval(ws, cfg):
    rows = []
    for rec in patients(read_manifest(ws), "cae_train", "classify"):
        path = ws.path("seg", "pred", f"{rec['id']}.myom")
        if not os.path.exists(path):
            raise DataError(f"missing predicted mask {path}; run seg-run first")
        vol, ref = load_patient(ws, rec)
        pred = load_mask(path)
        rough = load_mask(ws.path("seg", "rough", f"{rec['id']}.myom"))
        m = mad(pred, ref, vol.spacing) if pred.any() else float("nan")
        rows.append((rec["id"], dice(pred, ref), m, dice(rough, ref)))
    ws.write(os.path.join("seg", "eval.csv"), csv_text(["id", "dice", "mad_mm", "rough_dice"], rows))
    return {"mean_dice": float(np.mean([r[1] for r in rows])), "mean_mad_mm": float(np.nanmean([r[2] for r in rows])),
            "mean_rough_dice": float(np.mean([r[3] for r in rows]))}


def cae_patches(ws, cfg):
    chunks = []
    for rec in patients(read_manifest(ws), "cae_train"):
        vol, _ = load_patient(ws, rec)
        mask = analysis_mask(ws, cfg, rec)
        idx = np.flatnonzero(mask.reshape(-1))[::cfg["cae"]["patch_step"]]
        if not len(idx):
            raise DataError(f"patient {rec['id']} has an empty mask; no CAE patches")
        vox = np.column_stack(np.unravel_index(idx, mask.shape))
        chunks.append(axial_patches(normalize_intensity(vol.voxels), vox, normalized=True))
    return np.concatenate(chunks)


def cae_train(ws, cfg, d=None):
    d = d or cfg["cae"]["d"]
    X = cae_patches(ws, cfg)
    model = autoencoder(cfg, d).fit(X)
    rel = os.path.join("cae", f"cae_d{d}.myow")
    os.makedirs(ws.path("cae"), exist_ok=True)
    model.save(ws.path(rel))
    ws.track(rel)
    ws.write(os.path.join("cae", f"cae_d{d}_loss.csv"),
             csv_text(["epoch", "train_mse", "val_mse"],
                      [(i + 1, float(a), float(b)) for i, (a, b) in enumerate(zip(model.train_loss_, model.val_loss_))]))
    return {"d": d, "n_patches": int(len(X)), "first_val_mse": float(model.val_loss_[0]),
            "final_val_mse": float(model.val_loss_[-1])}


def _load_cae(ws, cfg, d):
    path = ws.path("cae", f"cae_d{d}.myow")
    if not os.path.exists(path):
        raise DataError(f"missing CAE weights {path}; run cae-train first")
    state = load_weights(path)
    stored = state["code.bias"].shape[0] if "code.bias" in state else None
    if stored != d:
        raise DataError(f"CAE weights in {path} have d={stored}, config asks for d={d}")
    return autoencoder(cfg, d).load(path)


def encode(ws, cfg, d=None):
    d = d or cfg["cae"]["d"]
    model = _load_cae(ws, cfg, d)
    counts = {}
    for rec in patients(read_manifest(ws), "classify"):
        vol, _ = load_patient(ws, rec)
        mask = analysis_mask(ws, cfg, rec)
        try:
            emap = encode_myocardium(model, vol, mask, step=cfg["cae"]["encode_step"])
        except ParameterError as exc:
            raise DataError(f"patient {rec['id']}: {exc}") from exc
        rel = os.path.join("enc", f"d{d}", f"{rec['id']}.myoe")
        os.makedirs(ws.path("enc", f"d{d}"), exist_ok=True)
        save_encodings(ws.path(rel), emap)
        ws.track(rel)
        counts[rec["id"]] = int(len(emap.indices))
    return {"d": d, "encoded_voxels": counts}


def feature_name(k, d, seed):
    return f"features_k{k}_d{d}_s{seed}.csv"


def compute_features(ws, cfg, k=None, d=None, seed=None):
    """Per-patient feature rows ``(id, ffr, features)`` for one (k, d, seed) cell."""
    k = cfg["clustering"]["k"] if k is None else k
    d = d or cfg["cae"]["d"]
    seed = cfg["clustering"]["seed"] if seed is None else seed
    manifest = read_manifest(ws)
    rows = []
    for rec in patients(manifest, "classify"):
        path = ws.path("enc", f"d{d}", f"{rec['id']}.myoe")
        if not os.path.exists(path):
            raise DataError(f"missing encodings {path}; run encode first")
        shape = tuple(manifest["params"]["dims"])
        emap = load_encodings(path, shape)
        if emap.d != d:
            raise DataError(f"{path} holds d={emap.d} encodings, expected d={d}")
        kk = default_cluster_count(len(emap.indices)) if k == "auto" else k
        if kk > len(emap.indices):
            raise ParameterError(f"k={kk} exceeds the {len(emap.indices)} encoded voxels of {rec['id']}")
        feats = patient_features(emap, manifest["params"]["spacing"], kk, seed)
        rows.append((rec["id"], float(rec["ffr"]), feats.features))
    return rows


def write_features(ws, rows, k, d, seed):
    d_out = len(rows[0][2])
    header = ["id", "ffr"] + [f"f_{j + 1}" for j in range(d_out)]
    rel = os.path.join("features", feature_name(k, d, seed))
    ws.write(rel, csv_text(header, [[pid, ffr] + [float(v) for v in f] for pid, ffr, f in rows]))
    return rel


def read_features(ws, k, d, seed):
    path = ws.path("features", feature_name(k, d, seed))
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            table = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"missing feature table {path}; run features first") from exc
    body = table[1:]
    return ([r[0] for r in body], np.array([float(r[1]) for r in body]),
            np.array([[float(v) for v in r[2:]] for r in body]))


def features(ws, cfg):
    k, d, seed = cfg["clustering"]["k"], cfg["cae"]["d"], cfg["clustering"]["seed"]
    try:
        rows = compute_features(ws, cfg, k, d, seed)
    except ParameterError as exc:
        raise DataError(str(exc)) from exc
    write_features(ws, rows, k, d, seed)
    return {"k": k, "d": d, "seed": seed, "patients": len(rows)}


def check_hygiene(ws, ids):
    """Refuse classification records that were used to train a network."""
    train = {p["id"] for p in patients(read_manifest(ws), "seg_train", "cae_train")}
    leaked = sorted(set(ids) & train)
    if leaked:
        raise DataError(f"training patients in a classification table: {leaked}")


def classify_cell(ws, cfg, ids, ffr, X, cutoff):
    check_hygiene(ws, ids)
    y = (ffr <= cutoff).astype(int)
    if y.min() == y.max() or np.bincount(y, minlength=2).min() < 2:
        return None
    cv = cfg["cv"]
    return cross_validate(X, y, folds=cv["folds"], repeats=cv["repeats"], seed=cfg.stage_seed("cv"),
                          C_grid=cfg.c_grid(), gamma_grid=cfg.gamma_grid(), inner_folds=cfg["svm"]["inner_folds"],
                          mode=cv["mode"], ids=np.array(ids), tol=cfg["svm"]["tol"])


def classify(ws, cfg):
    k, d, seed, cutoff = cfg["clustering"]["k"], cfg["cae"]["d"], cfg["clustering"]["seed"], cfg["cv"]["cutoff"]
    ids, ffr, X = read_features(ws, k, d, seed)
    name = f"k{k}_d{d}_s{seed}_c{cutoff:.2f}"
    res = classify_cell(ws, cfg, ids, ffr, X, cutoff)
    if res is None:
        ws.write(os.path.join("classify", f"roc_{name}.json"),
                 json.dumps({"skipped": "single class at this cut-off", "ids": ids}, indent=2, sort_keys=True))
        return {"cell": name, "skipped": True}
    ops = operating_points(res, cfg["cv"]["sensitivities"])
    payload = res.to_dict()
    payload.update({"ids": ids, "labels": [int(v) for v in (ffr <= cutoff)], "operating_points": ops,
                    "cell": {"k": k, "d": d, "seed": seed, "cutoff": cutoff}})
    ws.write(os.path.join("classify", f"roc_{name}.json"), json.dumps(payload, indent=2, sort_keys=True))
    ws.write(os.path.join("classify", f"roc_{name}.svg"), roc_svg(res, title=f"k={k} d={d}"))
    header = ["k", "d", "seed", "cutoff", "auc_mean", "auc_std"] + [f"spec_at_sens_{o['sensitivity']:.2f}" for o in ops]
    ws.write(os.path.join("classify", "metrics.csv"),
             csv_text(header, [[str(k), d, seed, cutoff, res.auc, res.auc_std] + [o["specificity"] for o in ops]]))
    return {"cell": name, "auc_mean": res.auc, "auc_std": res.auc_std, "operating_points": ops}


def _sweep_svg(title, labels, means, stds):
    w, h, m = 420, 300, 45
    n = max(len(labels), 1)
    xs = [m + (i + 0.5) * (w - 2 * m) / n for i in range(len(labels))]

    def ys(v):
        return m + (1.0 - v) * (h - 2 * m)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>',
             f'<text x="{w / 2}" y="{m / 2}" text-anchor="middle" font-size="14">{title}</text>']
    for x, lab, mu, sd in zip(xs, labels, means, stds):
        if mu is None:
            parts.append(f'<text x="{x:.1f}" y="{h - m + 16}" text-anchor="middle" font-size="11">{lab} (skipped)</text>')
            continue
        parts.append(f'<line x1="{x:.1f}" y1="{ys(min(1, mu + sd)):.1f}" x2="{x:.1f}" y2="{ys(max(0, mu - sd)):.1f}" '
                     'stroke="steelblue"/>')
        parts.append(f'<circle cx="{x:.1f}" cy="{ys(mu):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{x:.1f}" y="{h - m + 16}" text-anchor="middle" font-size="11">{lab}</text>')
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{m - 6}" y="{ys(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def sweep(ws, cfg):
    base_k, base_d = cfg["clustering"]["k"], cfg["cae"]["d"]
    base_s, base_c = cfg["clustering"]["seed"], cfg["cv"]["cutoff"]
    sw = cfg["sweep"]
    cache = {}

    def table(k, d, seed):
        key = (k, d, seed)
        if key not in cache:
            if d != base_d and not os.path.exists(ws.path("enc", f"d{d}")):
                if not os.path.exists(ws.path("cae", f"cae_d{d}.myow")):
                    cae_train(ws, cfg, d)
                encode(ws, cfg, d)
            try:
                rows = compute_features(ws, cfg, k, d, seed)
            except ParameterError as exc:
                cache[key] = str(exc)
            else:
                cache[key] = ([r[0] for r in rows], np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
        return cache[key]

    axes = [("clusters", "k", [(k, base_d, base_s, base_c) for k in sw["k_values"]]),
            ("encodings", "d", [(base_k, d, base_s, base_c) for d in sw["d_values"]]),
            ("seed", "seed", [(base_k, base_d, s, base_c) for s in sw["cluster_seeds"]]),
            ("cutoff", "cutoff", [(base_k, base_d, base_s, c) for c in sw["cutoffs"]])]
    rows, summary = [], {}
    for axis, param, cells in axes:
        if not cells:
            continue
        labels, means, stds = [], [], []
        for k, d, seed, cutoff in cells:
            value = {"k": k, "d": d, "seed": seed, "cutoff": cutoff}[param]
            t = table(k, d, seed)
            res = None if isinstance(t, str) else classify_cell(ws, cfg, *t, cutoff)
            status = t if isinstance(t, str) else ("ok" if res is not None else "single class")
            auc, sd = (res.auc, res.auc_std) if res is not None else (None, None)
            rows.append([axis, str(k), d, seed, cutoff, "" if auc is None else auc, "" if sd is None else sd,
                         "ok" if status == "ok" else "skipped: " + status])
            labels.append(str(value))
            means.append(auc)
            stds.append(sd or 0.0)
        done = [m for m in means if m is not None]
        summary[axis] = {"values": labels, "auc_mean": means,
                         "auc_min": min(done) if done else None, "auc_max": max(done) if done else None}
        ws.write(os.path.join("sweep", f"sweep_{axis}.svg"), _sweep_svg(f"AUC vs {param}", labels, means, stds))
    ws.write(os.path.join("sweep", "sweep.csv"),
             csv_text(["axis", "k", "d", "seed", "cutoff", "auc_mean", "auc_std", "status"], rows))
    ws.write(os.path.join("sweep", "summary.json"), json.dumps(summary, indent=2, sort_keys=True))
    return summary


def report(ws, cfg):
    runs = {}
    for name in sorted(os.listdir(ws.root)):
        if name.startswith("run_") and name.endswith(".json") and name != "run_report.json":
            with open(ws.path(name), encoding="utf-8") as fh:
                runs[name[4:-5]] = json.load(fh)
    if not runs:
        raise DataError(f"no run manifests in {ws.root}")
    body = {"config_hash": cfg.hash(), "version": __version__,
            "stages": {verb: r.get("metrics", {}) for verb, r in runs.items()},
            "stage_config_hashes": {verb: r.get("config_hash") for verb, r in runs.items()}}
    lines = ["# Experiment report", "", f"Config hash: `{cfg.hash()}`", ""]
    for verb, r in body["stages"].items():
        lines.append(f"## {verb}")
        lines.append("")
        for key, val in sorted(r.items()):
            if isinstance(val, (dict, list)) and len(json.dumps(val)) > 200:
                continue
            lines.append(f"- {key}: {json.dumps(val, sort_keys=True)}")
        lines.append("")
    sweep_summary = runs.get("sweep", {}).get("metrics", {})
    if "seed" in sweep_summary:
        s = sweep_summary["seed"]
        lines += ["## Clustering-seed AUC range", "", f"- min AUC: {s['auc_min']}", f"- max AUC: {s['auc_max']}", ""]
        body["seed_auc_range"] = [s["auc_min"], s["auc_max"]]
    ws.write(os.path.join("report", "report.json"), json.dumps(body, indent=2, sort_keys=True))
    ws.write(os.path.join("report", "report.md"), "\n".join(lines) + "\n")
    return {"stages": sorted(runs)}


STAGES = {
    "phantom-gen": phantom_gen,
    "seg-train": seg_train,
    "seg-run": seg_run,
    "seg-eval": seg_eval,
    "cae-train": cae_train,
    "encode": encode,
    "features": features,
    "classify": classify,
    "sweep": sweep,
    "report": report,
}
