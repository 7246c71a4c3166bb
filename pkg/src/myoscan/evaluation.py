"""ROC analysis, operating points and repeated stratified cross-validation."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold

from .classifier import C_GRID, GAMMA_GRID, RbfSVC, grid_search, to_signed
from .errors import ParameterError

log = logging.getLogger(__name__)

FPR_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class RocResult:
    """ROC curve(s) plus AUC summary.

    ``sensitivity`` and ``specificity`` run from the strictest threshold to
    the most lenient. For a single curve ``thresholds`` lists the score cut
    (predict positive when ``score >= threshold``); for cross-validation the
    curve is the mean over repeats sampled on a fixed false-positive grid and
    ``thresholds`` is ``None``.
    """

    sensitivity: np.ndarray
    specificity: np.ndarray
    auc: float
    thresholds: np.ndarray = None
    aucs: list = field(default_factory=list)
    auc_std: float = 0.0
    sensitivity_std: np.ndarray = None
    hyperparameters: list = field(default_factory=list)
    repeat_scores: list = field(default_factory=list)

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        if out["thresholds"] is not None:
            out["thresholds"] = [t if np.isfinite(t) else None for t in out["thresholds"]]
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _labels01(labels):
    y = (to_signed(labels) > 0)
    if y.all() or not y.any():
        raise ParameterError("ROC analysis needs both classes")
    return y


def auc_score(scores, labels):
    """Mann-Whitney concordance: P(score_pos > score_neg) + 0.5 P(tie)."""
    y = _labels01(labels)
    r = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve_auc(scores, labels) -> RocResult:
    y = _labels01(labels)
    scores = np.asarray(scores, dtype=np.float64)
    thr = np.unique(scores)[::-1]
    pos = np.array([(scores[y] >= t).sum() for t in thr], dtype=np.float64)
    neg = np.array([(scores[~y] >= t).sum() for t in thr], dtype=np.float64)
    sens = np.concatenate([[0.0], pos / y.sum()])
    spec = np.concatenate([[1.0], 1.0 - neg / (~y).sum()])
    auc = auc_score(scores, y)
    return RocResult(sens, spec, auc, np.concatenate([[np.inf], thr]), [auc])


def operating_points(roc: RocResult, sensitivities=(0.60, 0.70, 0.80)):
    """Specificity at the first (strictest) threshold reaching each sensitivity.

    Returns a list of dicts with ``sensitivity``, ``specificity`` and
    ``reachable``; unreachable targets report specificity 0.
    """
    out = []
    sens = np.asarray(roc.sensitivity)
    spec = np.asarray(roc.specificity)
    for target in sensitivities:
        hit = np.flatnonzero(sens >= target - 1e-12)
        if len(hit):
            out.append({"sensitivity": float(target), "specificity": float(spec[hit[0]]), "reachable": True})
        else:
            out.append({"sensitivity": float(target), "specificity": 0.0, "reachable": False})
    return out


def mean_roc(curves, grid=FPR_GRID):
    """Mean and std of sensitivity over ``curves`` interpolated at ``grid`` FPR."""
    tprs = []
    for c in curves:
        fpr = 1.0 - np.asarray(c.specificity)
        tpr = np.asarray(c.sensitivity)
        # step curve: take the best sensitivity reached at or below each FPR
        idx = np.searchsorted(fpr, grid, side="right") - 1
        tprs.append(np.maximum.accumulate(tpr)[np.clip(idx, 0, None)])
    tprs = np.array(tprs)
    return tprs.mean(axis=0), tprs.std(axis=0)


def _stratified_splits(y, folds, rng, max_reshuffles=20):
    for attempt in range(max_reshuffles + 1):
        skf = StratifiedKFold(folds, shuffle=True, random_state=int(rng.integers(2**31 - 1)))
        splits = list(skf.split(np.zeros(len(y)), y))
        if all(len(np.unique(y[tr])) == 2 for tr, _ in splits):
            return splits
        warnings.warn("a training fold lacks a class; reshuffling folds", RuntimeWarning, stacklevel=3)
    raise ParameterError("could not build folds with both classes in every training fold")


def cross_validate(X, labels, folds=10, repeats=50, seed=None, C_grid=C_GRID, gamma_grid=GAMMA_GRID,
                   inner_folds=5, mode="pooled", ids=None, observer=None, tol=1e-3):
    """Repeated stratified k-fold evaluation with nested grid search.

    ``mode="pooled"`` pools out-of-fold decision values into one ROC per
    repeat; ``mode="average"`` averages per-fold AUCs (folds whose test part
    holds one class are skipped). ``observer(event, ids)`` sees
    ``"outer_train"``, ``"outer_test"``, ``"fit"`` and the grid-search
    events, each with the record ids involved.
    """
    if mode not in ("pooled", "average"):
        raise ParameterError(f"unknown mode {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    y = (to_signed(labels) > 0).astype(int)
    _labels01(y)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    rng = np.random.default_rng(seed)
    folds = min(folds, int(np.bincount(y).min()))
    if folds < 2:
        raise ParameterError("each class needs at least two records")
    curves, aucs, chosen, all_scores = [], [], [], []
    for rep in range(repeats):
        splits = _stratified_splits(y, folds, rng)
        scores = np.empty(len(X))
        fold_aucs = []
        for tr, te in splits:
            if observer is not None:
                observer("outer_train", ids[tr])
                observer("outer_test", ids[te])
            C, g, _ = grid_search(X[tr], y[tr], C_grid, gamma_grid, inner_folds,
                                  seed=int(rng.integers(2**31 - 1)), ids=ids[tr], observer=observer, tol=tol)
            chosen.append((C, g))
            if observer is not None:
                observer("fit", ids[tr])
            model = RbfSVC(C=C, gamma=g, tol=tol).fit(X[tr], y[tr])
            scores[te] = model.decision_function(X[te])
            if mode == "average" and len(np.unique(y[te])) == 2:
                fold_aucs.append(auc_score(scores[te], y[te]))
        curve = roc_curve_auc(scores, y)
        curves.append(curve)
        all_scores.append(scores.tolist())
        aucs.append(curve.auc if mode == "pooled" else float(np.mean(fold_aucs)))
        log.info("repeat %d auc %.4f", rep, aucs[-1])
    mean_tpr, std_tpr = mean_roc(curves)
    return RocResult(mean_tpr, 1.0 - FPR_GRID, float(np.mean(aucs)), None, [float(a) for a in aucs],
                     float(np.std(aucs)), std_tpr, [list(c) for c in chosen], all_scores)


def roc_svg(result: RocResult, title="ROC", size=360):
    """Standalone SVG of the (mean) ROC curve, with the std band when present."""
    m = 40
    w = size - 2 * m

    def pt(fpr, tpr):
        return f"{m + fpr * w:.2f},{m + (1 - tpr) * w:.2f}"

    fpr = 1.0 - np.asarray(result.specificity)
    tpr = np.asarray(result.sensitivity)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="black"/>',
             f'<line x1="{m}" y1="{m + w}" x2="{m + w}" y2="{m}" stroke="grey" stroke-dasharray="4"/>']
    if result.sensitivity_std is not None:
        hi = np.clip(tpr + result.sensitivity_std, 0, 1)
        lo = np.clip(tpr - result.sensitivity_std, 0, 1)
        band = [pt(f, t) for f, t in zip(fpr, hi)] + [pt(f, t) for f, t in zip(fpr[::-1], lo[::-1])]
        parts.append(f'<polygon points="{" ".join(band)}" fill="steelblue" fill-opacity="0.25" stroke="none"/>')
    parts.append(f'<polyline points="{" ".join(pt(f, t) for f, t in zip(fpr, tpr))}" '
                 'fill="none" stroke="steelblue" stroke-width="2"/>')
    parts.append(f'<text x="{size / 2}" y="{m / 2}" text-anchor="middle" font-size="14">'
                 f'{title} (AUC {result.auc:.3f} &#177; {result.auc_std:.3f})</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">1 - specificity</text>')
    parts.append(f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})" '
                 'text-anchor="middle">sensitivity</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


__all__ = [
    "FPR_GRID",
    "RocResult",
    "auc_score",
    "cross_validate",
    "mean_roc",
    "operating_points",
    "roc_curve_auc",
    "roc_svg",
]
