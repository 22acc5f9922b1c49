"""Keypoint evaluation: PCK, PCKh, OKS / OKS-AP, and occlusion subsets.

Conventions (fixed here, configurable where noted):
  * a joint counts as correct when distance / normalizer <= threshold
    (boundary inclusive);
  * invisible joints (v = 0) are excluded from both numerator and
    denominator unless ``include_invisible`` is set;
  * PCK normalizes by a caller-supplied per-sample length (person bounding
    box max side by default elsewhere in this package); PCKh normalizes by
    the per-sample head segment length with threshold 0.5;
  * OKS for a sample is sum(v_n * exp(-d_n^2 / (2 s^2 k_n^2))) / sum(v_n),
    0 when nothing is visible; AP averages the pass rate over the ten
    thresholds 0.50, 0.55, ..., 0.95;
  * per-joint rates for joints with an empty denominator are NaN and are
    dropped from the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalResult",
    "pck",
    "pckh",
    "pck_curve",
    "oks",
    "oks_ap",
    "ap_from_oks",
    "occlusion_report",
    "default_joint_k",
    "grouped_row",
    "write_report_csv",
    "write_report_json",
    "OKS_AP_THRESHOLDS",
    "GROUP_COLUMNS",
]

OKS_AP_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))

GROUP_COLUMNS = ("Head", "Sho", "Elb", "Wri", "Hip", "Kne", "Ank", "Mean")

# Name fragments mapping joints to the report's grouped columns.
_GROUP_PATTERNS = {
    "Head": ("head", "neck"),
    "Sho": ("shoulder",),
    "Elb": ("elbow",),
    "Wri": ("wrist",),
    "Hip": ("hip",),
    "Kne": ("knee",),
    "Ank": ("ankle",),
}

# COCO keypoint similarity constants by joint category; used to build
# default per-joint k vectors for named skeletons.
_CATEGORY_K = {
    "ankle": 0.089,
    "knee": 0.087,
    "hip": 0.107,
    "pelvis": 0.107,
    "wrist": 0.062,
    "elbow": 0.072,
    "shoulder": 0.079,
    "thorax": 0.079,
    "neck": 0.035,
    "head": 0.035,
}
_DEFAULT_K = 0.08


@dataclass
class EvalResult:
    """Per-joint correctness rates plus their mean for one evaluation pass."""

    per_joint: np.ndarray          # NaN where a joint had no scored instances
    mean: float
    n_samples: int
    threshold: float
    subset: str = ""
    curve: dict = field(default_factory=dict)   # threshold -> mean rate

    def as_dict(self) -> dict:
        return {
            "per_joint": [None if np.isnan(r) else float(r) for r in self.per_joint],
            "mean": None if np.isnan(self.mean) else float(self.mean),
            "n_samples": int(self.n_samples),
            "threshold": float(self.threshold),
            "subset": self.subset,
            "curve": {str(k): float(v) for k, v in self.curve.items()},
        }


def _validate_inputs(preds, gts, vis):
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    vis = np.asarray(vis)
    if preds.shape != gts.shape or preds.ndim != 3 or preds.shape[-1] != 2:
        raise ValueError(f"expected (M,N,2) coordinate arrays, got {preds.shape} and {gts.shape}")
    if vis.shape != preds.shape[:2]:
        raise ValueError(f"visibility shape {vis.shape} does not match {preds.shape[:2]}")
    return preds, gts, vis


def _rates(correct: np.ndarray, counted: np.ndarray):
    num = (correct & counted).sum(axis=0).astype(np.float64)
    den = counted.sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore"):
        per_joint = np.where(den > 0, num / np.maximum(den, 1), np.nan)
    mean = float(np.nanmean(per_joint)) if np.any(den > 0) else float("nan")
    return per_joint, mean


def pck(
    preds,
    gts,
    vis,
    normalizers,
    threshold: float = 0.2,
    include_invisible: bool = False,
    subset: str = "",
) -> EvalResult:
    """Percentage of correct keypoints under a per-sample length normalizer."""
    preds, gts, vis = _validate_inputs(preds, gts, vis)
    normalizers = np.asarray(normalizers, dtype=np.float64)
    if normalizers.shape != (preds.shape[0],):
        raise ValueError(f"normalizers shape {normalizers.shape} != ({preds.shape[0]},)")
    if np.any(normalizers <= 0):
        raise ValueError("normalizers must be strictly positive")
    if threshold <= 0:
        raise ValueError("threshold must be strictly positive")
    dist = np.linalg.norm(preds - gts, axis=2) / normalizers[:, None]
    correct = dist <= threshold
    counted = np.ones_like(correct, dtype=bool) if include_invisible else (vis != 0)
    per_joint, mean_rate = _rates(correct, counted)
    return EvalResult(per_joint, mean_rate, preds.shape[0], threshold, subset)


def pckh(
    preds,
    gts,
    vis,
    head_sizes,
    threshold: float = 0.5,
    include_invisible: bool = False,
    subset: str = "",
) -> EvalResult:
    """PCK with the per-sample head segment length as the normalizer."""
    return pck(preds, gts, vis, head_sizes, threshold, include_invisible, subset)


def pck_curve(preds, gts, vis, normalizers, thresholds, include_invisible: bool = False) -> dict:
    """Mean PCK at each threshold (monotone non-decreasing)."""
    return {
        float(t): pck(preds, gts, vis, normalizers, float(t), include_invisible).mean
        for t in thresholds
    }


def oks(pred, gt, vis, scale: float, per_joint_k) -> float:
    """Object keypoint similarity for one pose pair, in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(vis)
    if scale <= 0:
        raise ValueError("oks: scale must be strictly positive")
    k = np.broadcast_to(np.asarray(per_joint_k, dtype=np.float64), (pred.shape[0],))
    if np.any(k <= 0):
        raise ValueError("oks: per-joint k must be strictly positive")
    n_vis = float((vis != 0).sum())
    if n_vis == 0:
        return 0.0
    d2 = np.sum((pred - gt) ** 2, axis=1)
    sim = np.exp(-d2 / (2.0 * scale**2 * k**2))
    return float(np.sum(sim * (vis != 0)) / n_vis)


def ap_from_oks(values, thresholds=OKS_AP_THRESHOLDS) -> float:
    """Average over thresholds of the fraction of samples with OKS >= t."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean([(values >= t).mean() for t in thresholds]))


def oks_ap(preds, gts, vis, scales, per_joint_k, thresholds=OKS_AP_THRESHOLDS) -> float:
    """Single-person OKS-based average precision (one prediction per pose)."""
    preds, gts, vis = _validate_inputs(preds, gts, vis)
    scales = np.asarray(scales, dtype=np.float64)
    values = [oks(preds[i], gts[i], vis[i], scales[i], per_joint_k) for i in range(preds.shape[0])]
    return ap_from_oks(values, thresholds)


def occlusion_report(
    preds,
    gts,
    vis,
    head_sizes,
    min_invisible: int,
    threshold: float = 0.5,
    include_invisible: bool = True,
) -> EvalResult:
    """PCKh restricted to samples with at least ``min_invisible`` hidden joints.

    By default occluded joints themselves are scored (their annotated
    coordinates are retained by the data pipeline), since the subset exists
    to measure how well hidden joints are inferred; pass
    ``include_invisible=False`` for the visible-only convention.
    """
    preds, gts, vis = _validate_inputs(preds, gts, vis)
    head_sizes = np.asarray(head_sizes, dtype=np.float64)
    invisible_counts = (vis == 0).sum(axis=1)
    keep = invisible_counts >= min_invisible
    label = f">={min_invisible} invisible"
    if not np.any(keep):
        return EvalResult(np.full(preds.shape[1], np.nan), float("nan"), 0, threshold, label)
    return pckh(
        preds[keep], gts[keep], vis[keep], head_sizes[keep],
        threshold, include_invisible, subset=label,
    )


def default_joint_k(names) -> np.ndarray:
    """Per-joint OKS constants chosen by joint-name category."""
    out = []
    for name in names:
        k = _DEFAULT_K
        for cat, val in _CATEGORY_K.items():
            if cat in name:
                k = val
                break
        out.append(k)
    return np.asarray(out)


def grouped_row(result: EvalResult, names) -> dict:
    """Collapse per-joint rates into the report's grouped columns."""
    row = {}
    for col, patterns in _GROUP_PATTERNS.items():
        idx = [i for i, n in enumerate(names) if any(p in n for p in patterns)]
        vals = result.per_joint[idx] if idx else np.array([np.nan])
        with np.errstate(invalid="ignore"):
            row[col] = float(np.nanmean(vals)) if idx and not np.all(np.isnan(vals)) else float("nan")
    row["Mean"] = result.mean
    return row


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.4f}"


def write_report_csv(path, rows: dict, names) -> None:
    """Rows of grouped metrics as CSV: metric name + the grouped columns."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("Metric," + ",".join(GROUP_COLUMNS) + ",Samples\n")
        for label, result in rows.items():
            grouped = grouped_row(result, names)
            cells = [_fmt(grouped[c]) for c in GROUP_COLUMNS]
            fh.write(f"{label}," + ",".join(cells) + f",{result.n_samples}\n")


def write_report_json(path, rows: dict, names, extra: dict | None = None) -> None:
    payload = {
        "joint_names": list(names),
        "metrics": {label: result.as_dict() for label, result in rows.items()},
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
