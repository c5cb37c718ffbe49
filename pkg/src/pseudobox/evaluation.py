"""IoU-based average precision per class and range bin."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .geometry import Box3D, bev_iou_boxes, iou3d

DEFAULT_BINS = ((0.0, 30.0), (30.0, 50.0), (50.0, 80.0))
IOU_MODES = ("bev", "3d")
INTERPOLATIONS = ("all", "11", "40")


def box_range(box: Box3D) -> float:
    return math.hypot(box.center[0], box.center[1])


def bin_label(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}"


def validate_bins(bins) -> tuple:
    bins = tuple((float(lo), float(hi)) for lo, hi in bins)
    if not bins:
        raise ConfigurationError("at least one range bin is required")
    if bins[0][0] != 0.0:
        raise ConfigurationError("range bins must start at 0")
    for (lo, hi), nxt in zip(bins, bins[1:] + (None,)):
        if not hi > lo:
            raise ConfigurationError(f"empty range bin {lo}-{hi}")
        if nxt is not None and nxt[0] != hi:
            raise ConfigurationError("range bins must be contiguous")
    return bins


def pair_iou(a: Box3D, b: Box3D, mode: str) -> float:
    return bev_iou_boxes(a, b) if mode == "bev" else iou3d(a, b)


def score_order(preds: Sequence[Box3D]) -> list[int]:
    """Indices by descending score; equal scores keep input order."""
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def greedy_match(preds: Sequence[Box3D], truths: Sequence[Box3D], iou_thresh: float, mode: str = "bev"):
    """Score-ordered one-to-one matching.

    Returns ``(order, hits)``: prediction indices in score order and, for each,
    the matched truth index or None. Each prediction takes the unmatched truth
    with the highest IoU at or above the threshold; ties go to the lower index.
    """
    order = score_order(preds)
    taken = np.zeros(len(truths), dtype=bool)
    hits: list[Optional[int]] = []
    for i in order:
        best, best_j = -1.0, None
        for j, t in enumerate(truths):
            if taken[j]:
                continue
            iou = pair_iou(preds[i], t, mode)
            if iou >= iou_thresh and iou > best:
                best, best_j = iou, j
        if best_j is not None:
            taken[best_j] = True
        hits.append(best_j)
    return order, hits


def pr_curve(hits: Sequence[bool], n_truth: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(hits, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(hits, dtype=np.float64))
    recall = tp / n_truth if n_truth else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-300)
    return recall, precision


def average_precision(recall: np.ndarray, precision: np.ndarray, interpolation: str = "all") -> float:
    """Area under the interpolated precision-recall curve."""
    if interpolation not in INTERPOLATIONS:
        raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}")
    if len(recall) == 0:
        return 0.0
    if interpolation == "all":
        r = np.concatenate([[0.0], recall, [1.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        # precision envelope: best precision at any recall >= r
        p = np.maximum.accumulate(p[::-1])[::-1]
        steps = np.flatnonzero(r[1:] != r[:-1])
        return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))
    n = int(interpolation)
    levels = np.linspace(0.0, 1.0, 11) if n == 11 else np.linspace(1.0 / 40, 1.0, 40)
    total = 0.0
    for level in levels:
        ok = recall >= level
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / len(levels)


@dataclass(frozen=True)
class BinResult:
    ap: Optional[float]      # None when the bin has no ground truth
    tp: int
    fp: int
    fn: int
    n_truth: int

    def as_dict(self) -> dict:
        return {"ap": self.ap, "tp": self.tp, "fp": self.fp, "fn": self.fn, "n_truth": self.n_truth}


@dataclass
class EvalReport:
    iou_thresh: float
    mode: str
    bins: tuple
    results: dict = field(default_factory=dict)    # (class_id, bin label) -> BinResult

    @property
    def classes(self) -> list[int]:
        return sorted({c for c, _ in self.results})

    @property
    def labels(self) -> list[str]:
        return [bin_label(lo, hi) for lo, hi in self.bins] + [self.overall_label]

    @property
    def overall_label(self) -> str:
        return bin_label(0.0, self.bins[-1][1])

    def ap(self, class_id: int, label: Optional[str] = None) -> Optional[float]:
        return self.results[(class_id, label or self.overall_label)].ap

    def mean_ap(self, label: Optional[str] = None) -> Optional[float]:
        """Mean over classes that have ground truth in the bin."""
        label = label or self.overall_label
        vals = [r.ap for (c, lab), r in self.results.items() if lab == label and r.ap is not None]
        return float(np.mean(vals)) if vals else None

    def as_dict(self) -> dict:
        return {
            "iou_thresh": self.iou_thresh,
            "mode": self.mode,
            "bins": [list(b) for b in self.bins],
            "mAP": {lab: self.mean_ap(lab) for lab in self.labels},
            "classes": {str(c): {lab: self.results[(c, lab)].as_dict() for lab in self.labels}
                        for c in self.classes},
        }


def evaluate_ap(preds: Sequence[Box3D], truths: Sequence[Box3D], iou_thresh: float = 0.25,
                bins=DEFAULT_BINS, mode: str = "bev", interpolation: str = "all",
                classes: Optional[Sequence[int]] = None) -> EvalReport:
    """Per-class AP in every range bin plus the full range.

    Truth and prediction boxes are each assigned to a bin by their own BEV
    range from the ego origin; matching happens inside a bin. Boxes beyond the
    last bin edge are ignored. Predictions from different frames never match
    each other: pass boxes with ``frame_id`` set when evaluating several frames.
    """
    if mode not in IOU_MODES:
        raise ConfigurationError(f"iou mode must be one of {IOU_MODES}")
    if not 0.0 < iou_thresh <= 1.0:
        raise ConfigurationError(f"iou threshold must lie in (0, 1], got {iou_thresh}")
    bins = validate_bins(bins)
    report = EvalReport(float(iou_thresh), mode, bins)
    if classes is None:
        classes = sorted({b.class_id for b in truths} | {b.class_id for b in preds})
    spans = list(bins) + [(0.0, bins[-1][1])]
    frames = sorted({b.frame_id for b in truths} | {b.frame_id for b in preds})
    for cls in classes:
        for lo, hi in spans:
            def in_bin(b):
                return b.class_id == cls and lo <= box_range(b) < hi
            bin_truth = [b for b in truths if in_bin(b)]
            bin_pred = [b for b in preds if in_bin(b)]
            report.results[(cls, bin_label(lo, hi))] = _evaluate_frames(
                bin_pred, bin_truth, frames, iou_thresh, mode, interpolation)
    return report


def _evaluate_frames(preds, truths, frames, iou_thresh, mode, interpolation) -> BinResult:
    """Match within each frame, then rank all predictions together."""
    scored = []     # (score, global order key, hit)
    for fid in frames:
        fp_ = [b for b in preds if b.frame_id == fid]
        ft = [b for b in truths if b.frame_id == fid]
        order, hits = greedy_match(fp_, ft, iou_thresh, mode)
        for i, h in zip(order, hits):
            scored.append((fp_[i].score, fid, i, h is not None))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    hit = [s[3] for s in scored]
    tp = sum(hit)
    if not truths:
        return BinResult(None, 0, len(hit) - tp, 0, 0)
    recall, precision = pr_curve(hit, len(truths))
    return BinResult(average_precision(recall, precision, interpolation), tp, len(hit) - tp,
                     len(truths) - tp, len(truths))
