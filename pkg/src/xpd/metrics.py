"""Evaluation: mask/box average precision, boundary IoU, and depth errors.

All mask evaluation happens at mask resolution (H/4): ground-truth labels
are downsampled by center sampling and instances whose downsampled mask is
empty are dropped as below evaluable resolution. Boxes are tight boxes of
those masks scaled back to full resolution, for predictions and ground
truth alike, so an oracle that feeds the ground truth back as predictions
scores exactly 1.0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyEvaluationWarning, ShapeError
from .net import InstancePrediction, mask_box
from .raster import laplacian_boundary

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DOWNSAMPLE_OFFSET = 2  # center sample of each 4x4 block


@dataclass
class GTInstance:
    mask: np.ndarray  # (H/4, W/4) bool
    box: tuple


@dataclass
class EvalItem:
    """Everything the evaluator needs for one image."""

    predictions: list
    gts: list
    depth_pred: np.ndarray | None = None
    depth_gt: np.ndarray | None = None
    depth_valid: np.ndarray | None = None


def build_gt_instances(labels: np.ndarray, stride: int = 4) -> list[GTInstance]:
    """Downsample a full-resolution label map into per-instance eval masks."""
    ds = labels[DOWNSAMPLE_OFFSET::stride, DOWNSAMPLE_OFFSET::stride]
    out = []
    for k in np.unique(labels):
        if k == 0:
            continue
        mask = ds == k
        if not mask.any():
            continue
        out.append(GTInstance(mask=mask, box=mask_box(mask)))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Set IoU of two binary masks; two empty masks count as identical."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)


def box_iou(a: tuple, b: tuple) -> float:
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _pred_binary(pred: InstancePrediction) -> np.ndarray:
    return pred.mask >= 0.5


def _pair_iou(pred: InstancePrediction, gt: GTInstance, box_mode: bool) -> float:
    if box_mode:
        return box_iou(pred.box, gt.box)
    return mask_iou(_pred_binary(pred), gt.mask)


def greedy_match(predictions: list, gts: list, threshold: float, box_mode: bool = False):
    """Greedy score-descending matching; each GT is used at most once.

    Returns (matches, tp_flags) where matches maps prediction index to GT
    index. Ties on score fall back to prediction order, ties on IoU to the
    lowest GT index.
    """
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))
    taken = set()
    matches = {}
    tp = np.zeros(len(predictions), dtype=bool)
    for i in order:
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            iou = _pair_iou(predictions[i], gt, box_mode)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= threshold:
            taken.add(best_j)
            matches[i] = best_j
            tp[i] = True
    return matches, tp


def average_precision(preds_per_image: list, gts_per_image: list,
                      iou_thresholds=COCO_THRESHOLDS, box_mode: bool = False):
    """101-point interpolated AP per IoU threshold over the whole dataset.

    Matching is greedy per image in descending score order; the PR curve is
    built over all predictions sorted by (score, image, index). Returns a
    list aligned with ``iou_thresholds``; all None when there is no GT.
    """
    n_gt = sum(len(g) for g in gts_per_image)
    if n_gt == 0:
        warnings.warn("average precision undefined without ground-truth instances",
                      EmptyEvaluationWarning, stacklevel=2)
        return [None for _ in iou_thresholds]
    flat = []  # (score, image_idx, pred_idx)
    for img, preds in enumerate(preds_per_image):
        for i, p in enumerate(preds):
            flat.append((p.score, img, i))
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    out = []
    for thr in iou_thresholds:
        tp_by_image = [greedy_match(p, g, thr, box_mode)[1]
                       for p, g in zip(preds_per_image, gts_per_image)]
        tp_sorted = np.array([tp_by_image[img][i] for _, img, i in flat], dtype=np.float64)
        if tp_sorted.size == 0:
            out.append(0.0)
            continue
        cum_tp = np.cumsum(tp_sorted)
        precision = cum_tp / (np.arange(tp_sorted.size) + 1.0)
        recall = cum_tp / n_gt
        # precision envelope, then 101-point interpolation
        env = np.maximum.accumulate(precision[::-1])[::-1]
        ap = 0.0
        for r in RECALL_POINTS:
            idx = np.searchsorted(recall, r, side="left")
            ap += env[idx] if idx < env.size else 0.0
        out.append(ap / RECALL_POINTS.size)
    return out


def ap_suite(preds_per_image, gts_per_image, box_mode: bool = False):
    """(overall, AP50, AP75) with the COCO threshold sweep."""
    values = average_precision(preds_per_image, gts_per_image,
                               iou_thresholds=COCO_THRESHOLDS, box_mode=box_mode)
    if values[0] is None:
        return None, None, None
    overall = float(np.mean(values))
    ap50 = values[COCO_THRESHOLDS.index(0.50)]
    ap75 = values[COCO_THRESHOLDS.index(0.75)]
    return overall, ap50, ap75


def _boundary_set(mask: np.ndarray, dilate_px: int = 0) -> np.ndarray:
    b = laplacian_boundary(mask.astype(np.float64)) > 0
    if dilate_px > 0:
        b = ndimage.binary_dilation(b, structure=np.ones((3, 3), bool), iterations=dilate_px)
    return b


def boundary_iou(gts_per_image: list, preds_per_image: list, match_iou: float = 0.5,
                 dilate_px: int = 0):
    """Mean boundary IoU over GT instances; unmatched GT contribute 0.

    Predictions are matched to GT at mask IoU >= ``match_iou``; for each
    matched pair the Laplacian boundary sets are compared (optionally after
    a Chebyshev dilation of ``dilate_px``). The dataset value averages over
    images weighted by GT count, i.e. uniformly over GT instances.
    """
    total_gt = sum(len(g) for g in gts_per_image)
    if total_gt == 0:
        warnings.warn("boundary IoU undefined without ground-truth instances",
                      EmptyEvaluationWarning, stacklevel=2)
        return None
    score_sum = 0.0
    for preds, gts in zip(preds_per_image, gts_per_image):
        matches, _ = greedy_match(preds, gts, match_iou, box_mode=False)
        for pi, gi in matches.items():
            b_gt = _boundary_set(gts[gi].mask, dilate_px)
            b_pr = _boundary_set(_pred_binary(preds[pi]), dilate_px)
            union = np.logical_or(b_gt, b_pr).sum()
            if union == 0:
                score_sum += 1.0
            else:
                score_sum += float(np.logical_and(b_gt, b_pr).sum()) / float(union)
    return score_sum / total_gt


def depth_metrics(d_pred: np.ndarray, d_gt: np.ndarray, valid_mask: np.ndarray | None = None):
    """(rel, log10, rms, delta1, delta2, delta3) over valid pixels.

    Thresholded accuracies use a strict max(d/d*, d*/d) < 1.25**i.
    """
    if d_pred.shape != d_gt.shape:
        raise ShapeError("depth shapes differ")
    valid = d_gt > 0 if valid_mask is None else (valid_mask & (d_gt > 0))
    if not np.any(valid):
        warnings.warn("no valid depth pixels; depth metrics are null",
                      EmptyEvaluationWarning, stacklevel=2)
        return (None,) * 6
    d = d_pred[valid].astype(np.float64)
    g = d_gt[valid].astype(np.float64)
    rel = float(np.mean(np.abs(d - g) / g))
    log10 = float(np.mean(np.abs(np.log10(d) - np.log10(g))))
    rms = float(np.sqrt(np.mean((d - g) ** 2)))
    ratio = np.maximum(d / g, g / d)
    deltas = tuple(float(np.mean(ratio < 1.25 ** i)) for i in (1, 2, 3))
    return (rel, log10, rms) + deltas


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ap_m: float | None
    ap_m50: float | None
    ap_m75: float | None
    ap_b: float | None
    ap_b50: float | None
    ap_b75: float | None
    boundary_iou: float | None
    rel: float | None
    log10: float | None
    rms: float | None
    delta1: float | None
    delta2: float | None
    delta3: float | None
    counts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "segmentation": {"ap_m": self.ap_m, "ap_m50": self.ap_m50, "ap_m75": self.ap_m75,
                             "ap_b": self.ap_b, "ap_b50": self.ap_b50, "ap_b75": self.ap_b75,
                             "boundary_iou": self.boundary_iou},
            "depth": {"rel": self.rel, "log10": self.log10, "rms": self.rms,
                      "delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3},
            "counts": self.counts,
            "metadata": self.metadata,
        }

    def table(self) -> str:
        def fmt(x):
            return "  null" if x is None else f"{x:6.4f}"

        rows = [
            ("AP_m / 50 / 75", f"{fmt(self.ap_m)} {fmt(self.ap_m50)} {fmt(self.ap_m75)}"),
            ("AP_b / 50 / 75", f"{fmt(self.ap_b)} {fmt(self.ap_b50)} {fmt(self.ap_b75)}"),
            ("Boundary IoU", fmt(self.boundary_iou)),
            ("rel / log10 / RMS", f"{fmt(self.rel)} {fmt(self.log10)} {fmt(self.rms)}"),
            ("delta 1 / 2 / 3", f"{fmt(self.delta1)} {fmt(self.delta2)} {fmt(self.delta3)}"),
            ("images / GT / preds", f"{self.counts.get('images')} / {self.counts.get('gt_instances')}"
                                    f" / {self.counts.get('predictions')}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


def evaluate_items(items: list[EvalItem], match_iou: float = 0.5,
                   dilate_px: int = 0, metadata: dict | None = None) -> MetricsReport:
    """Aggregate the full metric table over a list of evaluated images."""
    preds = [it.predictions for it in items]
    gts = [it.gts for it in items]
    ap_m, ap_m50, ap_m75 = ap_suite(preds, gts, box_mode=False)
    ap_b, ap_b50, ap_b75 = ap_suite(preds, gts, box_mode=True)
    biou = boundary_iou(gts, preds, match_iou=match_iou, dilate_px=dilate_px)

    per_image = []
    for it in items:
        if it.depth_pred is None:
            continue
        values = depth_metrics(it.depth_pred, it.depth_gt, it.depth_valid)
        if values[0] is not None:
            per_image.append(values)
    if per_image:
        arr = np.array(per_image, dtype=np.float64)
        rel, log10, rms, d1, d2, d3 = [float(x) for x in arr.mean(axis=0)]
    else:
        rel = log10 = rms = d1 = d2 = d3 = None

    meta = {
        "iou_thresholds": list(COCO_THRESHOLDS),
        "interpolation_points": len(RECALL_POINTS),
        "boundary_match_iou": match_iou,
        "boundary_dilate_px": dilate_px,
        "unmatched_gt_boundary_score": 0.0,
        "delta_comparison": "strict_less",
        "eval_resolution": "quarter (center-sampled labels)",
        "depth_aggregation": "mean of per-image metrics",
    }
    meta.update(metadata or {})
    return MetricsReport(
        ap_m=ap_m, ap_m50=ap_m50, ap_m75=ap_m75,
        ap_b=ap_b, ap_b50=ap_b50, ap_b75=ap_b75,
        boundary_iou=biou, rel=rel, log10=log10, rms=rms,
        delta1=d1, delta2=d2, delta3=d3,
        counts={"images": len(items),
                "gt_instances": sum(len(g) for g in gts),
                "predictions": sum(len(p) for p in preds)},
        metadata=meta,
    )
