"""Evaluation: AP over IoU thresholds, coverage, precision/recall, box AP.

Protocol: per class, predictions sorted by descending score are greedily
matched to the unmatched same-scene ground-truth instance of highest IoU at
or above the threshold; each ground truth matches at most once. AP is the
area under the precision-recall curve with all-point interpolation. Classes
with neither ground truth nor predictions are excluded from class means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .pipeline import InstancePrediction, mask_iou
from .scenes import PointScene, scene_instances

__all__ = [
    "ScoredInstance",
    "TruthInstance",
    "MAP_THRESHOLDS",
    "average_precision",
    "coverage_metrics",
    "prec_rec_at50",
    "boxes_from_masks",
    "box_iou",
    "detection_ap",
    "EvalReport",
    "evaluate_predictions",
    "truths_from_scene",
    "scored_from_predictions",
]

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ScoredInstance:
    scene: int
    category: int
    score: float
    mask: np.ndarray | None = None
    box: np.ndarray | None = None  # (2, 3) lo/hi


@dataclass(frozen=True)
class TruthInstance:
    scene: int
    category: int
    mask: np.ndarray | None = None
    box: np.ndarray | None = None


def truths_from_scene(scene_id: int, scene: PointScene) -> list[TruthInstance]:
    return [TruthInstance(scene=scene_id, category=cat, mask=mask)
            for _, cat, mask in scene_instances(scene)]


def scored_from_predictions(scene_id: int, preds: list[InstancePrediction]) -> list[ScoredInstance]:
    return [ScoredInstance(scene=scene_id, category=p.category, score=p.score, mask=p.mask)
            for p in preds]


def _pair_iou(pred, gt) -> float:
    if pred.scene != gt.scene:
        return 0.0
    if pred.mask is not None and gt.mask is not None:
        return mask_iou(pred.mask, gt.mask)
    return box_iou(pred.box, gt.box)


def _greedy_match(preds: list[ScoredInstance], gts: list[TruthInstance],
                  iou_threshold: float, category: int) -> tuple[list[bool], int]:
    """True/false-positive flags in score order, plus the ground-truth count."""
    cls_preds = sorted(
        (p for p in preds if p.category == category),
        key=lambda p: -p.score,  # stable: ties keep input order
    )
    cls_gts = [g for g in gts if g.category == category]
    taken = [False] * len(cls_gts)
    flags: list[bool] = []
    for pred in cls_preds:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(cls_gts):
            if taken[j]:
                continue
            iou = _pair_iou(pred, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(cls_gts)


def average_precision(preds: list[ScoredInstance], gts: list[TruthInstance],
                      iou_threshold: float, category: int) -> float | None:
    """AP for one class at one threshold; None when undefined (no GT, no preds)."""
    flags, n_gt = _greedy_match(preds, gts, iou_threshold, category)
    if n_gt == 0:
        return None if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1)
    precision = tp / ranks
    recall = tp / n_gt
    # precision envelope from the right, then integrate over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(flags)):
        if recall[k] > prev_r:
            ap += (recall[k] - prev_r) * envelope[k]
            prev_r = recall[k]
    return float(ap)


def coverage_metrics(preds: list[ScoredInstance], gts: list[TruthInstance]) -> tuple[float, float]:
    """(mCov, mWCov): mean / size-weighted mean best-IoU per ground truth.

    Class-agnostic best IoU against same-scene predictions; weights are mask
    sizes. Errors on empty ground truth.
    """
    if not gts:
        raise ValueError("coverage needs at least one ground-truth instance")
    best = [max((_pair_iou(p, g) for p in preds), default=0.0) for g in gts]
    sizes = np.array([int(np.sum(g.mask)) for g in gts], dtype=np.float64)
    mcov = float(np.mean(best))
    mwcov = float(np.sum(sizes * best) / np.sum(sizes))
    return mcov, mwcov


def prec_rec_at50(preds: list[ScoredInstance], gts: list[TruthInstance]) -> tuple[float, float]:
    """Class-mean precision and recall with matches at IoU >= 0.5.

    Classes present in either side count; a side with no instances of a class
    contributes 0 to that class's precision or recall.
    """
    classes = sorted({g.category for g in gts} | {p.category for p in preds})
    if not classes:
        raise ValueError("no instances to evaluate")
    precs, recs = [], []
    for category in classes:
        flags, n_gt = _greedy_match(preds, gts, 0.5, category)
        tp = sum(flags)
        precs.append(tp / len(flags) if flags else 0.0)
        recs.append(tp / n_gt if n_gt else 0.0)
    return float(np.mean(precs)), float(np.mean(recs))


# ---------------------------------------------------------------------------
# box-fit detection


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Axis-aligned 3-d box IoU. Zero-volume union: 1 if equal boxes else 0."""
    a = np.asarray(a, dtype=np.float64).reshape(2, 3)
    b = np.asarray(b, dtype=np.float64).reshape(2, 3)
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    vol_a = float(np.prod(a[1] - a[0]))
    vol_b = float(np.prod(b[1] - b[0]))
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return inter / union


def boxes_from_masks(items, coords_by_scene: dict[int, np.ndarray]):
    """Fit axis-aligned boxes over each item's mask points."""
    out = []
    for item in items:
        if item.mask is None or not item.mask.any():
            raise ValueError("cannot fit a box to an empty mask")
        pts = coords_by_scene[item.scene][item.mask]
        box = np.stack([pts.min(axis=0), pts.max(axis=0)])
        if isinstance(item, ScoredInstance):
            out.append(ScoredInstance(scene=item.scene, category=item.category,
                                      score=item.score, box=box))
        else:
            out.append(TruthInstance(scene=item.scene, category=item.category, box=box))
    return out


def detection_ap(pred_boxes: list[ScoredInstance], gt_boxes: list[TruthInstance],
                 thresholds: tuple[float, ...] = (0.25, 0.5)) -> dict[float, float]:
    """Class-mean box AP at each threshold (Table-style detection protocol)."""
    out = {}
    for threshold in thresholds:
        out[threshold] = _class_mean_ap(pred_boxes, gt_boxes, threshold)
    return out


def _class_mean_ap(preds, gts, threshold) -> float:
    classes = sorted({g.category for g in gts} | {p.category for p in preds})
    values = [average_precision(preds, gts, threshold, c) for c in classes]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else 0.0


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    ap_per_class: dict[float, dict[int, float | None]]
    map_value: float
    ap50: float
    ap25: float
    mcov: float
    mwcov: float
    mprec: float
    mrec: float
    det_ap25: float
    det_ap50: float

    def to_json(self) -> str:
        payload = {
            "mAP": self.map_value,
            "AP@50": self.ap50,
            "AP@25": self.ap25,
            "mCov": self.mcov,
            "mWCov": self.mwcov,
            "mPrec": self.mprec,
            "mRec": self.mrec,
            "detection AP@25": self.det_ap25,
            "detection AP@50": self.det_ap50,
            "per_class": {
                f"{t:.2f}": {str(c): v for c, v in per.items()}
                for t, per in self.ap_per_class.items()
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        rows = [
            ("mAP", self.map_value), ("AP@50", self.ap50), ("AP@25", self.ap25),
            ("mCov", self.mcov), ("mWCov", self.mwcov),
            ("mPrec", self.mprec), ("mRec", self.mrec),
            ("det AP@25", self.det_ap25), ("det AP@50", self.det_ap50),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:.4f}" for name, value in rows) + "\n"


def evaluate_predictions(preds: list[ScoredInstance], gts: list[TruthInstance],
                         coords_by_scene: dict[int, np.ndarray]) -> EvalReport:
    classes = sorted({g.category for g in gts} | {p.category for p in preds})
    ap_per_class: dict[float, dict[int, float | None]] = {}
    for threshold in MAP_THRESHOLDS + (0.25,):
        ap_per_class[threshold] = {c: average_precision(preds, gts, threshold, c) for c in classes}

    def class_mean(threshold: float) -> float:
        values = [v for v in ap_per_class[threshold].values() if v is not None]
        return float(np.mean(values)) if values else 0.0

    mcov, mwcov = coverage_metrics(preds, gts) if gts else (0.0, 0.0)
    mprec, mrec = prec_rec_at50(preds, gts) if (gts or preds) else (0.0, 0.0)
    pred_boxes = boxes_from_masks(preds, coords_by_scene)
    gt_boxes = boxes_from_masks(gts, coords_by_scene)
    det = detection_ap(pred_boxes, gt_boxes)
    return EvalReport(
        ap_per_class=ap_per_class,
        map_value=float(np.mean([class_mean(t) for t in MAP_THRESHOLDS])),
        ap50=class_mean(0.50),
        ap25=class_mean(0.25),
        mcov=mcov,
        mwcov=mwcov,
        mprec=mprec,
        mrec=mrec,
        det_ap25=det[0.25],
        det_ap50=det[0.5],
    )
