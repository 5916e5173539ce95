"""Evaluation metrics: panoptic quality, semantic mIoU, IoU-thresholded
average precision, interactive and referring mask quality, and the Overall
average used for model selection.

All metrics are returned on a 0-100 scale.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError, SceneFormatError
from .matching import hungarian_padded

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))  # 0.50:0.05:0.95


@dataclass
class Segment:
    """A point set with a class label (one panoptic segment or instance)."""

    mask: np.ndarray            # (N,) bool
    class_id: int


@dataclass
class InstancePrediction:
    scene: int
    class_id: int
    score: float
    mask: np.ndarray


@dataclass
class InstanceGT:
    scene: int
    class_id: int
    mask: np.ndarray


def mask_iou(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    if valid is not None:
        a = a & valid
        b = b & valid
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


# ---------------------------------------------------------------------------
# panoptic quality


def panoptic_quality(pred_segments: list[list[Segment]], gt_segments: list[list[Segment]],
                     void_masks: list[np.ndarray] | None = None) -> float:
    """Segment-level PQ, matched at IoU > 0.5, averaged over gt-present classes.

    Pred segments must be disjoint within a scene. Points under a void mask
    are excluded from every IoU denominator.
    """
    if len(pred_segments) != len(gt_segments):
        raise ContractError("panoptic_quality: scene count mismatch")
    stats: dict[int, list[float]] = {}   # class -> [iou_sum, tp, fp, fn]

    for s, (preds, gts) in enumerate(zip(pred_segments, gt_segments)):
        valid = None
        if void_masks is not None and void_masks[s] is not None:
            valid = ~void_masks[s]
        if preds:
            total = np.zeros_like(preds[0].mask, dtype=np.int64)
            for seg in preds:
                total += seg.mask.astype(np.int64)
            if total.max(initial=0) > 1:
                raise ContractError("panoptic_quality: overlapping prediction segments")
        matched_preds: set[int] = set()
        matched_gts: set[int] = set()
        for gi, gt in enumerate(gts):
            stats.setdefault(gt.class_id, [0.0, 0, 0, 0])
            for pi, pred in enumerate(preds):
                if pred.class_id != gt.class_id:
                    continue
                iou = mask_iou(pred.mask, gt.mask, valid)
                if iou > 0.5:
                    # the >0.5 criterion makes matches unique; assert, don't assume
                    if pi in matched_preds or gi in matched_gts:
                        raise ContractError("panoptic_quality: non-unique match at IoU > 0.5")
                    matched_preds.add(pi)
                    matched_gts.add(gi)
                    st = stats[gt.class_id]
                    st[0] += iou
                    st[1] += 1
        for gi, gt in enumerate(gts):
            if gi not in matched_gts:
                stats[gt.class_id][3] += 1
        for pi, pred in enumerate(preds):
            if pi not in matched_preds:
                stats.setdefault(pred.class_id, [0.0, 0, 0, 0])
                stats[pred.class_id][2] += 1

    scores = []
    for cls, (iou_sum, tp, fp, fn) in sorted(stats.items()):
        if tp + fn == 0:
            continue  # class absent from gt: excluded from the average
        scores.append(iou_sum / (tp + 0.5 * fp + 0.5 * fn))
    return 100.0 * float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# semantic mIoU


def semantic_miou(pred_classes: list[np.ndarray], gt_classes: list[np.ndarray]) -> float:
    """Mean over gt-present classes of pointwise intersection-over-union."""
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    gt_present: set[int] = set()
    for pred, gt in zip(pred_classes, gt_classes):
        for cls in np.unique(np.concatenate([pred, gt])):
            if cls < 0:
                continue
            c = int(cls)
            p = pred == c
            g = gt == c
            inter[c] = inter.get(c, 0) + int((p & g).sum())
            union[c] = union.get(c, 0) + int((p | g).sum())
            if g.any():
                gt_present.add(c)
    ious = [inter[c] / union[c] for c in sorted(gt_present) if union[c] > 0]
    return 100.0 * float(np.mean(ious)) if ious else 0.0


# ---------------------------------------------------------------------------
# average precision


def _ap_from_pr(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _class_ap(preds: list[InstancePrediction], gts: list[InstanceGT],
              iou_threshold: float) -> float:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched: set[int] = set()
    tp_flags = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gts):
            if g in matched or gt.scene != p.scene:
                continue
            iou = mask_iou(p.mask, gt.mask)
            if iou > best_iou:
                best_iou, best_g = iou, g
        if best_g >= 0 and best_iou >= iou_threshold:
            matched.add(best_g)
            tp_flags[rank] = True
    return _ap_from_pr(tp_flags, len(gts))


def average_precision(preds: list[InstancePrediction], gts: list[InstanceGT],
                      iou_thresholds=AP_THRESHOLDS,
                      classes=None) -> dict[float, float]:
    """Class-averaged AP per threshold; only gt-present classes count."""
    if classes is None:
        classes = sorted({g.class_id for g in gts})
    out = {}
    for thr in iou_thresholds:
        if not classes:
            out[float(thr)] = 0.0
            continue
        per_class = []
        for cls in classes:
            cls_gts = [g for g in gts if g.class_id == cls]
            if not cls_gts:
                continue
            cls_preds = [p for p in preds if p.class_id == cls]
            per_class.append(_class_ap(cls_preds, cls_gts, thr))
        out[float(thr)] = float(np.mean(per_class)) if per_class else 0.0
    return out


def ap_summary(preds: list[InstancePrediction], gts: list[InstanceGT],
               classes=None) -> tuple[float, float, float]:
    """(mAP over 0.50:0.05:0.95, AP50, AP25), all in percent."""
    sweep = average_precision(preds, gts, AP_THRESHOLDS, classes)
    extra = average_precision(preds, gts, (0.25,), classes)
    m_ap = float(np.mean(list(sweep.values())))
    return 100.0 * m_ap, 100.0 * sweep[0.5], 100.0 * extra[0.25]


# ---------------------------------------------------------------------------
# prompted-task metrics


def referring_metrics(pairs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float, float]:
    """(mIoU, acc@0.25, acc@0.50) over (predicted mask, gt mask) pairs."""
    if not pairs:
        return 0.0, 0.0, 0.0
    ious = np.array([mask_iou(p, g) for p, g in pairs])
    return (100.0 * float(ious.mean()),
            100.0 * float((ious >= 0.25).mean()),
            100.0 * float((ious >= 0.50).mean()))


def interactive_metrics(entries: list[tuple[np.ndarray, float, np.ndarray, int]],
                        ) -> tuple[float, float, float, float]:
    """(AP, AP50, AP25, mIoU) treating each click's mask as a scored instance.

    entries are (predicted mask, score, gt instance mask, scene id); the gt
    set contains each distinct prompted instance once.
    """
    if not entries:
        return 0.0, 0.0, 0.0, 0.0
    preds, gts, seen = [], [], set()
    ious = []
    for pred_mask, score, gt_mask, scene in entries:
        preds.append(InstancePrediction(scene=scene, class_id=0, score=score, mask=pred_mask))
        key = (scene, gt_mask.tobytes())
        if key not in seen:
            seen.add(key)
            gts.append(InstanceGT(scene=scene, class_id=0, mask=gt_mask))
        ious.append(mask_iou(pred_mask, gt_mask))
    ap, ap50, ap25 = ap_summary(preds, gts, classes=[0])
    return ap, ap50, ap25, 100.0 * float(np.mean(ious))


def matched_instance_miou(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]) -> float:
    """Mean IoU over gt instances after optimal one-to-one matching.

    The mask-quality view of instance segmentation: unmatched gt scores 0.
    """
    if not gt_masks:
        return 0.0
    if not pred_masks:
        return 0.0
    iou = np.array([[mask_iou(p, g) for g in gt_masks] for p in pred_masks])
    pairs = hungarian_padded(1.0 - iou)
    total = sum(iou[i, j] for i, j in pairs)
    return 100.0 * total / len(gt_masks)


# ---------------------------------------------------------------------------
# report


HEADLINE_FIELDS = ("pq", "sem_miou", "inst_map", "inter_ap", "ref_miou", "ov_ap")


@dataclass
class MetricsReport:
    """Per-task headline metrics; overall is the mean of the six headliners."""

    pq: float = 0.0
    sem_miou: float = 0.0
    inst_map: float = 0.0
    inst_ap50: float = 0.0
    inst_ap25: float = 0.0
    inter_ap: float = 0.0
    inter_ap50: float = 0.0
    inter_ap25: float = 0.0
    inter_miou: float = 0.0
    ref_miou: float = 0.0
    ref_acc25: float = 0.0
    ref_acc50: float = 0.0
    ov_ap: float = 0.0
    overall: float = 0.0

    def finalize(self) -> "MetricsReport":
        self.overall = float(np.mean([getattr(self, f) for f in HEADLINE_FIELDS]))
        return self

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name):.17g}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SceneFormatError(f"metrics line {lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            values[key.strip()] = float(raw.strip())
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(values) - known
        if unknown:
            raise SceneFormatError(f"metrics file has unknown keys: {sorted(unknown)}")
        return cls(**values)
