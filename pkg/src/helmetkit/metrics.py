"""Detection evaluation: IoU matching, COCO-style AP/mAP, confidence curves, confusion matrix."""

from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .annotations import CLASS_IDS, NUM_CLASSES, BoundingBox, DetectionRecord, GroundTruthRecord

IOU_THRESHOLDS: Tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))
RECALL_GRID = np.arange(101) / 100
CONFIDENCE_GRID = np.arange(101) / 100
BACKGROUND = NUM_CLASSES  # row/column index of the background class in the confusion matrix


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two ``(n, 4)`` arrays of ``x1, y1, x2, y2`` boxes."""
    boxes_a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    iw = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    ih = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def _xyxy(records) -> np.ndarray:
    return np.array([r.bbox.as_xyxy() for r in records], dtype=float).reshape(-1, 4)


@dataclass
class _Cell:
    gt_idx: List[int]
    det_idx: List[int]  # sorted by descending confidence, then input order
    ious: np.ndarray  # (len(det_idx), len(gt_idx))


def _cells(gts, dets, class_aware: bool = True) -> Dict[tuple, _Cell]:
    def key(r):
        return (r.video_id, r.frame, r.class_id) if class_aware else (r.video_id, r.frame)

    gt_groups: Dict[tuple, List[int]] = defaultdict(list)
    det_groups: Dict[tuple, List[int]] = defaultdict(list)
    for i, g in enumerate(gts):
        gt_groups[key(g)].append(i)
    for i, d in enumerate(dets):
        det_groups[key(d)].append(i)
    cells = {}
    for k in sorted(set(gt_groups) | set(det_groups)):
        g_idx = gt_groups.get(k, [])
        d_idx = sorted(det_groups.get(k, []), key=lambda i: (-dets[i].confidence, i))
        if g_idx and d_idx:
            ious = iou_matrix(_xyxy([dets[i] for i in d_idx]), _xyxy([gts[i] for i in g_idx]))
        else:
            ious = np.zeros((len(d_idx), len(g_idx)))
        cells[k] = _Cell(g_idx, d_idx, ious)
    return cells


def _greedy(cell: _Cell, threshold: float) -> List[Tuple[int, int, float]]:
    """Greedy assignment inside one cell; returns (det position, gt position, iou)."""
    taken = np.zeros(len(cell.gt_idx), dtype=bool)
    pairs = []
    for row in range(len(cell.det_idx)):
        if taken.all():
            break
        candidates = np.where(taken, -1.0, cell.ious[row])
        best = int(np.argmax(candidates))  # first maximum, i.e. lowest gt index on ties
        if candidates[best] >= threshold:
            taken[best] = True
            pairs.append((row, best, float(candidates[best])))
    return pairs


@dataclass
class MatchSet:
    """Result of matching detections to ground truth; indices refer to the input sequences."""

    pairs: List[Tuple[int, int, float]]  # (detection index, ground-truth index, iou)
    unmatched_detections: List[int]
    unmatched_ground_truths: List[int]

    def matched_flags(self, n_detections: int) -> np.ndarray:
        flags = np.zeros(n_detections, dtype=bool)
        for d, _, _ in self.pairs:
            flags[d] = True
        return flags


def _match_cells(cells: Dict[tuple, _Cell], threshold: float, n_gts: int, n_dets: int) -> MatchSet:
    pairs = []
    for cell in cells.values():
        for row, col, value in _greedy(cell, threshold):
            pairs.append((cell.det_idx[row], cell.gt_idx[col], value))
    pairs.sort()
    matched_d = {d for d, _, _ in pairs}
    matched_g = {g for _, g, _ in pairs}
    return MatchSet(
        pairs,
        [i for i in range(n_dets) if i not in matched_d],
        [i for i in range(n_gts) if i not in matched_g],
    )


def match_detections(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    iou_threshold: float = 0.5,
    class_aware: bool = True,
) -> MatchSet:
    """Greedy matching per (video, frame, class) cell.

    Detections are visited in descending confidence (input order on ties);
    each takes the still-unmatched ground truth with the highest IoU at or
    above ``iou_threshold``, the lowest ground-truth index winning equal IoUs.
    With ``class_aware=False`` cells are (video, frame) only.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    return _match_cells(_cells(gts, dets, class_aware), iou_threshold, len(gts), len(dets))


@dataclass
class PrCurve:
    """Precision/recall sampled at each distinct detection confidence, descending."""

    confidence: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_ground_truth: int


def pr_curve(confidences: Sequence[float], matched: Sequence[bool], n_ground_truth: int) -> PrCurve:
    conf = np.asarray(confidences, dtype=float)
    tp = np.asarray(matched, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    if conf.size == 0:
        empty = np.zeros(0)
        return PrCurve(empty, empty, empty, n_ground_truth)
    tp_cum = np.cumsum(tp)
    n_cum = np.arange(1, conf.size + 1)
    # the last detection of each run of equal confidence closes that threshold
    last = np.r_[conf[1:] != conf[:-1], True]
    tp_cum, n_cum = tp_cum[last], n_cum[last]
    precision = tp_cum / n_cum
    recall = tp_cum / n_ground_truth if n_ground_truth > 0 else np.zeros(tp_cum.size)
    return PrCurve(conf[last], precision, recall, n_ground_truth)


def average_precision(curve: PrCurve) -> float:
    """101-point interpolated AP: mean over recall r in {0, .01, ..., 1} of max precision at recall >= r."""
    if curve.recall.size == 0:
        return 0.0
    # precision envelope: best precision at any recall to the right
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    pos = np.searchsorted(curve.recall, RECALL_GRID, side="left")
    sampled = np.where(pos < curve.recall.size, envelope[np.minimum(pos, curve.recall.size - 1)], 0.0)
    return float(np.mean(sampled))


def _class_groups(gts, dets):
    n_gt = {c: 0 for c in CLASS_IDS}
    for g in gts:
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    det_by_class: Dict[int, List[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        det_by_class[d.class_id].append(i)
    return n_gt, det_by_class


def _ap_per_class(cells, gts, dets, threshold) -> Dict[int, float]:
    match = _match_cells(cells, threshold, len(gts), len(dets))
    flags = match.matched_flags(len(dets))
    n_gt, det_by_class = _class_groups(gts, dets)
    out = {}
    for c in CLASS_IDS:
        if n_gt[c] == 0:
            out[c] = float("nan")
            continue
        idx = det_by_class.get(c, [])
        curve = pr_curve([dets[i].confidence for i in idx], flags[idx], n_gt[c])
        out[c] = average_precision(curve)
    return out


def class_ap(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    jobs: int = 1,
) -> Dict[int, np.ndarray]:
    """AP per class at each IoU threshold; NaN for classes without ground truth."""
    cells = _cells(gts, dets)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_t = list(pool.map(lambda t: _ap_per_class(cells, gts, dets, t), thresholds))
    else:
        per_t = [_ap_per_class(cells, gts, dets, t) for t in thresholds]
    return {c: np.array([row[c] for row in per_t]) for c in CLASS_IDS}


def _mean_over_present(values: Dict[int, float]) -> float:
    present = [v for v in values.values() if not np.isnan(v)]
    return float(np.mean(present)) if present else 0.0


def map_at(gts, dets, iou_threshold: float = 0.5) -> float:
    """Mean AP over classes that have at least one ground-truth instance."""
    aps = class_ap(gts, dets, (iou_threshold,))
    return _mean_over_present({c: v[0] for c, v in aps.items()})


def map_range(gts, dets, jobs: int = 1) -> float:
    """Mean of :func:`map_at` over IoU thresholds 0.50, 0.55, ..., 0.95."""
    aps = class_ap(gts, dets, IOU_THRESHOLDS, jobs=jobs)
    return float(np.mean([_mean_over_present({c: v[i] for c, v in aps.items()}) for i in range(len(IOU_THRESHOLDS))]))


@dataclass
class CurveTable:
    confidence: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray


@dataclass
class ConfidenceCurves:
    per_class: Dict[int, CurveTable]
    aggregate: CurveTable


def _f1(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    denom = p + r
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, 2 * p * r / denom, 0.0)


def _prf_at(gts, dets, iou_threshold: float, cutoffs: np.ndarray) -> ConfidenceCurves:
    # Greedy matching visits detections by descending confidence, so the
    # matching of the detections kept at a cutoff equals the full matching
    # restricted to them. One match pass serves every cutoff.
    match = match_detections(gts, dets, iou_threshold)
    flags = match.matched_flags(len(dets))
    n_gt, det_by_class = _class_groups(gts, dets)
    cutoffs = np.asarray(cutoffs, dtype=float)
    per_class = {}
    for c in CLASS_IDS:
        idx = det_by_class.get(c, [])
        if n_gt[c] == 0 and not idx:
            continue
        conf = np.array([dets[i].confidence for i in idx], dtype=float)
        tp = flags[idx]
        kept = conf[None, :] >= cutoffs[:, None]
        n_kept = kept.sum(axis=1)
        n_tp = (kept & tp[None, :]).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(n_kept > 0, n_tp / np.maximum(n_kept, 1), 0.0)
        r = n_tp / n_gt[c] if n_gt[c] else np.zeros(cutoffs.size)
        per_class[c] = CurveTable(cutoffs, p, r, _f1(p, r))
    present = [c for c in CLASS_IDS if n_gt[c] > 0]
    if present:
        p = np.mean([per_class[c].precision for c in present], axis=0)
        r = np.mean([per_class[c].recall for c in present], axis=0)
    else:
        p = r = np.zeros(cutoffs.size)
    return ConfidenceCurves(per_class, CurveTable(cutoffs, p, r, _f1(p, r)))


def confidence_curves(gts, dets, iou_threshold: float = 0.5) -> ConfidenceCurves:
    """Precision, recall and F1 per class at confidence cutoffs 0.00, 0.01, ..., 1.00.

    The aggregate row averages precision and recall over classes that have
    ground truth and takes F1 of those means.
    """
    return _prf_at(gts, dets, iou_threshold, CONFIDENCE_GRID)


def confusion_matrix(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    iou_threshold: float = 0.5,
    confidence_cutoff: float = 0.25,
    normalize: bool = False,
) -> np.ndarray:
    """Class confusion counts, rows = ground-truth class, columns = detected class.

    Index ``k`` holds class id ``k + 1``; the last row and column are the
    background. Matching ignores class so cross-class confusions show up.
    With ``normalize`` every row is divided by its sum.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if not 0.0 <= confidence_cutoff <= 1.0:
        raise ValueError(f"confidence_cutoff must lie in [0, 1], got {confidence_cutoff}")
    kept = [d for d in dets if d.confidence >= confidence_cutoff]
    match = match_detections(gts, kept, iou_threshold, class_aware=False)
    size = NUM_CLASSES + 1
    matrix = np.zeros((size, size), dtype=np.int64)
    for d, g, _ in match.pairs:
        matrix[gts[g].class_id - 1, kept[d].class_id - 1] += 1
    for g in match.unmatched_ground_truths:
        matrix[gts[g].class_id - 1, BACKGROUND] += 1
    for d in match.unmatched_detections:
        matrix[BACKGROUND, kept[d].class_id - 1] += 1
    if normalize:
        sums = matrix.sum(axis=1, keepdims=True)
        return np.divide(matrix, sums, out=np.zeros(matrix.shape), where=sums > 0)
    return matrix


@dataclass
class EvalReport:
    ap: Dict[int, np.ndarray]  # class id -> AP per IoU threshold (NaN when class absent)
    thresholds: Tuple[float, ...]
    map50: float
    map50_95: float
    precision: float
    recall: float
    f1: float
    report_confidence: float
    curves: ConfidenceCurves
    confusion: np.ndarray
    n_ground_truth: Dict[int, int] = field(default_factory=dict)
    n_detections: Dict[int, int] = field(default_factory=dict)

    def summary(self) -> Dict[str, float]:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def evaluate(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    report_confidence: float = 0.25,
    iou_threshold: float = 0.5,
    jobs: int = 1,
) -> EvalReport:
    """Run every metric and collect the results.

    Precision, recall, F1 and the confusion matrix use ``iou_threshold`` and
    the ``report_confidence`` cutoff; AP uses all detections.
    """
    aps = class_ap(gts, dets, IOU_THRESHOLDS, jobs=jobs)
    per_t = [_mean_over_present({c: v[i] for c, v in aps.items()}) for i in range(len(IOU_THRESHOLDS))]
    map50 = per_t[IOU_THRESHOLDS.index(0.5)]
    at_report = _prf_at(gts, dets, iou_threshold, np.array([report_confidence])).aggregate
    n_gt, det_by_class = _class_groups(gts, dets)
    return EvalReport(
        ap=aps,
        thresholds=IOU_THRESHOLDS,
        map50=map50,
        map50_95=float(np.mean(per_t)),
        precision=float(at_report.precision[0]),
        recall=float(at_report.recall[0]),
        f1=float(at_report.f1[0]),
        report_confidence=report_confidence,
        curves=confidence_curves(gts, dets, iou_threshold),
        confusion=confusion_matrix(gts, dets, iou_threshold, report_confidence),
        n_ground_truth={c: n_gt.get(c, 0) for c in CLASS_IDS},
        n_detections={c: len(det_by_class.get(c, [])) for c in CLASS_IDS},
    )
