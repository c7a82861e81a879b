"""Merging detections from several models or test-time-augmented views."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .annotations import (
    DEFAULT_GEOMETRY,
    BoundingBox,
    DetectionRecord,
    FrameGeometry,
    ParseError,
    parse_detections,
    serialize_detections,
)
from .metrics import iou
from .sampling import AugmentSpec, flip_box, rotation_hull, transform_box

METHODS = ("weighted_fusion", "nms")


@dataclass
class ModelOutput:
    model_id: str
    detections: Sequence[DetectionRecord]
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"model {self.model_id}: weight must be > 0")


@dataclass(frozen=True)
class FusionConfig:
    method: str = "weighted_fusion"
    cluster_iou: float = 0.55
    confidence_floor: float = 0.001
    count_scaling: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.cluster_iou <= 1.0:
            raise ValueError("cluster_iou must lie in (0, 1]")
        if not 0.0 <= self.confidence_floor < 1.0:
            raise ValueError("confidence_floor must lie in [0, 1)")


def _cell_key(d: DetectionRecord):
    return d.video_id, d.frame, d.class_id


def _output_order(d: DetectionRecord):
    return d.video_id, d.frame, d.class_id, -d.confidence


def nms(dets: Sequence[DetectionRecord], iou_threshold: float = 0.5) -> List[DetectionRecord]:
    """Suppression inside one (video, frame, class) cell.

    Visits detections by descending confidence (input order on ties) and
    keeps one only if its IoU with every kept detection is below the threshold.
    """
    kept: List[DetectionRecord] = []
    for d in sorted(dets, key=lambda d: -d.confidence):
        if all(iou(d.bbox, k.bbox) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def nms_all(dets: Sequence[DetectionRecord], iou_threshold: float = 0.5) -> List[DetectionRecord]:
    cells: Dict[tuple, List[DetectionRecord]] = defaultdict(list)
    for d in dets:
        cells[_cell_key(d)].append(d)
    out = []
    for key in sorted(cells):
        out.extend(nms(cells[key], iou_threshold))
    return sorted(out, key=_output_order)


class _Member(NamedTuple):
    det: DetectionRecord
    model: int  # position of the model in the sorted model list
    weight: float


@dataclass
class _Cluster:
    members: List[_Member] = field(default_factory=list)
    box: Optional[BoundingBox] = None

    def add(self, m: _Member):
        self.members.append(m)
        self.box = _fused_box(self.members)


def _fused_box(members: Sequence[_Member]) -> BoundingBox:
    if all(m.det.bbox == members[0].det.bbox for m in members):
        # unanimous members: a weighted mean would only add rounding error
        return members[0].det.bbox
    w = np.array([m.weight * m.det.confidence for m in members], dtype=float)
    total = w.sum()
    w = w / total if total > 0 else np.full(len(members), 1.0 / len(members))
    coords = np.array([(m.det.bbox.left, m.det.bbox.top, m.det.bbox.width, m.det.bbox.height) for m in members])
    return BoundingBox(*(float(v) for v in w @ coords))


def _fused_confidence(members: Sequence[_Member], n_models: int, count_scaling: bool) -> float:
    confs = np.array([m.det.confidence for m in members])
    if np.all(confs == confs[0]):
        conf = float(confs[0])
    else:
        w = np.array([m.weight for m in members], dtype=float)
        conf = float(w @ confs / w.sum())
    if count_scaling:
        conf *= min(1.0, len({m.model for m in members}) / n_models)
    return min(max(conf, 0.0), 1.0)


def _fuse_cell(members: List[_Member], cluster_iou: float) -> List[_Cluster]:
    clusters: List[_Cluster] = []
    for m in members:
        for c in clusters:
            # one box per model per cluster: a single model's output is never merged with itself
            if any(x.model == m.model for x in c.members):
                continue
            if iou(c.box, m.det.bbox) >= cluster_iou:
                c.add(m)
                break
        else:
            c = _Cluster()
            c.add(m)
            clusters.append(c)
    return clusters


def fuse_weighted(outputs: Sequence[ModelOutput], config: FusionConfig = FusionConfig()) -> List[DetectionRecord]:
    """Weighted box fusion across models, per (video, frame, class) cell.

    Detections below ``confidence_floor`` are dropped. The rest are visited
    by descending confidence (ties by model id, then input order) and join
    the first cluster whose running fused box overlaps at ``cluster_iou`` or
    more and holds no box from the same model. A cluster's box is the
    ``weight * confidence`` weighted mean of its members; its confidence is
    the model-weighted mean confidence, times the share of models that
    contributed when ``count_scaling`` is on.

    Output is sorted by (video, frame, class, descending confidence).
    """
    if not outputs:
        raise ValueError("need at least one model output")
    ordered = sorted(range(len(outputs)), key=lambda i: (outputs[i].model_id, i))
    cells: Dict[tuple, List[Tuple[tuple, _Member]]] = defaultdict(list)
    for rank, i in enumerate(ordered):
        out = outputs[i]
        for j, d in enumerate(out.detections):
            if d.confidence < config.confidence_floor:
                continue
            cells[_cell_key(d)].append(((-d.confidence, rank, j), _Member(d, rank, out.weight)))
    fused = []
    for key in sorted(cells):
        members = [m for _, m in sorted(cells[key], key=lambda t: t[0])]
        for c in _fuse_cell(members, config.cluster_iou):
            first = c.members[0].det
            conf = _fused_confidence(c.members, len(outputs), config.count_scaling)
            fused.append(DetectionRecord(first.video_id, first.frame, c.box, first.class_id, conf))
    return sorted(fused, key=_output_order)


def fuse(outputs: Sequence[ModelOutput], config: FusionConfig = FusionConfig()) -> List[DetectionRecord]:
    """Dispatch on ``config.method``; ``nms`` pools every model's detections before suppressing."""
    if config.method == "nms":
        pooled = [d for o in outputs for d in o.detections if d.confidence >= config.confidence_floor]
        return nms_all(pooled, config.cluster_iou)
    return fuse_weighted(outputs, config)


def unrotate_hull(hull: BoundingBox, angle: float, geometry: FrameGeometry) -> BoundingBox:
    """Recover the box whose rotation hull is ``hull``.

    A w x h box rotated by t has hull sides ``w|cos t| + h|sin t|`` and
    ``w|sin t| + h|cos t|``; solving that system undoes the hull growth. Sides
    that come out below one pixel (a hull no box could produce) are floored
    at one pixel.
    """
    theta = math.radians(angle)
    c, s = abs(math.cos(theta)), abs(math.sin(theta))
    det = c * c - s * s
    w = (hull.width * c - hull.height * s) / det
    h = (hull.height * c - hull.width * s) / det
    w, h = max(w, 1.0), max(h, 1.0)
    hx, hy = hull.center
    cx, cy = geometry.width / 2.0, geometry.height / 2.0
    back = -theta
    x = cx + (hx - cx) * math.cos(back) - (hy - cy) * math.sin(back)
    y = cy + (hx - cx) * math.sin(back) + (hy - cy) * math.cos(back)
    return BoundingBox(x - w / 2, y - h / 2, w, h)


@dataclass(frozen=True)
class TtaTransform:
    spec: AugmentSpec
    geometry: FrameGeometry = DEFAULT_GEOMETRY

    def __post_init__(self):
        if self.spec.kind == "rotation" and self.spec.angle is None:
            raise ValueError("TTA rotation needs a fixed angle")

    def forward(self, box: BoundingBox) -> Optional[BoundingBox]:
        return transform_box(box, self.spec, self.geometry)

    def inverse(self, box: BoundingBox) -> BoundingBox:
        """Map a box from augmented coordinates back to the original frame (unclipped)."""
        if self.spec.kind == "horizontal_flip":
            return flip_box(box, self.geometry)
        if not self.spec.angle:
            return box
        return unrotate_hull(box, self.spec.angle, self.geometry)


class TtaResult(NamedTuple):
    detections: List[DetectionRecord]
    dropped: int


def _inside_part(box: BoundingBox, geometry: FrameGeometry) -> Optional[BoundingBox]:
    x1, y1 = max(box.left, 0.0), max(box.top, 0.0)
    x2, y2 = min(box.right, float(geometry.width)), min(box.bottom, float(geometry.height))
    if x2 <= x1 or y2 <= y1:
        return None
    if (x1, y1, x2, y2) == box.as_xyxy():
        return box
    return BoundingBox.from_xyxy(x1, y1, x2, y2)


def tta_merge(
    original: ModelOutput,
    augmented: Sequence[Tuple[TtaTransform, ModelOutput]] = (),
    config: FusionConfig = FusionConfig(),
) -> TtaResult:
    """Map augmented-view detections back to the original frame and fuse them with the original.

    Views are not independent models, so count scaling is always off.
    Detections whose inverse box falls wholly outside the frame are dropped
    and counted; partly outside boxes are clipped.
    """
    dropped = 0
    outputs = [original]
    for k, (transform, out) in enumerate(augmented):
        mapped = []
        for d in out.detections:
            box = _inside_part(transform.inverse(d.bbox), transform.geometry)
            if box is None:
                dropped += 1
                continue
            mapped.append(DetectionRecord(d.video_id, d.frame, box, d.class_id, d.confidence))
        outputs.append(ModelOutput(f"{out.model_id}#tta{k}", mapped, out.weight))
    cfg = FusionConfig(config.method, config.cluster_iou, config.confidence_floor, count_scaling=False)
    return TtaResult(fuse(outputs, cfg), dropped)


def ensemble_files(
    paths: Sequence,
    config: FusionConfig = FusionConfig(),
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
    weights: Optional[Sequence[float]] = None,
) -> str:
    """Parse detection files, fuse them and return the serialized result.

    Raises:
        ParseError: carrying the path of the file that failed.
    """
    if not paths:
        raise ValueError("need at least one detection file")
    weights = list(weights) if weights is not None else [1.0] * len(paths)
    if len(weights) != len(paths):
        raise ValueError("one weight per input file is required")
    outputs = []
    for i, (path, w) in enumerate(zip(paths, weights)):
        path = Path(path)
        try:
            dets = parse_detections(path.read_text(encoding="utf-8"), geometry)
        except ParseError as exc:
            raise exc.with_path(str(path)) from None
        outputs.append(ModelOutput(f"{i:04d}", dets, w))
    return serialize_detections(fuse(outputs, config))
