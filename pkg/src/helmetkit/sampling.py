"""Seeded frame selection, train/val splitting and class balancing over annotation records.

Nothing here touches pixels: frames are (video, frame) references and
augmentation only transforms box geometry.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .annotations import (
    CLASS_IDS,
    DEFAULT_GEOMETRY,
    BoundingBox,
    FrameGeometry,
    GroundTruthRecord,
    format_number,
)
from .metrics import iou

MAX_ROTATION = 15.0
DEFAULT_RANDOM_COUNT = 4834
DEFAULT_KEEP_BACKGROUND = 0.05


class FrameRef(NamedTuple):
    video_id: int
    frame: int


def frame_of(record) -> FrameRef:
    return FrameRef(record.video_id, record.frame)


@dataclass(frozen=True)
class SplitSpec:
    train_videos: frozenset
    val_videos: frozenset

    def __post_init__(self):
        object.__setattr__(self, "train_videos", frozenset(self.train_videos))
        object.__setattr__(self, "val_videos", frozenset(self.val_videos))
        overlap = self.train_videos & self.val_videos
        if overlap:
            raise ValueError(f"videos in both train and val: {sorted(overlap)}")
        outside = {v for v in self.train_videos | self.val_videos if not 1 <= v <= 100}
        if outside:
            raise ValueError(f"video ids outside 1..100: {sorted(outside)}")

    @classmethod
    def default(cls) -> "SplitSpec":
        return cls(frozenset(range(1, 91)) | {100}, frozenset(range(91, 100)))


@dataclass(frozen=True)
class AugmentSpec:
    """``kind`` is ``horizontal_flip`` or ``rotation``.

    A rotation with ``angle=None`` draws a uniform angle in [-15, 15] per
    frame from the plan's seed.
    """

    kind: str
    angle: Optional[float] = None

    def __post_init__(self):
        if self.kind == "horizontal_flip":
            if self.angle not in (None, 0, 0.0):
                raise ValueError("horizontal_flip takes no angle")
            object.__setattr__(self, "angle", None)
        elif self.kind == "rotation":
            if self.angle is not None and not -MAX_ROTATION <= self.angle <= MAX_ROTATION:
                raise ValueError(f"rotation angle {self.angle} outside [-15, 15] degrees")
        else:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "rotation":
            return f"rotation {'random' if self.angle is None else format_number(self.angle)}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "AugmentSpec":
        """``flip``, ``rot`` (random angle) or ``rot<deg>`` such as ``rot15`` / ``rot-15``."""
        text = text.strip()
        if text in ("flip", "horizontal_flip", "fliplr"):
            return cls("horizontal_flip")
        if text.startswith("rot"):
            rest = text[3:].lstrip(":=")
            return cls("rotation", float(rest) if rest else None)
        raise ValueError(f"cannot parse augmentation {text!r}")


@dataclass
class AugmentedFrame:
    source: FrameRef
    spec: AugmentSpec  # resolved: rotations carry their drawn angle
    records: Tuple[GroundTruthRecord, ...]
    dropped: int = 0


@dataclass
class Stage:
    name: str
    before: int
    after: int
    note: str = ""

    @property
    def dropped(self) -> int:
        return self.before - self.after


@dataclass
class SamplingPlan:
    kept_frames: List[FrameRef]
    augmented: List[AugmentedFrame] = field(default_factory=list)
    dropped: List[Tuple[FrameRef, str]] = field(default_factory=list)
    seed: int = 0
    provenance: List[Stage] = field(default_factory=list)

    def augmented_records(self) -> List[GroundTruthRecord]:
        return [r for a in self.augmented for r in a.records]


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, *salt])


def _by_video(frames: Iterable[FrameRef]) -> Dict[int, List[FrameRef]]:
    groups: Dict[int, List[FrameRef]] = defaultdict(list)
    for f in frames:
        groups[f.video_id].append(f)
    return groups


def uniform_sample(frames: Sequence[FrameRef], source_fps: float = 10.0, target_fps: float = 2.0) -> List[FrameRef]:
    """Keep every ``round(source_fps / target_fps)``-th frame of each video.

    Position counts within each video's frames in ascending frame order, so
    for frames 1..N this keeps frames with ``(frame - 1) % stride == 0``.
    """
    if not 0 < target_fps <= source_fps:
        raise ValueError(f"target_fps must lie in (0, {source_fps}], got {target_fps}")
    stride = max(1, round(source_fps / target_fps))
    keep = set()
    for video_frames in _by_video(frames).values():
        ordered = sorted(set(video_frames), key=lambda f: f.frame)
        keep.update(ordered[::stride])
    return [f for f in frames if f in keep]


def random_sample(frames: Sequence[FrameRef], count: int = DEFAULT_RANDOM_COUNT, seed: int = 0) -> List[FrameRef]:
    """Uniform random subset of exactly ``count`` frames, sorted by (video, frame)."""
    if count > len(frames):
        raise ValueError(f"cannot sample {count} frames from {len(frames)}")
    if count < 0:
        raise ValueError("count must be non-negative")
    picks = _rng(seed).choice(len(frames), size=count, replace=False)
    return sorted(frames[int(i)] for i in picks)


def _ceil_fraction(fraction: float, n: int) -> int:
    # 0.05 * 100 must give 5, not 6 through representation error
    return min(n, math.ceil(round(fraction * n, 9)))


def discard_background(
    frames: Sequence[FrameRef],
    annotated: Set[FrameRef],
    keep_fraction: float = DEFAULT_KEEP_BACKGROUND,
    seed: int = 0,
) -> List[FrameRef]:
    """Keep every annotated frame and a seeded ``ceil(keep_fraction * n)`` of the n background frames."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
    background = [i for i, f in enumerate(frames) if f not in annotated]
    n_keep = _ceil_fraction(keep_fraction, len(background))
    if n_keep == len(background):
        return list(frames)
    chosen = set(_rng(seed, 1).choice(background, size=n_keep, replace=False).tolist())
    return [f for i, f in enumerate(frames) if f in annotated or i in chosen]


def annotation_similarity(a: Sequence[GroundTruthRecord], b: Sequence[GroundTruthRecord]) -> float:
    """Mean over all boxes of both frames of the best IoU with a same-class box of the other frame.

    Two empty frames are identical (1.0); one empty frame against a
    non-empty one scores 0.
    """
    if not a and not b:
        return 1.0
    scores = []
    for mine, theirs in ((a, b), (b, a)):
        for r in mine:
            best = max((iou(r.bbox, o.bbox) for o in theirs if o.class_id == r.class_id), default=0.0)
            scores.append(best)
    return float(np.mean(scores))


def _records_by_frame(records: Iterable[GroundTruthRecord]) -> Dict[FrameRef, List[GroundTruthRecord]]:
    groups: Dict[FrameRef, List[GroundTruthRecord]] = defaultdict(list)
    for r in records:
        groups[frame_of(r)].append(r)
    return groups


def near_duplicate_filter(
    frames: Sequence[FrameRef],
    threshold: float = 0.95,
    similarity: Optional[Mapping[Tuple[int, int, int], float]] = None,
    records: Sequence[GroundTruthRecord] = (),
) -> List[FrameRef]:
    """Drop frames too similar to the last kept frame of the same video.

    Args:
        frames: candidate frames; each video is scanned in ascending frame order.
        threshold: a frame is dropped when its similarity to the most recent
            kept frame is at least this value.
        similarity: optional map ``(video, frame_a, frame_b) -> [0, 1]`` with
            ``frame_a`` the kept frame; a missing pair counts as 0.
        records: annotations for the default, annotation-based similarity,
            used when ``similarity`` is None.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if similarity is not None:
        for key, value in similarity.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"similarity {value} for {key} outside [0, 1]")
        score = lambda v, fa, fb: similarity.get((v, fa, fb), 0.0)  # noqa: E731
    else:
        by_frame = _records_by_frame(records)
        score = lambda v, fa, fb: annotation_similarity(  # noqa: E731
            by_frame.get(FrameRef(v, fa), []), by_frame.get(FrameRef(v, fb), [])
        )
    keep = set()
    for video, video_frames in _by_video(frames).items():
        last = None
        for f in sorted(set(video_frames), key=lambda f: f.frame):
            if last is not None and score(video, last.frame, f.frame) >= threshold:
                continue
            keep.add(f)
            last = f
    return [f for f in frames if f in keep]


def read_similarity_file(text: str) -> Dict[Tuple[int, int, int], float]:
    """Parse ``video frame_a frame_b similarity`` lines."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.replace(",", " ").split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        value = float(parts[3])
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"line {lineno}: similarity {value} outside [0, 1]")
        out[(int(parts[0]), int(parts[1]), int(parts[2]))] = value
    return out


def split_train_val(frames: Sequence[FrameRef], spec: Optional[SplitSpec] = None) -> Tuple[List[FrameRef], List[FrameRef]]:
    spec = spec or SplitSpec.default()
    train, val = [], []
    for f in frames:
        if f.video_id in spec.train_videos:
            train.append(f)
        elif f.video_id in spec.val_videos:
            val.append(f)
        else:
            raise ValueError(f"video {f.video_id} is in neither the train nor the val set")
    return train, val


def rotate_corners(box: BoundingBox, angle: float, geometry: FrameGeometry) -> np.ndarray:
    """The four corners of ``box`` rotated by ``angle`` degrees about the frame center, shape (4, 2)."""
    cx, cy = geometry.width / 2.0, geometry.height / 2.0
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    xs = np.array([box.left, box.right, box.right, box.left]) - cx
    ys = np.array([box.top, box.top, box.bottom, box.bottom]) - cy
    return np.stack([cx + xs * c - ys * s, cy + xs * s + ys * c], axis=1)


def rotation_hull(box: BoundingBox, angle: float, geometry: FrameGeometry) -> BoundingBox:
    """Axis-aligned hull of the rotated box, not clipped."""
    corners = rotate_corners(box, angle, geometry)
    x1, y1 = corners.min(axis=0)
    x2, y2 = corners.max(axis=0)
    return BoundingBox(float(x1), float(y1), float(x2 - x1), float(y2 - y1))


def flip_box(box: BoundingBox, geometry: FrameGeometry) -> BoundingBox:
    return BoundingBox(geometry.width - box.width - box.left, box.top, box.width, box.height)


def _clip_or_drop(hull: BoundingBox, geometry: FrameGeometry) -> Optional[BoundingBox]:
    cx, cy = hull.center
    if not (0 <= cx <= geometry.width and 0 <= cy <= geometry.height):
        return None
    x1, y1 = max(hull.left, 0.0), max(hull.top, 0.0)
    x2, y2 = min(hull.right, float(geometry.width)), min(hull.bottom, float(geometry.height))
    if x2 - x1 <= 1 or y2 - y1 <= 1:
        return None
    if (x1, y1, x2, y2) == hull.as_xyxy():
        return hull
    return BoundingBox.from_xyxy(x1, y1, x2, y2)


def transform_box(box: BoundingBox, spec: AugmentSpec, geometry: FrameGeometry = DEFAULT_GEOMETRY) -> Optional[BoundingBox]:
    """Apply ``spec`` to a box; ``None`` when a rotated box leaves the frame or collapses."""
    if spec.kind == "horizontal_flip":
        return flip_box(box, geometry)
    if spec.angle is None:
        raise ValueError("rotation angle must be resolved before transforming boxes")
    if spec.angle == 0:
        return box
    return _clip_or_drop(rotation_hull(box, spec.angle, geometry), geometry)


DEFAULT_MINORITY_FRACTION = 0.2


def minority_classes(histogram: Mapping[int, int], fraction: float = DEFAULT_MINORITY_FRACTION) -> Set[int]:
    """Classes whose count is below ``fraction`` of the largest class count.

    The default of 0.2 separates P1Helmet, P1NoHelmet, P2Helmet and
    P2NoHelmet (at most 15% of motorbike) from DNoHelmet (23%) on the
    challenge's training counts.
    """
    top = max(histogram.values(), default=0)
    return {c for c in CLASS_IDS if histogram.get(c, 0) < fraction * top}


def oversample_plan(
    records: Sequence[GroundTruthRecord],
    histogram: Optional[Mapping[int, int]] = None,
    minority: Optional[Set[int]] = None,
    specs: Sequence[AugmentSpec] = (AugmentSpec("horizontal_flip"),),
    seed: int = 0,
    geometry: FrameGeometry = DEFAULT_GEOMETRY,
) -> SamplingPlan:
    """Augment every frame holding a minority-class box, once per spec, all boxes together.

    Boxes the transform drops are counted on each :class:`AugmentedFrame`;
    the plan's provenance records the totals.
    """
    if minority is None:
        if histogram is None:
            from .annotations import class_histogram

            histogram = class_histogram(records)
        minority = minority_classes(histogram)
    by_frame = _records_by_frame(records)
    frames = sorted(by_frame)
    rng = _rng(seed, 2)
    augmented = []
    dropped_boxes = 0
    for f in frames:
        boxes = by_frame[f]
        if not any(r.class_id in minority for r in boxes):
            continue
        for spec in specs:
            resolved = spec
            if spec.kind == "rotation" and spec.angle is None:
                resolved = AugmentSpec("rotation", float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)))
            out, dropped = [], 0
            for r in boxes:
                new_box = transform_box(r.bbox, resolved, geometry)
                if new_box is None:
                    dropped += 1
                else:
                    out.append(GroundTruthRecord(r.video_id, r.frame, r.track_id, new_box, r.class_id))
            dropped_boxes += dropped
            augmented.append(AugmentedFrame(f, resolved, tuple(out), dropped))
    n_minority_frames = len({a.source for a in augmented})
    stage = Stage(
        "oversample",
        len(frames),
        len(frames) + len(augmented),
        f"{n_minority_frames} minority frames x {len(specs)} specs, {dropped_boxes} boxes dropped",
    )
    return SamplingPlan(frames, augmented, [], seed, [stage])


def undersample_plan(
    records: Sequence[GroundTruthRecord],
    caps: Mapping[int, int],
    seed: int = 0,
    frames: Optional[Sequence[FrameRef]] = None,
) -> SamplingPlan:
    """Remove frames of over-represented classes until each capped class is at or below its cap.

    Only frames whose boxes all belong to classes currently over their cap
    are removable, so a frame with any other class is never touched.
    Candidates are tried in order of decreasing annotation similarity to the
    previous frame of their video, ties broken by a seeded shuffle.
    """
    for c, cap in caps.items():
        if cap <= 0:
            raise ValueError(f"cap for class {c} must be positive, got {cap}")
    by_frame = _records_by_frame(records)
    all_frames = list(frames) if frames is not None else sorted(by_frame)
    counts = defaultdict(int)
    for r in records:
        counts[r.class_id] += 1

    def over(c):
        return c in caps and counts[c] > caps[c]

    similarity = {}
    for video_frames in _by_video(all_frames).values():
        ordered = sorted(set(video_frames), key=lambda f: f.frame)
        for prev, cur in zip(ordered, ordered[1:]):
            similarity[cur] = annotation_similarity(by_frame.get(prev, []), by_frame.get(cur, []))
    tie = _rng(seed, 3).permutation(len(all_frames))
    order = sorted(range(len(all_frames)), key=lambda i: (-similarity.get(all_frames[i], 0.0), tie[i]))

    removed: Set[FrameRef] = set()
    for i in order:
        if not any(over(c) for c in caps):
            break
        f = all_frames[i]
        boxes = by_frame.get(f, [])
        # counts only fall, so a frame that is not removable now never becomes removable
        if boxes and all(over(r.class_id) for r in boxes):
            removed.add(f)
            for r in boxes:
                counts[r.class_id] -= 1
    kept = [f for f in all_frames if f not in removed]
    dropped = [(f, "undersample") for f in all_frames if f in removed]
    stage = Stage("undersample", len(all_frames), len(kept))
    return SamplingPlan(kept, [], dropped, seed, [stage])


def records_in(records: Sequence[GroundTruthRecord], frames: Iterable[FrameRef]) -> List[GroundTruthRecord]:
    wanted = set(frames)
    return [r for r in records if frame_of(r) in wanted]


def write_manifest(plan: SamplingPlan) -> str:
    """Line-oriented plan: ``KEEP video frame``, ``AUG video frame kind angle``, ``DROP video frame reason``."""
    lines = [f"# seed {plan.seed}"]
    for s in plan.provenance:
        lines.append(f"# stage {s.name} {s.before} {s.after}" + (f" {s.note}" if s.note else ""))
    lines += [f"KEEP {f.video_id} {f.frame}" for f in plan.kept_frames]
    for a in plan.augmented:
        angle = "0" if a.spec.angle is None else format_number(a.spec.angle)
        lines.append(f"AUG {a.source.video_id} {a.source.frame} {a.spec.kind} {angle}")
    lines += [f"DROP {f.video_id} {f.frame} {reason}" for f, reason in plan.dropped]
    return "\n".join(lines) + "\n"


def read_manifest(text: str) -> SamplingPlan:
    """Inverse of :func:`write_manifest`; augmented entries come back without records."""
    plan = SamplingPlan([])
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) >= 3 and parts[1] == "seed":
                plan.seed = int(parts[2])
            elif len(parts) >= 5 and parts[1] == "stage":
                plan.provenance.append(Stage(parts[2], int(parts[3]), int(parts[4]), " ".join(parts[5:])))
            continue
        tag = parts[0]
        if tag == "KEEP" and len(parts) == 3:
            plan.kept_frames.append(FrameRef(int(parts[1]), int(parts[2])))
        elif tag == "AUG" and len(parts) == 5:
            kind = parts[3]
            spec = AugmentSpec(kind, float(parts[4]) if kind == "rotation" else None)
            plan.augmented.append(AugmentedFrame(FrameRef(int(parts[1]), int(parts[2])), spec, ()))
        elif tag == "DROP" and len(parts) >= 4:
            plan.dropped.append((FrameRef(int(parts[1]), int(parts[2])), " ".join(parts[3:])))
        else:
            raise ValueError(f"line {lineno}: malformed manifest entry {line!r}")
    return plan
