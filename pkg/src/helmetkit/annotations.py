"""Ground-truth and detection records for the helmet-violation track.

Ground-truth lines are ``video_id,frame,track_id,bb_left,bb_top,bb_width,bb_height,class``
and detection lines are ``video_id,frame,bb_left,bb_top,bb_width,bb_height,class,confidence``.
Fields may be separated by commas or runs of whitespace on read; commas are
always emitted.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

CLASS_NAMES: Tuple[str, ...] = (
    "motorbike",
    "DHelmet",
    "DNoHelmet",
    "P1Helmet",
    "P1NoHelmet",
    "P2Helmet",
    "P2NoHelmet",
)
CLASS_IDS: Tuple[int, ...] = tuple(range(1, len(CLASS_NAMES) + 1))
NUM_CLASSES = len(CLASS_NAMES)

MAX_VIDEO_ID = 100
MODES = ("strict", "lenient", "raw")

# slack for float round-off when testing frame containment
_EPS = 1e-9
_SPLIT = re.compile(r"[,\s]+")


def class_name(class_id: int) -> str:
    if class_id not in CLASS_IDS:
        raise ValueError(f"class id {class_id} outside 1..{NUM_CLASSES}")
    return CLASS_NAMES[class_id - 1]


def class_id_of(name: str) -> int:
    try:
        return CLASS_NAMES.index(name) + 1
    except ValueError:
        raise ValueError(f"unknown class name {name!r}") from None


def format_number(value: float) -> str:
    """Shortest text that parses back to ``value``; integral values print as integers."""
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle given by its upper-left corner and size.

    Construction does not validate; use :meth:`is_valid` or the parsers.
    """

    left: float
    top: float
    width: float
    height: float

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return self.left + self.width / 2.0, self.top + self.height / 2.0

    def is_valid(self) -> bool:
        return self.width > 0 and self.height > 0

    def within(self, geometry: "FrameGeometry") -> bool:
        return (
            self.left >= -_EPS
            and self.top >= -_EPS
            and self.right <= geometry.width + _EPS
            and self.bottom <= geometry.height + _EPS
        )

    def as_xyxy(self) -> Tuple[float, float, float, float]:
        return self.left, self.top, self.right, self.bottom

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class FrameGeometry:
    width: int = 1920
    height: int = 1080
    fps: float = 10.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.fps <= 0:
            raise ValueError(f"frame geometry must be positive, got {self}")


DEFAULT_GEOMETRY = FrameGeometry()


@dataclass(frozen=True)
class GroundTruthRecord:
    video_id: int
    frame: int
    track_id: int
    bbox: BoundingBox
    class_id: int
    # set when lenient parsing clipped the box to the frame
    clipped: bool = field(default=False, compare=False, repr=False)

    @property
    def key(self) -> Tuple[int, int, int]:
        return self.video_id, self.frame, self.track_id


@dataclass(frozen=True)
class DetectionRecord:
    video_id: int
    frame: int
    bbox: BoundingBox
    class_id: int
    confidence: float
    clipped: bool = field(default=False, compare=False, repr=False)


Record = Union[GroundTruthRecord, DetectionRecord]


class ParseError(ValueError):
    """A line of an annotation file could not be turned into a record."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.reason = message
        self.line = line
        self.path = path
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        if self.path is not None:
            where.append(str(self.path))
        if self.line is not None:
            where.append(f"line {self.line}")
        prefix = ":".join(where)
        return f"{prefix}: {self.reason}" if prefix else self.reason

    def with_path(self, path: str) -> "ParseError":
        return ParseError(self.reason, self.line, str(path))


def _int_field(token: str, name: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        pass
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{name} is not a number: {token!r}", lineno) from None
    if not value.is_integer():
        raise ParseError(f"{name} must be an integer, got {token!r}", lineno)
    return int(value)


def _real_field(token: str, name: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{name} is not a number: {token!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"{name} is not finite: {token!r}", lineno)
    return value


def clip_box(box: BoundingBox, geometry: FrameGeometry) -> BoundingBox:
    """Clip ``box`` to the frame. Boxes already inside are returned unchanged."""
    if box.within(geometry):
        return box
    left, top, width, height = box.left, box.top, box.width, box.height
    if left < 0:
        width, left = left + width, 0.0
    if top < 0:
        height, top = top + height, 0.0
    if left + width > geometry.width + _EPS:
        width = geometry.width - left
    if top + height > geometry.height + _EPS:
        height = geometry.height - top
    return BoundingBox(left, top, width, height)


def _checked_box(box: BoundingBox, geometry: FrameGeometry, mode: str, lineno: int):
    if mode == "raw":
        return box, False
    if not box.width > 0:
        raise ParseError(f"non-positive width {format_number(box.width)}", lineno)
    if not box.height > 0:
        raise ParseError(f"non-positive height {format_number(box.height)}", lineno)
    if box.within(geometry):
        return box, False
    if mode == "strict":
        raise ParseError("box exceeds frame bounds", lineno)
    clipped = clip_box(box, geometry)
    if not clipped.is_valid():
        raise ParseError("box lies entirely outside the frame", lineno)
    return clipped, True


def _check_ids(video_id: int, frame: int, class_id: int, mode: str, lineno: int):
    if mode == "raw":
        return
    if not 1 <= video_id <= MAX_VIDEO_ID:
        raise ParseError(f"video id {video_id} outside 1..{MAX_VIDEO_ID}", lineno)
    if frame < 1:
        raise ParseError(f"frame {frame} must be >= 1", lineno)
    if class_id not in CLASS_IDS:
        raise ParseError(f"class id {class_id} outside 1..{NUM_CLASSES}", lineno)


def _lines(text: str) -> Iterable[Tuple[int, List[str]]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        yield lineno, _SPLIT.split(stripped)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def parse_ground_truth(
    text: str, geometry: FrameGeometry = DEFAULT_GEOMETRY, mode: str = "lenient"
) -> List[GroundTruthRecord]:
    """Parse ground-truth lines into records, in file order.

    Args:
        text: file contents; blank lines are skipped, LF or CRLF endings.
        geometry: frame size used for the containment check.
        mode: ``"strict"`` rejects boxes that leave the frame, ``"lenient"``
            clips them and sets ``clipped``, ``"raw"`` only checks the field
            layout so that :func:`validate` can inspect bad records.

    Raises:
        ParseError: with the 1-based line number of the offending line.
    """
    _check_mode(mode)
    records = []
    for lineno, tokens in _lines(text):
        if len(tokens) != 8:
            raise ParseError(f"expected 8 fields, got {len(tokens)}", lineno)
        video_id = _int_field(tokens[0], "video id", lineno)
        frame = _int_field(tokens[1], "frame", lineno)
        track_id = _int_field(tokens[2], "track id", lineno)
        box = BoundingBox(*(_real_field(t, n, lineno) for t, n in zip(tokens[3:7], ("left", "top", "width", "height"))))
        class_id = _int_field(tokens[7], "class id", lineno)
        _check_ids(video_id, frame, class_id, mode, lineno)
        if mode != "raw" and track_id < 0:
            raise ParseError(f"track id {track_id} must be >= 0", lineno)
        box, clipped = _checked_box(box, geometry, mode, lineno)
        records.append(GroundTruthRecord(video_id, frame, track_id, box, class_id, clipped))
    return records


def parse_detections(
    text: str, geometry: FrameGeometry = DEFAULT_GEOMETRY, mode: str = "lenient"
) -> List[DetectionRecord]:
    """Parse detection (submission) lines; same modes as :func:`parse_ground_truth`."""
    _check_mode(mode)
    records = []
    for lineno, tokens in _lines(text):
        if len(tokens) != 8:
            raise ParseError(f"expected 8 fields, got {len(tokens)}", lineno)
        video_id = _int_field(tokens[0], "video id", lineno)
        frame = _int_field(tokens[1], "frame", lineno)
        box = BoundingBox(*(_real_field(t, n, lineno) for t, n in zip(tokens[2:6], ("left", "top", "width", "height"))))
        class_id = _int_field(tokens[6], "class id", lineno)
        confidence = _real_field(tokens[7], "confidence", lineno)
        _check_ids(video_id, frame, class_id, mode, lineno)
        if mode != "raw" and not 0.0 <= confidence <= 1.0:
            raise ParseError(f"confidence {tokens[7]} out of range [0, 1]", lineno)
        box, clipped = _checked_box(box, geometry, mode, lineno)
        records.append(DetectionRecord(video_id, frame, box, class_id, confidence, clipped))
    return records


def _box_fields(box: BoundingBox) -> List[str]:
    return [format_number(v) for v in (box.left, box.top, box.width, box.height)]


def serialize_detections(records: Sequence[DetectionRecord]) -> str:
    lines = []
    for r in records:
        fields = [str(r.video_id), str(r.frame), *_box_fields(r.bbox), str(r.class_id), format_number(r.confidence)]
        lines.append(",".join(fields))
    return "".join(line + "\n" for line in lines)


def serialize_ground_truth(records: Sequence[GroundTruthRecord]) -> str:
    lines = []
    for r in records:
        fields = [str(r.video_id), str(r.frame), str(r.track_id), *_box_fields(r.bbox), str(r.class_id)]
        lines.append(",".join(fields))
    return "".join(line + "\n" for line in lines)


def class_histogram(records: Iterable[Record]) -> Dict[int, int]:
    """Instance count per class id; every class 1..7 is present, zero allowed."""
    counts = Counter(r.class_id for r in records)
    return {c: counts.get(c, 0) for c in CLASS_IDS}


def format_histogram(histogram: Dict[int, int]) -> str:
    return "".join(f"{class_name(c)}\t{histogram.get(c, 0)}\n" for c in CLASS_IDS)


def reconcile_labels(
    predictions: Sequence[DetectionRecord],
    manual_overrides: Sequence[GroundTruthRecord],
    confidence_floor: float = 0.5,
) -> List[GroundTruthRecord]:
    """Merge model predictions with manually corrected labels.

    Frames that carry any manual override keep only the overrides. On every
    other frame, predictions at or above ``confidence_floor`` become labels,
    numbered with track ids 0, 1, ... in prediction order.
    """
    if not 0.0 <= confidence_floor <= 1.0:
        raise ValueError(f"confidence_floor must lie in [0, 1], got {confidence_floor}")
    overridden = {(r.video_id, r.frame) for r in manual_overrides}
    out: List[GroundTruthRecord] = list(manual_overrides)
    next_track: Dict[Tuple[int, int], int] = defaultdict(int)
    for det in predictions:
        key = (det.video_id, det.frame)
        if key in overridden or det.confidence < confidence_floor:
            continue
        out.append(GroundTruthRecord(det.video_id, det.frame, next_track[key], det.bbox, det.class_id))
        next_track[key] += 1
    out.sort(key=lambda r: (r.video_id, r.frame))
    return out


@dataclass
class Violation:
    index: int
    kind: str
    message: str


@dataclass
class ValidationReport:
    counts: Dict[str, int]
    diagnostics: List[Violation]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def ok(self) -> bool:
        return self.total == 0

    def render(self) -> str:
        lines = [f"violations: {self.total}"]
        lines += [f"{kind}: {n}" for kind, n in sorted(self.counts.items())]
        lines += [f"record {v.index + 1}: {v.kind}: {v.message}" for v in self.diagnostics]
        return "\n".join(lines) + "\n"


VIOLATION_KINDS = ("geometry", "out_of_frame", "duplicate_key", "class_id", "confidence")


def validate(records: Sequence[Record], geometry: FrameGeometry = DEFAULT_GEOMETRY) -> ValidationReport:
    """Report every problem in ``records`` without modifying them.

    Kinds: ``geometry`` (non-positive width/height), ``out_of_frame``,
    ``duplicate_key`` (repeated (video, frame, track) in ground truth),
    ``class_id`` and ``confidence``.
    """
    diagnostics: List[Violation] = []
    seen: Dict[Tuple[int, int, int], int] = {}
    for i, r in enumerate(records):
        box = r.bbox
        if not box.is_valid():
            diagnostics.append(
                Violation(i, "geometry", f"non-positive size {format_number(box.width)}x{format_number(box.height)}")
            )
        elif not box.within(geometry):
            diagnostics.append(Violation(i, "out_of_frame", f"box {_box_fields(box)} exceeds {geometry.width}x{geometry.height}"))
        if r.class_id not in CLASS_IDS:
            diagnostics.append(Violation(i, "class_id", f"class id {r.class_id} outside 1..{NUM_CLASSES}"))
        if isinstance(r, GroundTruthRecord):
            if r.key in seen:
                diagnostics.append(Violation(i, "duplicate_key", f"key {r.key} repeats record {seen[r.key] + 1}"))
            else:
                seen[r.key] = i
        elif not 0.0 <= r.confidence <= 1.0:
            diagnostics.append(Violation(i, "confidence", f"confidence {r.confidence} outside [0, 1]"))
    counts = {kind: 0 for kind in VIOLATION_KINDS}
    for v in diagnostics:
        counts[v.kind] += 1
    return ValidationReport(counts, diagnostics)


def frames_of(records: Iterable[Record]) -> List[Tuple[int, int]]:
    """Distinct (video, frame) keys, sorted."""
    return sorted({(r.video_id, r.frame) for r in records})


def with_bbox(record: Record, bbox: BoundingBox) -> Record:
    return replace(record, bbox=bbox)
