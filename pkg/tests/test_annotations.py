import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helmetkit.annotations import (
    CLASS_NAMES,
    BoundingBox,
    DetectionRecord,
    FrameGeometry,
    GroundTruthRecord,
    ParseError,
    class_histogram,
    class_id_of,
    class_name,
    clip_box,
    format_number,
    parse_detections,
    parse_ground_truth,
    reconcile_labels,
    serialize_detections,
    serialize_ground_truth,
    validate,
)

GEOM = FrameGeometry()


def random_detections(rng, n):
    out = []
    for _ in range(n):
        w = float(rng.uniform(0.5, 400))
        h = float(rng.uniform(0.5, 400))
        left = float(rng.uniform(0, 1920 - w))
        top = float(rng.uniform(0, 1080 - h))
        if rng.random() < 0.3:
            left, top, w, h = float(int(left)), float(int(top)), float(max(1, int(w))), float(max(1, int(h)))
        out.append(
            DetectionRecord(
                int(rng.integers(1, 101)),
                int(rng.integers(1, 5000)),
                BoundingBox(left, top, w, h),
                int(rng.integers(1, 8)),
                float(rng.choice([0.0, 1.0, rng.random()])),
            )
        )
    return out


class TestClasses:
    def test_bijection(self):
        assert [class_name(i) for i in range(1, 8)] == list(CLASS_NAMES)
        assert all(class_id_of(n) == i for i, n in enumerate(CLASS_NAMES, start=1))

    @pytest.mark.parametrize("bad", [0, 8, -1])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            class_name(bad)


class TestParseGroundTruth:
    def test_field_mapping(self):
        (r,) = parse_ground_truth("5,12,3,100,200,50,80,2")
        assert r == GroundTruthRecord(5, 12, 3, BoundingBox(100, 200, 50, 80), 2)
        assert class_name(r.class_id) == "DHelmet"
        assert not r.clipped

    def test_lenient_clips_and_flags(self):
        (r,) = parse_ground_truth("1,1,0,1900,1000,100,100,1", GEOM, "lenient")
        assert r.bbox == BoundingBox(1900, 1000, 20, 80)
        assert r.clipped

    def test_strict_rejects_out_of_frame(self):
        with pytest.raises(ParseError, match="frame"):
            parse_ground_truth("1,1,0,1900,1000,100,100,1", GEOM, "strict")

    def test_zero_width(self):
        with pytest.raises(ParseError, match="non-positive width"):
            parse_ground_truth("1,1,0,10,10,0,5,1")

    def test_class_out_of_range(self):
        with pytest.raises(ParseError, match="class id 8"):
            parse_ground_truth("1,1,0,10,10,5,5,8")

    def test_whitespace_and_crlf(self):
        text = "1 1 0 10 10 5 5 1\r\n\r\n2\t3  4 1.5 2.5 3 4 7\r\n"
        recs = parse_ground_truth(text)
        assert [r.key for r in recs] == [(1, 1, 0), (2, 3, 4)]
        assert recs[1].bbox == BoundingBox(1.5, 2.5, 3, 4)

    def test_error_cites_line_number(self):
        lines = ["1,1,0,10,10,5,5,1"] * 6 + ["1,1,0,10,10,5"]
        with pytest.raises(ParseError) as info:
            parse_ground_truth("\n".join(lines))
        assert info.value.line == 7
        assert "line 7" in str(info.value)

    def test_box_wholly_outside_rejected_even_lenient(self):
        with pytest.raises(ParseError):
            parse_ground_truth("1,1,0,2000,10,5,5,1")

    def test_raw_keeps_bad_values(self):
        (r,) = parse_ground_truth("1,1,0,10,10,0,5,9", mode="raw")
        assert r.bbox.width == 0 and r.class_id == 9


class TestParseDetections:
    def test_field_mapping(self):
        (d,) = parse_detections("5,12,100,200,50,80,2,0.93")
        assert d == DetectionRecord(5, 12, BoundingBox(100, 200, 50, 80), 2, 0.93)

    def test_confidence_out_of_range(self):
        with pytest.raises(ParseError, match="confidence"):
            parse_detections("5,12,100,200,50,80,2,1.5")

    def test_empty(self):
        assert parse_detections("") == []
        assert parse_detections("\n\n") == []


class TestSerialize:
    def test_single(self):
        d = DetectionRecord(5, 12, BoundingBox(100, 200, 50, 80), 2, 0.93)
        assert serialize_detections([d]) == "5,12,100,200,50,80,2,0.93\n"

    def test_empty(self):
        assert serialize_detections([]) == ""

    def test_round_trip_1000(self):
        recs = random_detections(np.random.default_rng(7), 1000)
        back = parse_detections(serialize_detections(recs), GEOM, "strict")
        assert back == recs

    def test_ground_truth_round_trip(self, rng):
        from synth import synthetic_gt

        recs = synthetic_gt(rng, videos=range(1, 4))
        assert parse_ground_truth(serialize_ground_truth(recs), GEOM, "strict") == recs

    @pytest.mark.parametrize("value,text", [(1.0, "1"), (0.5, "0.5"), (100.0, "100"), (1e-05, "1e-05"), (0.1 + 0.2, "0.30000000000000004")])
    def test_format_number(self, value, text):
        assert format_number(value) == text


class TestHistogram:
    def test_counts(self):
        recs = [
            GroundTruthRecord(1, 1, 0, BoundingBox(0, 0, 5, 5), 1),
            GroundTruthRecord(1, 1, 1, BoundingBox(0, 0, 5, 5), 1),
            GroundTruthRecord(1, 1, 2, BoundingBox(0, 0, 5, 5), 2),
        ]
        assert class_histogram(recs) == {1: 2, 2: 1, 3: 0, 4: 0, 5: 0, 6: 0, 7: 0}

    def test_empty(self):
        assert class_histogram([]) == {c: 0 for c in range(1, 8)}

    def test_total(self, rng):
        from synth import synthetic_gt

        recs = synthetic_gt(rng, videos=range(1, 6))
        assert sum(class_histogram(recs).values()) == len(recs)


def det(video, frame, conf, cls=1, left=0):
    return DetectionRecord(video, frame, BoundingBox(left, 0, 10, 10), cls, conf)


class TestReconcile:
    def test_threshold(self):
        out = reconcile_labels([det(1, 1, 0.9, left=0), det(1, 1, 0.3, left=20)], [], 0.5)
        assert out == [GroundTruthRecord(1, 1, 0, BoundingBox(0, 0, 10, 10), 1)]

    def test_override_precedence(self):
        override = GroundTruthRecord(1, 1, 7, BoundingBox(50, 50, 10, 10), 3)
        out = reconcile_labels([det(1, 1, 0.9), det(1, 2, 0.9)], [override], 0.5)
        assert out[0] == override
        assert [(r.video_id, r.frame) for r in out] == [(1, 1), (1, 2)]

    def test_floor_zero_promotes_all(self):
        preds = [det(2, 1, 0.0), det(1, 3, 0.2), det(1, 3, 0.1, left=30)]
        out = reconcile_labels(preds, [], 0.0)
        assert len(out) == 3
        assert [(r.video_id, r.frame, r.track_id) for r in out] == [(1, 3, 0), (1, 3, 1), (2, 1, 0)]

    def test_bad_floor(self):
        with pytest.raises(ValueError):
            reconcile_labels([], [], 1.5)

    @given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 4), st.floats(0, 1)), max_size=30), st.sets(st.integers(1, 4)))
    def test_overridden_frames_never_hold_predictions(self, preds, override_frames):
        predictions = [det(v, f, c) for v, f, c in preds]
        overrides = [GroundTruthRecord(1, f, 99, BoundingBox(1, 1, 3, 3), 2) for f in override_frames]
        out = reconcile_labels(predictions, overrides, 0.0)
        for r in out:
            if (r.video_id, r.frame) in {(1, f) for f in override_frames}:
                assert r.track_id == 99


class TestValidate:
    def test_valid(self):
        recs = parse_ground_truth("1,1,0,10,10,5,5,1\n1,1,1,10,10,5,5,2\n")
        assert validate(recs).ok

    def test_duplicate_key(self):
        recs = parse_ground_truth("1,1,0,10,10,5,5,1\n1,1,0,20,10,5,5,2\n")
        report = validate(recs)
        assert report.counts["duplicate_key"] == 1 and report.total == 1

    def test_zero_width(self):
        recs = parse_ground_truth("1,1,0,10,10,0,5,1\n", mode="raw")
        report = validate(recs)
        assert report.counts["geometry"] == 1 and report.total == 1

    def test_does_not_mutate(self):
        recs = parse_ground_truth("1,1,0,1900,10,50,5,1\n1,1,0,10,10,5,5,9\n", mode="raw")
        before = list(recs)
        report = validate(recs)
        assert recs == before
        assert report.counts["out_of_frame"] == 1
        assert report.counts["class_id"] == 1
        assert report.counts["duplicate_key"] == 1

    def test_detection_confidence(self):
        recs = parse_detections("1,1,10,10,5,5,1,1.2\n", mode="raw")
        assert validate(recs).counts["confidence"] == 1


@given(
    st.floats(-100, 2100),
    st.floats(-100, 1200),
    st.floats(0.5, 500),
    st.floats(0.5, 500),
)
def test_clip_idempotent(left, top, width, height):
    box = BoundingBox(left, top, width, height)
    once = clip_box(box, GEOM)
    assert clip_box(once, GEOM) == once
