"""Seeded synthetic ground truth and detections for tests."""

import numpy as np

from helmetkit.annotations import BoundingBox, DetectionRecord, GroundTruthRecord


def random_instance(rng, n_videos=3, n_classes=5, max_boxes=50, conf_decimals=2):
    """Ground truth plus noisy detections (jittered copies and false positives)."""
    gts, dets = [], []
    n_gt = int(rng.integers(0, max_boxes + 1))
    track = 0
    for _ in range(n_gt):
        video = int(rng.integers(1, n_videos + 1))
        frame = int(rng.integers(1, 4))
        w, h = rng.uniform(10, 80, 2)
        x, y = rng.uniform(0, 300, 2)
        cls = int(rng.integers(1, n_classes + 1))
        gts.append(GroundTruthRecord(video, frame, track, BoundingBox(float(x), float(y), float(w), float(h)), cls))
        track += 1
    n_det = int(rng.integers(0, max_boxes + 1))
    for _ in range(n_det):
        conf = float(np.round(rng.uniform(0.01, 1.0), conf_decimals))
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            jitter = rng.normal(0, 0.15, 4) * np.array([g.bbox.width, g.bbox.height, g.bbox.width, g.bbox.height])
            box = BoundingBox(
                g.bbox.left + float(jitter[0]),
                g.bbox.top + float(jitter[1]),
                max(1.0, g.bbox.width + float(jitter[2])),
                max(1.0, g.bbox.height + float(jitter[3])),
            )
            cls = g.class_id if rng.random() < 0.85 else int(rng.integers(1, n_classes + 1))
            dets.append(DetectionRecord(g.video_id, g.frame, box, cls, conf))
        else:
            w, h = rng.uniform(10, 80, 2)
            x, y = rng.uniform(0, 300, 2)
            dets.append(
                DetectionRecord(
                    int(rng.integers(1, n_videos + 1)),
                    int(rng.integers(1, 4)),
                    BoundingBox(float(x), float(y), float(w), float(h)),
                    int(rng.integers(1, n_classes + 1)),
                    conf,
                )
            )
    return gts, dets


def synthetic_gt(rng, videos=range(1, 101), frames_per_video=20, per_frame=(0, 4)):
    """Valid 1920x1080 ground truth over the given videos, with class skew like the real data."""
    probs = np.array([0.4, 0.3, 0.1, 0.03, 0.12, 0.0, 0.05])
    probs = probs / probs.sum()
    out = []
    for v in videos:
        for f in range(1, frames_per_video + 1):
            for t in range(int(rng.integers(per_frame[0], per_frame[1] + 1))):
                w, h = rng.uniform(30, 200, 2)
                x = rng.uniform(0, 1920 - w)
                y = rng.uniform(0, 1080 - h)
                cls = int(rng.choice(7, p=probs)) + 1
                out.append(GroundTruthRecord(v, f, t, BoundingBox(round(float(x), 1), round(float(y), 1), round(float(w), 1), round(float(h), 1)), cls))
    return out


OPTIMUM = {"a": 3.0, "b": 0.5, "c": 2.0}


def concave_space():
    from helmetkit.ga_evolve import GeneSpec, HyperparamSpace

    return HyperparamSpace([GeneSpec(n, 0.01, 10.0, 1.0, 1.0) for n in OPTIMUM])


def concave_objective(values):
    """Peaks at 1.0 on OPTIMUM; returned as both mAP figures so fitness equals it."""
    err = sum(((values[n] - v) / v) ** 2 for n, v in OPTIMUM.items()) / len(OPTIMUM)
    f = max(0.0, 1.0 - err)
    return f, f


def complementary_detections(rng, gts, n_models=3, geometry_width=1920):
    """Per-model detections where model k misses every object with index % n_models == k.

    Each model also emits one low-confidence false positive per frame that no
    other model reproduces, so agreement across models separates hits from noise.
    """
    frames = sorted({(g.video_id, g.frame) for g in gts})
    models = []
    for k in range(n_models):
        dets = []
        for i, g in enumerate(gts):
            if i % n_models == k:
                continue
            dx, dy = rng.integers(-2, 3, 2)
            b = g.bbox
            left = min(max(0.0, b.left + float(dx)), geometry_width - b.width)
            box = BoundingBox(left, max(0.0, b.top + float(dy)), b.width, b.height)
            dets.append(DetectionRecord(g.video_id, g.frame, box, g.class_id, float(np.round(rng.uniform(0.6, 0.95), 3))))
        for video, frame in frames:
            box = BoundingBox(1400.0 + 45.0 * k, 1000.0, 40.0, 40.0)
            dets.append(DetectionRecord(video, frame, box, 1 + (frame + k) % 5, float(np.round(rng.uniform(0.3, 0.5), 3))))
        models.append(dets)
    return models


def complementary_models(rng, n_models=3, n_objects=60, videos=(91, 92, 93)):
    """Grid-placed ground truth plus :func:`complementary_detections` for it."""
    gts = []
    for i in range(n_objects):
        video = videos[i % len(videos)]
        frame = 1 + (i // len(videos)) % 5
        x = 40.0 + 120.0 * (i // 15)
        y = 40.0 + 60.0 * (i % 15)
        gts.append(GroundTruthRecord(video, frame, i, BoundingBox(x, y, 80.0, 50.0), 1 + i % 5))
    return gts, complementary_detections(rng, gts, n_models)
