import json
import sys

import pytest

from helmetkit.annotations import (
    DetectionRecord,
    parse_detections,
    parse_ground_truth,
    serialize_detections,
    serialize_ground_truth,
)
from helmetkit.cli import main, parse_id_set
from helmetkit.ga_evolve import default_space, format_hyp, format_space, parse_key_values
from helmetkit.report import parse_summary
from synth import synthetic_gt

REPORT_FILES = [
    "summary.txt",
    "ap_per_class.csv",
    "curves_all.csv",
    "confusion_matrix.csv",
    "confusion_matrix_normalized.csv",
    "manifest.json",
]


def as_detections(gts, conf=1.0):
    return [DetectionRecord(g.video_id, g.frame, g.bbox, g.class_id, conf) for g in gts]


@pytest.fixture
def gt_file(tmp_path, rng):
    gts = synthetic_gt(rng, videos=range(1, 101), frames_per_video=5)
    path = tmp_path / "gt.txt"
    path.write_text(serialize_ground_truth(gts))
    return path, gts


def test_id_set():
    assert parse_id_set("1-3,7, 9-9") == {1, 2, 3, 7, 9}


class TestEvaluate:
    def test_perfect(self, tmp_path, gt_file, capsys):
        gt, gts = gt_file
        det = tmp_path / "det.txt"
        det.write_text(serialize_detections(as_detections(gts)))
        out = tmp_path / "run"
        assert main(["evaluate", "--gt", str(gt), "--det", str(det), "--out", str(out)]) == 0
        summary = (out / "summary.txt").read_text()
        assert "map50: 1\n" in summary and "map50_95: 1\n" in summary
        for name in REPORT_FILES:
            assert (out / name).is_file()
        assert capsys.readouterr().out == summary
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "evaluate" and manifest["config"]["iou"] == 0.5

    def test_empty_detections(self, tmp_path, gt_file):
        gt, _ = gt_file
        det = tmp_path / "det.txt"
        det.write_text("")
        out = tmp_path / "run"
        assert main(["evaluate", "--gt", str(gt), "--det", str(det), "--out", str(out)]) == 0
        summary = parse_summary((out / "summary.txt").read_text())
        for key in ("map50", "map50_95", "precision", "recall", "f1"):
            assert summary[key] == 0

    def test_malformed_line_seven(self, tmp_path, capsys):
        gt = tmp_path / "gt.txt"
        gt.write_text("1,1,0,10,10,5,5,1\n" * 6 + "1,1,0,10,ten,5,5,1\n")
        det = tmp_path / "det.txt"
        det.write_text("")
        assert main(["evaluate", "--gt", str(gt), "--det", str(det), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "line 7" in err and "gt.txt" in err

    def test_missing_file(self, tmp_path, capsys):
        missing = tmp_path / "nope.txt"
        assert main(["evaluate", "--gt", str(missing), "--det", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert "nope.txt" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        assert main(["evaluate"]) == 2

    def test_inputs_untouched(self, tmp_path, gt_file):
        gt, gts = gt_file
        before = gt.read_bytes()
        det = tmp_path / "det.txt"
        det.write_text(serialize_detections(as_detections(gts, 0.7)))
        main(["evaluate", "--gt", str(gt), "--det", str(det), "--out", str(tmp_path / "o")])
        assert gt.read_bytes() == before


STUB = """
import sys
open(sys.argv[1], "w").write("map50: 0.5\\nmap50_95: 0.3\\n")
"""


@pytest.fixture
def stub_cmd(tmp_path):
    path = tmp_path / "stub.py"
    path.write_text(STUB)
    return f"{sys.executable} {path} {{metrics}}"


class TestEvolve:
    def run(self, out, stub_cmd, *extra):
        return main(["evolve", "--evaluator-cmd", stub_cmd, "--out", str(out), *extra])

    def test_zero_generations(self, tmp_path, stub_cmd):
        out = tmp_path / "e"
        assert self.run(out, stub_cmd, "--generations", "0") == 0
        assert parse_key_values((out / "best.hyp").read_text()) == default_space().initial_point()
        for name in ("evolve_log.csv", "scatter.csv", "scatter_best.csv", "manifest.json"):
            assert (out / name).is_file()

    def test_constant_stub(self, tmp_path, stub_cmd):
        out = tmp_path / "e"
        assert self.run(out, stub_cmd, "--generations", "4") == 0
        rows = (out / "evolve_log.csv").read_text().splitlines()
        assert len(rows) == 1 + 1 + 4
        assert all(r.split(",")[1] == "0.32" for r in rows[1:])

    def test_rerun_byte_identical(self, tmp_path, stub_cmd):
        space = tmp_path / "space.txt"
        space.write_text("a 0.01 10 1 1\nb 0.01 10 1 2\nc 0 1 0 0.5\n")
        for name in ("r1", "r2"):
            assert self.run(tmp_path / name, stub_cmd, "--space", str(space), "--generations", "5", "--seed", "3", "--jobs", "2") == 0
        assert (tmp_path / "r1" / "evolve_log.csv").read_bytes() == (tmp_path / "r2" / "evolve_log.csv").read_bytes()

    def test_resume(self, tmp_path, stub_cmd):
        space = tmp_path / "space.txt"
        space.write_text(format_space(default_space()))
        self.run(tmp_path / "full", stub_cmd, "--space", str(space), "--generations", "6", "--seed", "1")
        self.run(tmp_path / "part", stub_cmd, "--space", str(space), "--generations", "3", "--seed", "1")
        self.run(tmp_path / "part", stub_cmd, "--space", str(space), "--generations", "6", "--seed", "1", "--resume")
        assert (tmp_path / "full" / "evolve_log.csv").read_text() == (tmp_path / "part" / "evolve_log.csv").read_text()

    def test_failing_evaluator_reported(self, tmp_path):
        cmd = f"{sys.executable} -c \"import sys; sys.exit(3)\""
        out = tmp_path / "e"
        assert self.run(out, cmd, "--generations", "2") == 0
        rows = (out / "evolve_log.csv").read_text().splitlines()[1:]
        assert all(r.split(",")[4] == "1" for r in rows)


class TestSample:
    def test_all_stages_disabled(self, tmp_path, gt_file):
        gt, _ = gt_file
        out = tmp_path / "s"
        assert main(["sample", "--gt", str(gt), "--no-split", "--out", str(out)]) == 0
        assert (out / "kept_gt.txt").read_text() == gt.read_text()

    def test_default_split(self, tmp_path, gt_file):
        gt, _ = gt_file
        out = tmp_path / "s"
        assert main(["sample", "--gt", str(gt), "--out", str(out)]) == 0
        val = parse_ground_truth((out / "val_gt.txt").read_text())
        train = parse_ground_truth((out / "train_gt.txt").read_text())
        assert {r.video_id for r in val} <= set(range(91, 100))
        assert {r.video_id for r in train} <= set(range(1, 91)) | {100}

    def test_stage_accounting(self, tmp_path, gt_file):
        gt, _ = gt_file
        out = tmp_path / "s"
        args = ["sample", "--gt", str(gt), "--frame-count", "40", "--uniform-fps", "5", "--random-count", "1500",
                "--dup-threshold", "0.9", "--keep-background", "0.05", "--seed", "7", "--out", str(out)]
        assert main(args) == 0
        rows = [r.split(",") for r in (out / "stage_counts.csv").read_text().splitlines()[1:]]
        names = [r[0] for r in rows]
        assert names[:5] == ["uniform", "random", "near_duplicate", "background", "split"]
        chain = [r for r in rows if r[0] in ("uniform", "random", "near_duplicate", "background")]
        assert int(chain[0][1]) == 100 * 40
        for prev, cur in zip(chain, chain[1:]):
            assert int(prev[2]) == int(cur[1])
        for name, before, after, dropped in rows:
            assert int(before) - int(after) == int(dropped)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 7
        # same seed, same output
        out2 = tmp_path / "s2"
        main(args[:-1] + [str(out2)])
        for name in ("kept_gt.txt", "train_gt.txt", "val_gt.txt", "plan.manifest"):
            assert (out / name).read_bytes() == (out2 / name).read_bytes()

    def test_oversample_writes_augmented(self, tmp_path, gt_file):
        gt, _ = gt_file
        out = tmp_path / "s"
        assert main(["sample", "--gt", str(gt), "--oversample", "--augment", "flip,rot5", "--out", str(out)]) == 0
        aug = parse_ground_truth((out / "augmented_gt.txt").read_text(), mode="strict")
        assert aug and all(r.video_id in set(range(1, 91)) | {100} for r in aug)


class TestFuseValidateReport:
    def test_fuse_single_input_canonical(self, tmp_path, gt_file):
        _, gts = gt_file
        dets = as_detections(gts[:200], 0.8)
        src = tmp_path / "d.txt"
        # whitespace separated and unsorted input
        src.write_text("\n".join(" ".join(line.split(",")) for line in reversed(serialize_detections(dets).splitlines())) + "\n")
        out = tmp_path / "f"
        assert main(["fuse", "--input", str(src), "--out", str(out)]) == 0
        fused = (out / "fused.txt").read_text()
        assert sorted(parse_detections(fused), key=repr) == sorted(dets, key=repr)
        assert fused == serialize_detections(parse_detections(fused))

    def test_fuse_missing_input(self, tmp_path):
        assert main(["fuse", "--input", str(tmp_path / "x.txt"), "--out", str(tmp_path / "f")]) == 2

    def test_validate_clean(self, gt_file, capsys):
        gt, _ = gt_file
        assert main(["validate", "--gt", str(gt)]) == 0
        assert capsys.readouterr().out.startswith("violations: 0\n")

    def test_validate_problems(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1,1,0,10,10,0,5,1\n1,1,0,10,10,5,5,9\n")
        assert main(["validate", "--gt", str(bad), "--out", str(tmp_path / "v")]) == 2
        assert (tmp_path / "v" / "validation.txt").is_file()

    def test_report_two_runs(self, tmp_path, gt_file, capsys):
        gt, gts = gt_file
        for name, conf in (("a", 1.0), ("b", 0.5)):
            det = tmp_path / f"{name}.txt"
            det.write_text(serialize_detections(as_detections(gts[::2], conf)))
            assert main(["evaluate", "--gt", str(gt), "--det", str(det), "--out", str(tmp_path / name)]) == 0
        capsys.readouterr()
        assert main(["report", "--input", str(tmp_path / "a"), "--input", str(tmp_path / "b"), "--label", "I", "--label", "II", "--out", str(tmp_path / "r")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        header = lines[0].split()
        assert header[:4] == ["approach", "precision", "recall", "map50"]
        rows = [l for l in lines[1:] if l.split()[0] in ("I", "II")]
        assert len(rows) == 2
        assert (tmp_path / "r" / "report.txt").is_file()
