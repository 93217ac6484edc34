"""Acceptance suite: one test per release criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS lines and
the reported (non-asserted) scaling figures.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pytest

from sightline.cli import main as cli_main
from sightline.decode import DecodeConfig, Detection, decode_batch, decode_raw, nms
from sightline.engine import MockSpec, create_mock_session, load_model
from sightline.engine.modelgen import make_tiny_detector
from sightline.engine.onnx_format import save_model
from sightline.evalmap import DEFAULT_IOU_THRESHOLDS, evaluate, load_detections
from sightline.frame import CameraIntrinsics, CameraPose, PoseBuffer
from sightline.geometry import (
    FixedDepth,
    anchor_detection,
    make_perspective_projection,
    project_direction,
    unproject,
)
from sightline.pipeline import (
    build_simulated_stages,
    build_single_pipeline,
    simulated_inference_stage,
)
from sightline.preprocess import Layout, normalize, to_tensor
from sightline.profiler import (
    RunDescriptor,
    TimingProtocol,
    compare_tiled,
    fit_pixel_scaling,
    time_pipeline,
)
from sightline.selector import Budget, select_config
from sightline.tiler import assemble_batch, merge_detections, plan_tiles
from sightline.decode import offset_detection

from conftest import make_frame
from oracles import brute_force_nms, evaluate_oracle
from test_decode import make_raw, random_detections
from test_evalmap import random_instance
from test_selector import crossover_table

FIXTURES = Path(__file__).parent / "fixtures"


def passed(number: int, message: str) -> None:
    print(f"\n[criterion {number:2d}] PASS - {message}")


def test_01_nms_oracle_equivalence():
    rng = np.random.default_rng(20240501)
    instances = 0
    for _ in range(1000):
        dets = random_detections(rng, max_boxes=20, categories=3)
        threshold = float(rng.uniform(0.2, 0.8))
        class_aware = bool(rng.integers(0, 2))
        got = nms(dets, threshold, class_aware)
        expected = brute_force_nms(dets, threshold, class_aware)
        assert got == expected  # exact equality, order included
        instances += 1
    assert instances >= 1000
    passed(1, f"greedy NMS identical to brute force on {instances} seeded instances")


def test_02_decoder_round_trip():
    rng = np.random.default_rng(7)
    boxes = []
    for i in range(10):
        # known values are float32: that is what a prediction tensor holds
        cx, cy = np.float32(rng.uniform(20, 140)), np.float32(rng.uniform(20, 140))
        w, h = np.float32(rng.uniform(4, 40)), np.float32(rng.uniform(4, 40))
        boxes.append((float(cx), float(cy), float(w), float(h),
                      int(rng.integers(0, 3)), float(np.float32(rng.uniform(0.3, 1.0)))))
    for attrs_first in (True, False):
        raw = make_raw(boxes, c=3, attrs_first=attrs_first)
        dets = decode_raw(raw, DecodeConfig(confidence_threshold=0.25))
        assert len(dets) == len(boxes)
        for det, (cx, cy, w, h, cat, score) in zip(dets, boxes):
            assert det.category == cat
            assert det.score == pytest.approx(score, abs=1e-6)
            assert det.bbox[0] == pytest.approx(cx - w / 2, abs=1e-6)
            assert det.bbox[1] == pytest.approx(cy - h / 2, abs=1e-6)
            assert det.bbox[2] == pytest.approx(w, abs=1e-6)
            assert det.bbox[3] == pytest.approx(h, abs=1e-6)
    passed(2, "10 known boxes decode back exactly in both tensor orientations")


def test_03_map_oracle_equivalence():
    rng = np.random.default_rng(99)
    checked = 0
    for _ in range(220):
        dets, gts = random_instance(rng, max_images=5, max_boxes=10)
        if not gts:
            continue
        result = evaluate(dets, gts)
        o50, o5095 = evaluate_oracle(dets, gts, DEFAULT_IOU_THRESHOLDS)
        assert result.map50 == pytest.approx(o50, abs=1e-9)
        assert result.map50_95 == pytest.approx(o5095, abs=1e-9)
        checked += 1
    assert checked >= 200
    # perfect detector is exact
    dets, gts = random_instance(rng)
    while not gts:
        dets, gts = random_instance(rng)
    perfect = [(g.image_id, Detection(bbox=g.bbox, category=g.category_id, score=0.99,
                                      space="full_frame")) for g in gts]
    result = evaluate(perfect, gts)
    assert result.map50 == 1.0 and result.map50_95 == 1.0
    passed(3, f"evaluate() matches the naive evaluator within 1e-9 on {checked} instances; "
              "perfect detector scores exactly 1.0")


def test_04_stage_breakdown_protocol():
    # real sleeps measured by the real clock, scaled repetition count
    stages = build_simulated_stages({"preprocess": 2.0, "inference": 90.0, "postprocess": 4.0})
    protocol = TimingProtocol(warmup_iterations=3, repetitions=25)
    report = time_pipeline(stages, None, protocol, RunDescriptor("sim", 160, "mock"))
    for name, want in (("preprocess", 2.0), ("inference", 90.0), ("postprocess", 4.0)):
        got = report.stage(name).mean_ms
        assert abs(got - want) <= 1.0, f"{name}: {got} vs {want}"
    assert abs(report.total_mean_ms - 96.0) <= 2.0

    # warm-up exclusion proven by the counting mock at full protocol scale
    _, session = create_mock_session(MockSpec())
    counting_stages = [simulated_inference_stage(session)]
    proto = TimingProtocol(warmup_iterations=10, repetitions=100,
                           clock=session.backend.clock.now_ns)
    counted = time_pipeline(counting_stages, None, proto, RunDescriptor("mock", 160, "mock"))
    assert session.backend.call_count == 110
    assert counted.stage("inference").samples == 100

    # the bench command itself, at the default protocol scale (10 + 100 runs)
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        out = Path(d) / "bench.json"
        assert cli_main(["bench", "--backend", "mock", "--mock-delay-ms", "2,90,4",
                         "--output", str(out)]) == 0
        payload = json.loads(out.read_text())
        stages = {s["stage"]: s for s in payload["report"]["stages"]}
        for name, want in (("preprocess", 2.0), ("inference", 90.0), ("postprocess", 4.0)):
            assert abs(stages[name]["mean_ms"] - want) <= 1.0
        assert abs(stages["total"]["mean_ms"] - 96.0) <= 2.0
        assert stages["total"]["samples"] == 100
        assert payload["report"]["warmup_iterations"] == 10
    passed(4, "stage means within +/-1 ms (total +/-2 ms) in profiler and CLI reports; "
              "exactly warmup+reps engine calls, warm-up excluded from statistics")


def test_05_pixel_scaling_law(model_dir):
    sizes = [96, 128, 160, 224, 320]
    per_pixel = 0.0005

    def provider(n: int):
        _, session = create_mock_session(MockSpec(per_pixel_delay_ms=per_pixel), input_size=n)
        return session

    protocol = TimingProtocol(warmup_iterations=1, repetitions=3)
    reports = []
    for n in sizes:
        session = provider(n)
        stages = build_single_pipeline(session, DecodeConfig())
        proto = TimingProtocol(warmup_iterations=1, repetitions=3,
                               clock=session.backend.clock.now_ns)
        reports.append(time_pipeline(stages, make_frame(640, 480), proto,
                                     RunDescriptor("mock", n, "mock")))
    fit = fit_pixel_scaling(reports)
    assert fit.r_squared >= 0.999
    assert abs(fit.slope_ms_per_pixel - per_pixel) / per_pixel <= 0.05

    # real reference backend on generated detector models: soft, machine
    # dependent, reported but not hard-asserted
    real_reports = []
    for n in sizes:
        save_path = model_dir / f"scaling_{n}.onnx"
        if not save_path.exists():
            save_model(make_tiny_detector(input_size=n, channels=(16, 32)), save_path)
        _, session = load_model(save_path)
        stages = build_single_pipeline(session, DecodeConfig())
        real_reports.append(
            time_pipeline(stages, make_frame(640, 480),
                          TimingProtocol(warmup_iterations=2, repetitions=5),
                          RunDescriptor("tiny", n, "reference"))
        )
    real_fit = fit_pixel_scaling(real_reports)
    status = "OK" if real_fit.r_squared >= 0.90 else "below target on this machine"
    passed(5, f"mock fit R^2={fit.r_squared:.6f}, slope within 5%; reference backend "
              f"R^2={real_fit.r_squared:.4f} ({status}, reported only)")


def test_06_tiled_batch_comparison():
    n = 160

    def provider(k: int):
        _, session = create_mock_session(MockSpec(per_pixel_delay_ms=0.002), input_size=k)
        return session

    tiled, single, ratio = compare_tiled(
        provider, n, TimingProtocol(warmup_iterations=1, repetitions=3), make_frame(640, 480)
    )
    assert abs(ratio - 0.5) <= 0.05

    # merged detections equal offset-adjusted per-tile runs followed by NMS
    c = 2

    def rule(slice_chw: np.ndarray) -> np.ndarray:
        mean = float(slice_chw.mean())
        cols = np.zeros((4 + c, 3), dtype=np.float32)
        cols[0:4, 0] = (n / 2 + 20 * mean, n / 2, 30 + 20 * mean, 24)
        cols[4, 0] = 0.5 + 0.4 * mean
        cols[0:4, 1] = (n / 4, n / 3, 12, 12)
        cols[5, 1] = 0.4 + 0.3 * mean
        return cols

    spec = MockSpec(output_rule=rule, category_count=c, candidate_count=3)
    _, session = create_mock_session(spec, input_size=n)
    cfg = DecodeConfig()
    img = normalize(make_frame(2 * n, n, seed=31).pixels)
    plan = plan_tiles(2 * n, n, n, 0)
    raw = session.infer(assemble_batch(img, plan))
    per_tile = [nms(d, cfg.nms_iou_threshold, cfg.class_aware_nms) for d in decode_batch(raw, cfg)]
    merged = merge_detections(per_tile, plan, cfg)

    collected = []
    for x, y in plan.origins:
        half = img[y : y + n, x : x + n]
        raw_half = session.infer(to_tensor(half, Layout.CHANNELS_FIRST))
        dets = nms(decode_raw(raw_half, cfg), cfg.nms_iou_threshold, cfg.class_aware_nms)
        collected.extend(offset_detection(d, x, y) for d in dets)
    expected = nms(collected, cfg.nms_iou_threshold, cfg.class_aware_nms)
    assert merged == expected
    passed(6, f"pixel-linear mock ratio {ratio:.4f} within 0.5 +/- 0.05; tiled merge equals "
              "independent per-tile runs + NMS exactly")


def test_07_budget_crossover():
    table = crossover_table()
    for budget_ms, want in ((100, "yolov8n"), (300, "yolov8n"), (500, "yolov8s"), (600, "yolov8s")):
        chosen = select_config(table, Budget(float(budget_ms)))
        assert chosen.variant_name == want, f"budget {budget_ms}: got {chosen.variant_name}"
    last = -1.0
    scanned = 0
    for budget_ms in np.linspace(40.0, 700.0, 50):
        chosen = select_config(table, Budget(float(budget_ms)))
        assert chosen.map50_95 >= last
        last = chosen.map50_95
        scanned += 1
    assert scanned == 50
    passed(7, "nano chosen at 100/300 ms, small at 500/600 ms; metric monotone over "
              "a 50-point budget scan")


def test_08_acquisition_time_anchoring():
    w = h = 512
    intr = CameraIntrinsics(projection=make_perspective_projection(70.0, w, h),
                            image_width=w, image_height=h)
    t0, t1 = 0, 50_000_000
    rot90 = np.eye(4)
    rot90[0, 0] = rot90[2, 2] = 0.0
    rot90[0, 2] = 1.0
    rot90[2, 0] = -1.0
    buf = PoseBuffer()
    buf.push(CameraPose(camera_to_world=np.eye(4), timestamp_ns=t0))
    buf.push(CameraPose(camera_to_world=rot90, timestamp_ns=t1))
    det = Detection(bbox=(200.0, 150.0, 40.0, 30.0), category=0, score=0.9, space="full_frame")
    anchor = anchor_detection(det, t0, intr, buf, FixedDepth(2.0))

    identity_only = PoseBuffer()
    identity_only.push(CameraPose(camera_to_world=np.eye(4), timestamp_ns=t0))
    reference = anchor_detection(det, t0, intr, identity_only, FixedDepth(2.0))
    assert np.array_equal(anchor.ray.origin, reference.ray.origin)
    assert np.array_equal(anchor.ray.direction, reference.ray.direction)
    assert np.array_equal(anchor.point, reference.point)

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10_000):
        u = float(rng.uniform(0, w - 1e-9))
        v = float(rng.uniform(0, h - 1e-9))
        ru, rv = project_direction(unproject((u, v), intr), intr)
        worst = max(worst, abs(ru - u), abs(rv - v))
    assert worst <= 0.5
    passed(8, f"anchor uses the acquisition-time pose exactly despite newer poses; "
              f"round trip over 10^4 pixels, worst error {worst:.2e} px")


def test_09_end_to_end_integration(tmp_path, tiny_model_path):
    images = sorted((FIXTURES / "dataset" / "images").glob("*.png"))[:3]
    proj = make_perspective_projection(60.0, 320, 240)
    sidecar = {
        "intrinsics": {"projection": [float(v) for v in proj.ravel()],
                       "image_width": 320, "image_height": 240},
        "poses": [{"timestamp_ns": i * 33_333_333,
                   "camera_to_world": [float(v) for v in np.eye(4).ravel()]}
                  for i in range(3)],
        "frames": [{"image": p.name, "timestamp_ns": i * 33_333_333}
                   for i, p in enumerate(images)],
    }
    sidecar_path = tmp_path / "sidecar.json"
    sidecar_path.write_text(json.dumps(sidecar))
    out = tmp_path / "dets.json"
    code = cli_main([
        "detect", "--model", str(tiny_model_path),
        "--images", *[str(p) for p in images],
        "--annotations", str(FIXTURES / "dataset" / "annotations.json"),
        "--sidecar", str(sidecar_path), "--policy", "depth:2.0",
        "--output", str(out),
    ])
    assert code == 0
    records = json.loads(out.read_text())
    assert len(records) >= 1
    for rec in records:
        assert set(rec) >= {"image_id", "category_id", "bbox", "score"}
        assert len(rec["bbox"]) == 4 and rec["bbox"][2] > 0 and rec["bbox"][3] > 0
        assert 0.0 <= rec["score"] <= 1.0
        if "anchor" in rec:
            assert len(rec["anchor"]["ray_direction"]) == 3
    # the strict results-file loader accepts the emitted schema
    parsed = load_detections(out)
    assert len(parsed) == len(records)

    pretrained = os.environ.get("SIGHTLINE_YOLOV8N")
    note = "pretrained smoke skipped (SIGHTLINE_YOLOV8N unset)"
    if pretrained and Path(pretrained).exists():
        out2 = tmp_path / "dets_pretrained.json"
        code = cli_main([
            "detect", "--model", pretrained, "--size", "160",
            "--images", *[str(p) for p in sorted((FIXTURES / 'dataset' / 'images').glob('*.png'))],
            "--annotations", str(FIXTURES / "dataset" / "annotations.json"),
            "--output", str(out2),
        ])
        assert code == 0
        from sightline.evalmap import load_annotations, match_detections

        gts = load_annotations(FIXTURES / "dataset" / "annotations.json")
        dets = load_detections(out2)
        matched_any = False
        for image_id in {g.image_id for g in gts}:
            image_dets = [d for i, d in dets if i == image_id]
            image_gts = [g for g in gts if g.image_id == image_id]
            labels, _ = match_detections(image_dets, image_gts, 0.5)
            matched_any = matched_any or any(labels)
        assert matched_any, "pretrained model matched no ground truth at IoU >= 0.5"
        note = "pretrained smoke matched ground truth at IoU >= 0.5"
    passed(9, f"fixture-model detect ran preprocess->infer->postprocess->anchor with "
              f"schema-valid output ({len(records)} records); {note}")


def test_10_cli_determinism(tmp_path):
    rng = np.random.default_rng(0)
    from PIL import Image

    img = tmp_path / "img.png"
    Image.fromarray(rng.integers(0, 256, (720, 1280, 3), dtype=np.uint8)).save(img)
    table = tmp_path / "table.json"

    ann = {"images": [{"id": 1, "file_name": "a.png"}],
           "annotations": [{"image_id": 1, "bbox": [10, 10, 20, 20], "category_id": 1}],
           "categories": [{"id": 1}]}
    ann_path = tmp_path / "ann.json"
    ann_path.write_text(json.dumps(ann))
    det_path = tmp_path / "gt_dets.json"
    det_path.write_text(json.dumps([
        {"image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20], "score": 0.9},
    ]))
    table_path = tmp_path / "crossover_table.json"
    table_path.write_text(json.dumps({
        "schema": "sightline.sweep_table/1",
        "rows": [
            {"variant_name": "yolov8n", "input_size": 160, "mean_total_ms": 96.0,
             "std_ms": 1.0, "map50": 0.40, "map50_95": 0.25, "parameter_count": 3},
            {"variant_name": "yolov8s", "input_size": 224, "mean_total_ms": 450.0,
             "std_ms": 1.0, "map50": 0.50, "map50_95": 0.37, "parameter_count": 11},
        ],
        "failures": [],
    }))

    def run_all(tag: str) -> dict[str, bytes]:
        outs = {}

        def out(name: str) -> str:
            return str(tmp_path / f"{name}_{tag}.json")

        assert cli_main(["detect", "--backend", "mock", "--size", "160", "--seed", "3",
                         "--mock-box", "80,80,20,10,1,0.9", "--images", str(img),
                         "--output", out("detect")]) == 0
        assert cli_main(["bench", "--backend", "mock", "--mock-delay-ms", "1,2,1",
                         "--seed", "3", "--warmup", "1", "--reps", "3",
                         "--output", out("bench")]) == 0
        assert cli_main(["sweep", "--backend", "mock", "--mock-per-pixel-ms", "0.0002",
                         "--sizes", "96,160", "--seed", "3", "--warmup", "1", "--reps", "3",
                         "--output", out("sweep")]) == 0
        assert cli_main(["tile-bench", "--backend", "mock", "--mock-per-pixel-ms", "0.001",
                         "--tile", "160", "--seed", "3", "--warmup", "1", "--reps", "3",
                         "--output", out("tile")]) == 0
        assert cli_main(["select", "--table", str(table_path), "--budget-ms", "500",
                         "--metric", "mAP50_95", "--output", out("select")]) == 0
        assert cli_main(["eval", "--annotations", str(ann_path), "--detections", str(det_path),
                         "--output", out("eval")]) == 0
        for name in ("detect", "bench", "sweep", "tile", "select", "eval"):
            outs[name] = Path(out(name)).read_bytes()
        return outs

    first = run_all("a")
    second = run_all("b")
    assert set(first) == set(second)
    for name in first:
        assert first[name] == second[name], f"{name} outputs differ between runs"
    passed(10, f"byte-identical outputs across two runs for: {', '.join(sorted(first))}")
