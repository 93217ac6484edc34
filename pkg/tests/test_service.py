from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from sightline import __version__
from sightline.service import create_app

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture()
def client() -> TestClient:
    return TestClient(create_app())


@pytest.fixture()
def image_path(tmp_path) -> str:
    rng = np.random.default_rng(0)
    p = tmp_path / "img.png"
    Image.fromarray(rng.integers(0, 256, (720, 1280, 3), dtype=np.uint8)).save(p)
    return str(p)


def mock_model(boxes=(), **kw) -> dict:
    return {"backend": "mock", "mock": {"boxes": [list(b) for b in boxes], **kw}}


class TestHealth:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "version": __version__}


class TestDetectEndpoint:
    def test_canned_box_record(self, client, image_path):
        r = client.post("/detect", json={
            "model": mock_model(boxes=[(80, 80, 20, 10, 1, 0.9)]),
            "images": [image_path],
        })
        assert r.status_code == 200
        body = r.json()
        assert len(body["records"]) == 1
        rec = body["records"][0]
        assert rec["category_id"] == 1
        assert rec["bbox"] == [630.0, 355.0, 20.0, 10.0]  # crop offset (560, 280) applied
        assert body["version"] == __version__
        assert body["resolved_config"]["images"] == [image_path]

    def test_frame_too_small_maps_to_422(self, client, tmp_path):
        p = tmp_path / "small.png"
        Image.fromarray(np.zeros((100, 100, 3), dtype=np.uint8)).save(p)
        r = client.post("/detect", json={
            "model": mock_model(), "images": [str(p)],
        })
        assert r.status_code == 422
        assert r.json()["error"] == "FrameTooSmallError"

    def test_tiled_detect(self, client, tmp_path):
        p = tmp_path / "wide.png"
        Image.fromarray(np.zeros((160, 320, 3), dtype=np.uint8)).save(p)
        r = client.post("/detect", json={
            "model": mock_model(boxes=[(80, 80, 20, 10, 0, 0.9)], category_count=3),
            "images": [str(p)],
            "tile_size": 160,
        })
        assert r.status_code == 200
        # the same canned box comes from both tiles; cross-tile NMS keeps both
        # (they land 160 px apart after offsetting, no overlap)
        assert len(r.json()["records"]) == 2

    def test_anchoring_with_sidecar(self, client, image_path, tmp_path):
        from sightline.geometry import make_perspective_projection

        proj = make_perspective_projection(60.0, 1280, 720)
        sidecar = {
            "intrinsics": {"projection": [float(v) for v in proj.ravel()],
                           "image_width": 1280, "image_height": 720},
            "poses": [{"timestamp_ns": 0,
                       "camera_to_world": [float(v) for v in np.eye(4).ravel()]}],
            "frames": [{"image": Path(image_path).name, "timestamp_ns": 0}],
        }
        sp = tmp_path / "sidecar.json"
        sp.write_text(json.dumps(sidecar))
        r = client.post("/detect", json={
            "model": mock_model(boxes=[(80, 80, 20, 10, 1, 0.9)]),
            "images": [image_path],
            "anchor": {"sidecar": str(sp), "policy": "depth:2.0"},
        })
        assert r.status_code == 200
        anchor = r.json()["records"][0]["anchor"]
        assert anchor is not None
        assert len(anchor["point"]) == 3
        assert np.linalg.norm(anchor["point"]) == pytest.approx(2.0, abs=1e-6)


class TestBenchEndpoint:
    def test_mock_stage_delays(self, client):
        r = client.post("/bench", json={
            "model": mock_model(fixed_delay_ms=2.0,
                                stage_delays_ms={"preprocess": 1.0, "postprocess": 0.5}),
            "protocol": {"warmup_iterations": 1, "repetitions": 4},
        })
        assert r.status_code == 200
        stages = {s["stage"]: s for s in r.json()["report"]["stages"]}
        assert stages["preprocess"]["mean_ms"] == 1.0
        assert stages["inference"]["mean_ms"] == 2.0
        assert stages["postprocess"]["mean_ms"] == 0.5
        assert stages["total"]["mean_ms"] == 3.5
        assert stages["total"]["samples"] == 4

    def test_reps_below_two_rejected(self, client):
        r = client.post("/bench", json={
            "model": mock_model(),
            "protocol": {"warmup_iterations": 0, "repetitions": 1},
        })
        assert r.status_code == 422

    def test_raw_samples_included(self, client):
        r = client.post("/bench", json={
            "model": mock_model(fixed_delay_ms=1.0),
            "protocol": {"warmup_iterations": 0, "repetitions": 3, "keep_raw_samples": True},
        })
        raw = r.json()["report"]["raw_samples_ms"]
        assert set(raw) >= {"inference", "total"}
        assert len(raw["total"]) == 3

    def test_real_backend_fixture_model(self, client):
        r = client.post("/bench", json={
            "model": {"backend": "reference", "path": str(FIXTURES / "models" / "tiny_det_160.onnx")},
            "protocol": {"warmup_iterations": 1, "repetitions": 3},
        })
        assert r.status_code == 200
        stages = {s["stage"] for s in r.json()["report"]["stages"]}
        assert stages == {"preprocess", "inference", "postprocess", "total"}


class TestSweepEndpoint:
    def test_two_sizes_two_rows(self, client):
        r = client.post("/sweep", json={
            "variants": [{"variant_name": "mock", "mock": {"per_pixel_delay_ms": 0.0002}}],
            "sizes": [160, 224],
            "protocol": {"warmup_iterations": 1, "repetitions": 3},
        })
        assert r.status_code == 200
        body = r.json()
        assert len(body["rows"]) == 2
        assert body["failures"] == []

    def test_failure_row_reason(self, client):
        r = client.post("/sweep", json={
            "variants": [{"variant_name": "mock", "mock": {}}],
            "sizes": [160, 4096],
            "protocol": {"warmup_iterations": 0, "repetitions": 2},
        })
        body = r.json()
        assert len(body["rows"]) == 1
        assert len(body["failures"]) == 1

    def test_dataset_fills_map_columns(self, client):
        r = client.post("/sweep", json={
            "variants": [{"variant_name": "mock",
                          "mock": {"boxes": [[80, 80, 20, 10, 1, 0.9]]}}],
            "sizes": [160],
            "protocol": {"warmup_iterations": 0, "repetitions": 2},
            "frame": {"width": 320, "height": 240, "seed": 0},
            "dataset": {"annotations": str(FIXTURES / "dataset" / "annotations.json"),
                        "images_dir": str(FIXTURES / "dataset" / "images")},
        })
        assert r.status_code == 200
        row = r.json()["rows"][0]
        assert row["map50"] is not None
        assert row["map50_95"] is not None


class TestTileBenchEndpoint:
    def test_pixel_linear_ratio(self, client):
        r = client.post("/tile-bench", json={
            "model": mock_model(per_pixel_delay_ms=0.001),
            "tile_size": 160,
            "protocol": {"warmup_iterations": 1, "repetitions": 3},
        })
        assert r.status_code == 200
        assert r.json()["ratio"] == pytest.approx(0.5, abs=0.05)

    def test_real_backend_needs_large_model(self, client):
        r = client.post("/tile-bench", json={
            "model": {"backend": "reference", "path": str(FIXTURES / "models" / "tiny_det_160.onnx")},
            "tile_size": 160,
        })
        assert r.status_code == 422


class TestSelectEndpoint:
    def rows(self):
        return [
            {"variant_name": "nano", "input_size": 160, "mean_total_ms": 96.0,
             "std_ms": 1.0, "map50": 0.4, "map50_95": 0.25},
            {"variant_name": "small", "input_size": 224, "mean_total_ms": 450.0,
             "std_ms": 1.0, "map50": 0.5, "map50_95": 0.37},
        ]

    def test_select_inline_rows(self, client):
        r = client.post("/select", json={"rows": self.rows(), "budget_ms": 100})
        assert r.status_code == 200
        body = r.json()
        assert body["chosen"]["variant_name"] == "nano"
        assert body["feasible_count"] == 1
        assert len(body["frontier"]) == 1

    def test_infeasible_budget(self, client):
        r = client.post("/select", json={"rows": self.rows(), "budget_ms": 5})
        assert r.status_code == 422
        assert r.json()["error"] == "InfeasibleBudgetError"


class TestEvalEndpoint:
    def test_perfect_detections(self, client, tmp_path):
        ann = {"images": [{"id": 1, "file_name": "a.png"}],
               "annotations": [{"image_id": 1, "bbox": [10, 10, 20, 20], "category_id": 1}],
               "categories": [{"id": 1}]}
        ann_path = tmp_path / "ann.json"
        ann_path.write_text(json.dumps(ann))
        det_path = tmp_path / "dets.json"
        det_path.write_text(json.dumps([
            {"image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20], "score": 0.95},
        ]))
        r = client.post("/eval", json={"annotations": str(ann_path), "detections": str(det_path)})
        assert r.status_code == 200
        body = r.json()
        assert body["map50"] == 1.0
        assert body["map50_95"] == 1.0
        assert body["counts"] == {"images": 1, "ground_truths": 1, "detections": 1}

    def test_grouped_recall(self, client, tmp_path):
        ann = {"images": [], "annotations": [
            {"image_id": 1, "bbox": [0, 0, 10, 10], "category_id": 1, "distance": "1.0m"},
            {"image_id": 1, "bbox": [50, 50, 10, 10], "category_id": 1, "distance": "2.0m"},
        ], "categories": [{"id": 1}]}
        ann_path = tmp_path / "ann.json"
        ann_path.write_text(json.dumps(ann))
        det_path = tmp_path / "dets.json"
        det_path.write_text(json.dumps([
            {"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9},
        ]))
        r = client.post("/eval", json={
            "annotations": str(ann_path), "detections": str(det_path),
            "group_key": "distance",
        })
        body = r.json()
        assert body["recall_by_group"] == {"1.0m": 1.0, "2.0m": 0.0}


class TestConfigEcho:
    def test_rerun_from_embedded_config_reproduces_report(self, client):
        request = {
            "model": mock_model(fixed_delay_ms=1.5,
                                stage_delays_ms={"preprocess": 0.5, "postprocess": 0.25}),
            "protocol": {"warmup_iterations": 1, "repetitions": 4},
        }
        first = client.post("/bench", json=request).json()
        second = client.post("/bench", json=first["resolved_config"]).json()
        assert first == second


class TestPolicyParsing:
    def test_plane_policy_from_file(self, client, image_path, tmp_path):
        from sightline.geometry import make_perspective_projection

        plane = tmp_path / "plane.json"
        plane.write_text(json.dumps({"point": [0, 0, -4], "normal": [0, 0, 1]}))
        proj = make_perspective_projection(60.0, 1280, 720)
        sidecar = {
            "intrinsics": {"projection": [float(v) for v in proj.ravel()],
                           "image_width": 1280, "image_height": 720},
            "poses": [{"timestamp_ns": 0,
                       "camera_to_world": [float(v) for v in np.eye(4).ravel()]}],
            "frames": [{"image": Path(image_path).name, "timestamp_ns": 0}],
        }
        sp = tmp_path / "sidecar.json"
        sp.write_text(json.dumps(sidecar))
        r = client.post("/detect", json={
            "model": mock_model(boxes=[(80, 80, 20, 10, 1, 0.9)]),
            "images": [image_path],
            "anchor": {"sidecar": str(sp), "policy": f"plane:{plane}"},
        })
        assert r.status_code == 200
        point = r.json()["records"][0]["anchor"]["point"]
        assert point[2] == pytest.approx(-4.0, abs=1e-6)

    def test_unknown_policy_rejected(self, client, image_path, tmp_path):
        sp = tmp_path / "sidecar.json"
        sp.write_text(json.dumps({"intrinsics": {"projection": [0] * 16,
                                                 "image_width": 10, "image_height": 10},
                                  "poses": [], "frames": []}))
        r = client.post("/detect", json={
            "model": mock_model(), "images": [image_path],
            "anchor": {"sidecar": str(sp), "policy": "hover"},
        })
        assert r.status_code == 422


class TestBackendSurface:
    def test_accelerated_backend_unavailable(self, client, image_path):
        r = client.post("/detect", json={
            "model": {"backend": "accelerated",
                      "path": str(FIXTURES / "models" / "tiny_det_160.onnx")},
            "images": [image_path],
        })
        assert r.status_code == 422
        assert r.json()["error"] == "BackendUnavailableError"

    def test_layout_override_names(self, client, image_path):
        r = client.post("/detect", json={
            "model": {"backend": "mock", "layout": "channels_last",
                      "mock": {"boxes": [[80, 80, 20, 10, 1, 0.9]]}},
            "images": [image_path],
        })
        assert r.status_code == 200
