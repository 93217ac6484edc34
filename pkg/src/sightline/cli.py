"""Command-line client for the sightline service.

Every subcommand builds a request, sends it to the service and writes the
response: to a structured report file (--output) and as a human-readable
table on stdout. By default an embedded in-process instance of the service
handles the request; --server targets a running instance instead (file
paths in the request are then resolved on the server host).

Configuration precedence: command-line flags > --config file > defaults.
The resolved configuration is embedded in every structured report.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .reports import (
    EVAL_SCHEMA,
    LATENCY_SCHEMA,
    SELECT_SCHEMA,
    SWEEP_SCHEMA,
    TILE_SCHEMA,
    canonical_json,
    render_latency_table,
    render_sweep_rows,
)

_LAYOUTS = {"auto": "auto", "nchw-like": "channels_first", "nhwc-like": "channels_last"}


class CommandError(Exception):
    pass


class ServiceClient:
    """HTTP client; embeds the service in-process unless --server is given."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        if response.status_code != 200:
            try:
                body = response.json()
                detail = f"{body.get('error', 'error')}: {body.get('detail', response.text)}"
            except ValueError:
                detail = response.text
            raise CommandError(detail)
        return response.json()


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults. Flags left at None fall through."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandError(f"cannot read config file {args.config}: {exc}")
    resolved = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    return resolved


def _parse_mock_delays(text: str | None) -> tuple[float, dict[str, float]]:
    """'90' -> inference only; '2,90,4' -> preprocess, inference, postprocess."""
    if not text:
        return 0.0, {}
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 1:
        return parts[0], {}
    if len(parts) == 3:
        return parts[1], {"preprocess": parts[0], "postprocess": parts[2]}
    raise CommandError("--mock-delay-ms takes one value or three (pre,infer,post)")


def _model_source(cfg: dict) -> dict:
    fixed, stage_delays = _parse_mock_delays(cfg.get("mock_delay_ms"))
    boxes = []
    for spec in cfg.get("mock_box") or []:
        parts = [float(v) for v in spec.split(",")]
        if len(parts) != 6:
            raise CommandError("--mock-box takes cx,cy,w,h,category,score")
        boxes.append(parts)
    source = {
        "path": cfg.get("model"),
        "backend": cfg["backend"],
        "layout": _LAYOUTS[cfg["layout"]],
        "input_size": cfg.get("size"),
        "variant_name": cfg.get("variant"),
    }
    if cfg["backend"] == "mock":
        source["mock"] = {
            "fixed_delay_ms": fixed,
            "per_pixel_delay_ms": cfg.get("mock_per_pixel_ms") or 0.0,
            "stage_delays_ms": stage_delays,
            "boxes": boxes,
            "category_count": cfg.get("mock_categories") or 3,
            "candidate_count": cfg.get("mock_candidates") or 100,
        }
    return source


def _decode_options(cfg: dict) -> dict:
    return {
        "confidence_threshold": cfg["conf"],
        "nms_iou_threshold": cfg["iou"],
        "max_detections": cfg["max_detections"],
    }


def _protocol_options(cfg: dict) -> dict:
    return {
        "warmup_iterations": cfg["warmup"],
        "repetitions": cfg["reps"],
        "keep_raw_samples": bool(cfg["raw"]),
    }


def _frame_spec(cfg: dict) -> dict | None:
    text = cfg.get("frame_size")
    if not text:
        return None
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CommandError("--frame-size takes WIDTHxHEIGHT")
    return {"width": w, "height": h, "seed": cfg["seed"]}


def _write_output(path: str | None, payload: dict | list) -> None:
    if path:
        Path(path).write_text(canonical_json(payload) if isinstance(payload, dict)
                              else json.dumps(payload, sort_keys=True, separators=(", ", ": ")) + "\n")


_COMMON_DEFAULTS = {
    "model": None,
    "backend": "reference",
    "layout": "auto",
    "size": None,
    "variant": None,
    "seed": 0,
    "conf": 0.25,
    "iou": 0.45,
    "max_detections": 100,
    "mock_delay_ms": None,
    "mock_per_pixel_ms": None,
    "mock_box": None,
    "mock_categories": None,
    "mock_candidates": None,
}


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        **_COMMON_DEFAULTS,
        "images": [],
        "annotations": None,
        "tile": None,
        "overlap": 0,
        "sidecar": None,
        "policy": "ray",
        "output": None,
    })
    if not cfg["images"]:
        raise CommandError("detect needs at least one --images path")
    request = {
        "model": _model_source(cfg),
        "images": cfg["images"],
        "annotations": cfg["annotations"],
        "decode": _decode_options(cfg),
        "tile_size": cfg["tile"],
        "overlap": cfg["overlap"],
        "seed": cfg["seed"],
    }
    if cfg["sidecar"]:
        request["anchor"] = {"sidecar": cfg["sidecar"], "policy": cfg["policy"]}
    response = ServiceClient(args.server).post("/detect", request)
    records = []
    for rec in response["records"]:
        if rec.get("anchor") is None:
            rec = {k: v for k, v in rec.items() if k != "anchor"}
        records.append(rec)
    _write_output(cfg["output"], records)
    print(f"{len(records)} detection(s) across {len(cfg['images'])} image(s)")
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        **_COMMON_DEFAULTS,
        "warmup": 10,
        "reps": 100,
        "raw": False,
        "tile": None,
        "overlap": 0,
        "frame_size": None,
        "output": None,
    })
    request = {
        "model": _model_source(cfg),
        "protocol": _protocol_options(cfg),
        "decode": _decode_options(cfg),
        "tile_size": cfg["tile"],
        "overlap": cfg["overlap"],
        "seed": cfg["seed"],
    }
    frame = _frame_spec(cfg)
    if frame:
        request["frame"] = frame
    response = ServiceClient(args.server).post("/bench", request)
    report = response["report"]
    print(render_latency_table(report["stages"]))
    payload = {"schema": LATENCY_SCHEMA, **response}
    _write_output(cfg["output"], payload)
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        **_COMMON_DEFAULTS,
        "sizes": None,
        "warmup": 10,
        "reps": 100,
        "raw": False,
        "frame_size": None,
        "annotations": None,
        "images_dir": None,
        "output": None,
    })
    if not cfg["sizes"]:
        raise CommandError("sweep needs --sizes, e.g. --sizes 160,224")
    sizes = [int(v) for v in str(cfg["sizes"]).split(",")]
    model_paths = cfg.get("model") or []
    if isinstance(model_paths, str):
        model_paths = [model_paths]
    if cfg["backend"] == "mock":
        variants = [{
            "variant_name": cfg.get("variant") or "mock",
            "backend": "mock",
            "layout": _LAYOUTS[cfg["layout"]],
            "mock": _model_source(cfg)["mock"],
        }]
    elif cfg.get("variant"):
        # all paths are per-size files of one variant
        variants = [{
            "variant_name": cfg["variant"],
            "paths": model_paths,
            "backend": cfg["backend"],
            "layout": _LAYOUTS[cfg["layout"]],
        }]
    else:
        # each path is its own variant, named by file stem
        variants = [{
            "variant_name": Path(p).stem,
            "paths": [p],
            "backend": cfg["backend"],
            "layout": _LAYOUTS[cfg["layout"]],
        } for p in model_paths]
    if not variants:
        raise CommandError("sweep needs --model (repeatable) or --backend mock")
    request = {
        "variants": variants,
        "sizes": sizes,
        "protocol": _protocol_options(cfg),
        "decode": _decode_options(cfg),
        "seed": cfg["seed"],
    }
    frame = _frame_spec(cfg)
    if frame:
        request["frame"] = frame
    if cfg["annotations"] and cfg["images_dir"]:
        request["dataset"] = {"annotations": cfg["annotations"], "images_dir": cfg["images_dir"]}
    response = ServiceClient(args.server).post("/sweep", request)
    print(render_sweep_rows(response["rows"], response["failures"]))
    payload = {"schema": SWEEP_SCHEMA, **response}
    _write_output(cfg["output"], payload)
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_tile_bench(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        **_COMMON_DEFAULTS,
        "tile": 160,
        "large_model": None,
        "warmup": 10,
        "reps": 100,
        "raw": False,
        "frame_size": None,
        "output": None,
    })
    request = {
        "model": _model_source(cfg),
        "tile_size": cfg["tile"],
        "protocol": _protocol_options(cfg),
        "decode": _decode_options(cfg),
        "seed": cfg["seed"],
    }
    if cfg["large_model"]:
        request["large_model"] = {**_model_source(cfg), "path": cfg["large_model"], "input_size": None}
    frame = _frame_spec(cfg)
    if frame:
        request["frame"] = frame
    response = ServiceClient(args.server).post("/tile-bench", request)
    print("tiled:")
    print(render_latency_table(response["tiled"]["stages"]))
    print("single:")
    print(render_latency_table(response["single"]["stages"]))
    print(f"ratio (tiled/single): {response['ratio']:.4f}")
    payload = {"schema": TILE_SCHEMA, **response}
    _write_output(cfg["output"], payload)
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        "table": None,
        "budget_ms": None,
        "metric": "mAP50_95",
        "output": None,
        "seed": 0,
    })
    if cfg["table"] is None or cfg["budget_ms"] is None:
        raise CommandError("select needs --table and --budget-ms")
    request = {
        "table_path": cfg["table"],
        "budget_ms": cfg["budget_ms"],
        "metric": cfg["metric"],
    }
    response = ServiceClient(args.server).post("/select", request)
    chosen = response["chosen"]
    value = chosen["map50"] if cfg["metric"] == "mAP50" else chosen["map50_95"]
    shown = f"{value:.4f}" if value is not None else "n/a"
    print(
        f"chosen: {chosen['variant_name']} @ {chosen['input_size']} "
        f"({chosen['mean_total_ms']:.2f} ms, {cfg['metric']}={shown})"
    )
    print(f"feasible configurations: {response['feasible_count']}")
    print("frontier:")
    print(render_sweep_rows(response["frontier"]))
    payload = {"schema": SELECT_SCHEMA, **response}
    _write_output(cfg["output"], payload)
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, {
        "annotations": None,
        "detections": None,
        "group_key": None,
        "score_threshold": 0.25,
        "recall_iou": 0.5,
        "max_detections": 100,
        "output": None,
    })
    if not cfg["annotations"] or not cfg["detections"]:
        raise CommandError("eval needs --annotations and --detections")
    request = {
        "annotations": cfg["annotations"],
        "detections": cfg["detections"],
        "max_detections_per_image": cfg["max_detections"],
        "group_key": cfg["group_key"],
        "recall_iou_threshold": cfg["recall_iou"],
        "recall_score_threshold": cfg["score_threshold"],
    }
    response = ServiceClient(args.server).post("/eval", request)
    print(f"mAP@50      {response['map50']:.4f}")
    print(f"mAP@50-95   {response['map50_95']:.4f}")
    if response.get("recall_by_group"):
        for tag, recall in sorted(response["recall_by_group"].items()):
            print(f"recall[{tag}]  {recall:.4f}")
    payload = {"schema": EVAL_SCHEMA, **response}
    _write_output(cfg["output"], payload)
    if cfg["output"]:
        print(f"wrote {cfg['output']}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--server", default=None, help="service URL (default: embedded instance)")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None)


def _add_model_flags(p: argparse.ArgumentParser, repeatable_model: bool = False) -> None:
    if repeatable_model:
        p.add_argument("--model", action="append", default=None,
                       help="model file path (repeatable; one file per input size)")
    else:
        p.add_argument("--model", default=None, help="model file path (or name in the model cache)")
    p.add_argument("--backend", choices=["reference", "mock", "accelerated"], default=None)
    p.add_argument("--layout", choices=sorted(_LAYOUTS), default=None)
    p.add_argument("--size", type=int, default=None, help="network input side length")
    p.add_argument("--variant", default=None, help="variant name for reports")
    p.add_argument("--conf", type=float, default=None, help="confidence threshold")
    p.add_argument("--iou", type=float, default=None, help="NMS IoU threshold")
    p.add_argument("--max-detections", type=int, default=None, dest="max_detections")
    p.add_argument("--mock-delay-ms", default=None, dest="mock_delay_ms",
                   help="mock delay: one value (inference) or pre,infer,post")
    p.add_argument("--mock-per-pixel-ms", type=float, default=None, dest="mock_per_pixel_ms")
    p.add_argument("--mock-box", action="append", default=None, dest="mock_box",
                   help="canned mock detection cx,cy,w,h,category,score (repeatable)")
    p.add_argument("--mock-categories", type=int, default=None, dest="mock_categories")
    p.add_argument("--mock-candidates", type=int, default=None, dest="mock_candidates")


def _add_protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--warmup", type=int, default=None, help="untimed warm-up runs")
    p.add_argument("--reps", type=int, default=None, help="timed repetitions")
    p.add_argument("--raw", action="store_const", const=True, default=None,
                   help="persist per-iteration samples in the report")
    p.add_argument("--frame-size", default=None, dest="frame_size", help="synthetic frame WxH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sightline", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run detection on images")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--images", nargs="+", default=None)
    p.add_argument("--annotations", default=None, help="COCO file mapping file names to image ids")
    p.add_argument("--tile", type=int, default=None, help="tile size for tiled inference")
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--sidecar", default=None, help="pose/intrinsics sidecar for anchoring")
    p.add_argument("--policy", default=None, help="ray | depth:<m> | plane:<file>")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="stage-level latency benchmark")
    _add_common(p)
    _add_model_flags(p)
    _add_protocol_flags(p)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="latency (and optional accuracy) over input sizes")
    _add_common(p)
    _add_model_flags(p, repeatable_model=True)
    _add_protocol_flags(p)
    p.add_argument("--sizes", default=None, help="comma-separated input sizes")
    p.add_argument("--annotations", default=None)
    p.add_argument("--images-dir", default=None, dest="images_dir")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tile-bench", help="tiled batch vs single large input")
    _add_common(p)
    _add_model_flags(p)
    _add_protocol_flags(p)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--large-model", default=None, dest="large_model",
                   help="model taking the doubled input size (real backend)")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_tile_bench)

    p = sub.add_parser("select", help="pick the best configuration within a latency budget")
    _add_common(p)
    p.add_argument("--table", default=None, help="sweep table report file")
    p.add_argument("--budget-ms", type=float, default=None, dest="budget_ms")
    p.add_argument("--metric", choices=["mAP50", "mAP50_95"], default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="COCO-style evaluation of a detections file")
    _add_common(p)
    p.add_argument("--annotations", default=None)
    p.add_argument("--detections", default=None)
    p.add_argument("--group-key", default=None, dest="group_key",
                   help="annotation attribute carrying the recall group tag")
    p.add_argument("--score-threshold", type=float, default=None, dest="score_threshold")
    p.add_argument("--recall-iou", type=float, default=None, dest="recall_iou")
    p.add_argument("--max-detections", type=int, default=None, dest="max_detections")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
