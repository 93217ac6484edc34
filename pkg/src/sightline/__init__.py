"""sightline: real-time object detection pipeline and benchmark toolkit.

Library layers: frame acquisition model, preprocessing, inference engine
(reference CPU + mock backends), output decoding and NMS, tiled batched
inference, 3D anchoring, a latency profiling harness, COCO-style
evaluation, and latency-budget configuration selection. A FastAPI service
wraps the library; the CLI is a thin client of that service.
"""

__version__ = "0.1.0"
