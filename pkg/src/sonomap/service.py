"""HTTP service exposing the trained artifacts.

Endpoints (JSON unless noted):
  GET  /health            -> {"status":"ok"}
  GET  /render?px=&py=&pz=&rz=&ry=&rx=&w=&h=   -> PGM bytes
  POST /retrieve          (body: PGM bytes)    -> class/pose/hamming
  POST /refine            (body: JSON with pose + base64 PGM image)
  GET  /dataset           -> manifest echo
  GET  /metrics           -> last training/eval metrics

All loaded artifacts are read-only after startup; requests never mutate
state, so concurrent rendering returns the same bytes as serial execution.
"""

from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .dataset import manifest_to_obj, read_manifest
from .errors import SonomapError
from .field import ImpedanceField
from .geometry import Pose, ProbeGeometry
from .image import read_pgm_bytes, write_pgm_bytes
from .localizer import ConvEncoder, Gallery, retrieve
from .refine import RefineConfig, refine


class ServiceState:
    def __init__(self, checkpoint, dataset, encoder=None, gallery=None, metrics=None):
        self.field = ImpedanceField.load(checkpoint)
        self.dataset = read_manifest(Path(dataset) / "manifest.json"
                                     if Path(dataset).is_dir() else dataset)
        self.encoder = ConvEncoder.load(encoder) if encoder else None
        self.gallery = Gallery.load(gallery) if gallery else None
        self.metrics_path = Path(metrics) if metrics else None

    def render_pgm(self, pose: Pose, w: int, h: int) -> bytes:
        g = self.dataset.geometry
        geom = ProbeGeometry(kind=g.kind, width_mm=g.width_mm, depth_mm=g.depth_mm,
                             image_w=w, image_h=h, apex_offset_mm=g.apex_offset_mm)
        return write_pgm_bytes(self.field.render_image(pose, geom))

    def last_metrics(self) -> dict:
        if self.metrics_path is None or not self.metrics_path.exists():
            return {}
        lines = [l for l in self.metrics_path.read_text().splitlines() if l.strip()]
        if not lines:
            return {}
        step, p, s, loss = lines[-1].split()
        return {"step": int(step), "psnr": float(p), "ssim": float(s), "loss": float(loss)}


def _pose_from_obj(obj: dict) -> Pose:
    return Pose(obj["position_mm"], obj["euler_zyx_rad"])


def _pose_to_obj(pose: Pose) -> dict:
    return {
        "position_mm": [float(x) for x in pose.position],
        "euler_zyx_rad": [float(x) for x in pose.euler_zyx],
    }


class _Handler(BaseHTTPRequestHandler):
    state: ServiceState = None  # set by serve()

    def log_message(self, *a):  # keep test output quiet
        pass

    def _send(self, code: int, body: bytes, ctype: str):
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code: int, obj):
        self._send(code, json.dumps(obj, sort_keys=True).encode(), "application/json")

    def _bad(self, category: str, code: int = 400):
        self._json(code, {"error": category})

    def do_GET(self):
        url = urlparse(self.path)
        try:
            if url.path == "/health":
                return self._json(200, {"status": "ok"})
            if url.path == "/render":
                q = parse_qs(url.query)
                try:
                    pose = Pose(
                        [float(q[k][0]) for k in ("px", "py", "pz")],
                        [float(q[k][0]) for k in ("rz", "ry", "rx")],
                    )
                    g = self.state.dataset.geometry
                    w = int(q.get("w", [g.image_w])[0])
                    h = int(q.get("h", [g.image_h])[0])
                except (KeyError, ValueError):
                    return self._bad("malformed-query")
                return self._send(200, self.state.render_pgm(pose, w, h),
                                  "application/octet-stream")
            if url.path == "/dataset":
                return self._json(200, manifest_to_obj(self.state.dataset))
            if url.path == "/metrics":
                return self._json(200, self.state.last_metrics())
            return self._bad("not-found", 404)
        except SonomapError:
            return self._bad("contract", 400)

    def do_POST(self):
        url = urlparse(self.path)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
            if url.path == "/retrieve":
                if self.state.gallery is None or self.state.encoder is None:
                    return self._bad("no-gallery", 404)
                try:
                    img = read_pgm_bytes(body)
                except SonomapError:
                    return self._bad("malformed-body")
                pose, cls, dist = retrieve(img, self.state.encoder, self.state.gallery)
                return self._json(200, {"class": cls, "pose": _pose_to_obj(pose),
                                        "hamming": dist})
            if url.path == "/refine":
                try:
                    obj = json.loads(body)
                    pose = _pose_from_obj(obj["pose"])
                    img = read_pgm_bytes(base64.b64decode(obj["image"]))
                except (json.JSONDecodeError, KeyError, ValueError, SonomapError):
                    return self._bad("malformed-body")
                cfg = RefineConfig(**obj.get("config", {}))
                result = refine(pose, img, self.state.field, self.state.dataset.geometry, cfg)
                return self._json(200, {
                    "pose": _pose_to_obj(result.pose),
                    "initial_loss": result.initial_loss,
                    "final_loss": result.final_loss,
                    "iterations": result.iterations,
                })
            return self._bad("not-found", 404)
        except SonomapError:
            return self._bad("contract", 400)


def make_server(checkpoint, dataset, encoder=None, gallery=None, metrics=None,
                port: int = 0) -> ThreadingHTTPServer:
    state = ServiceState(checkpoint, dataset, encoder, gallery, metrics)
    handler = type("Handler", (_Handler,), {"state": state})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def serve(checkpoint, dataset, encoder=None, gallery=None, metrics=None,
          port: int = 8080) -> None:
    server = make_server(checkpoint, dataset, encoder, gallery, metrics, port)
    print(f"serving on http://127.0.0.1:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


def start_background(server: ThreadingHTTPServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return t
