"""WebSocket frame streaming: poses in, RGB8 frames and telemetry out.

Each connection owns one pipeline (its own buffer and config) over the
shared read-only field and renderer.  The render loop always takes the
latest pending pose and drops stale ones, so the pose sequence the
buffer actually sees stays smooth under client-side flooding.

Wire format per frame: a 16-byte little-endian header
(u32 magic 0x53524E46, u32 frame_id, u16 width, u16 height,
u8 format 0 = RGB8, 3 pad bytes) followed by width*height*3 bytes of
row-major RGB, then one JSON stats message.
"""

from __future__ import annotations

import asyncio
import json
import math
import os
import struct
import time

import anyio.to_thread
import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, HTMLResponse
from fastapi.staticfiles import StaticFiles

from .geometry import CameraIntrinsics, Pose
from .pipeline import (
    RenderBuffer,
    config_from_meta,
    intrinsics_from_meta,
    render_next,
)
from .scene import load_checkpoint, to_uint8
from .trainer import model_from_checkpoint

FRAME_MAGIC = 0x53524E46
FRAME_HEADER = struct.Struct("<IIHHB3x")
FORMAT_RGB8 = 0
ROTATION_TOL = 1e-3

_FALLBACK_PAGE = """<!doctype html>
<html><head><title>warpfield</title></head>
<body>
<h1>warpfield server</h1>
<p>No viewer assets found. Build the browser viewer (frontend/) and pass
its dist directory, or connect a WebSocket client to <code>/render</code>.</p>
</body></html>
"""


class _Session:
    """Per-connection pipeline state plus a rendered-pose trace."""

    def __init__(self, state, n_threads: int) -> None:
        self.cfg = config_from_meta(state.meta, n_threads=n_threads)
        self.intr = intrinsics_from_meta(state.meta)
        self.buf = RenderBuffer(self.cfg.l)
        self.frame_id = 0
        self.latest_pose: Pose | None = None
        self.latest_m: list[float] | None = None
        self.new_pose = asyncio.Event()
        self.sent_poses: list[list[float]] = []
        self.rendered_poses: list[list[float]] = []

    def snap_size(self, w: int, h: int, max_res: int) -> None:
        # The conv renderer downsamples twice, so the output size must be a
        # multiple of 4 as well as of the low-res factor s.
        grid = max(4, self.cfg.s)
        while grid % 4 or grid % self.cfg.s:
            grid += 1
        w = min(max(grid, (int(w) // grid) * grid), max_res)
        h = min(max(grid, (int(h) // grid) * grid), max_res)
        scale = w / self.intr.width
        self.intr = CameraIntrinsics(
            fx=self.intr.fx * scale, fy=self.intr.fy * scale,
            cx=w / 2.0, cy=h / 2.0, width=w, height=h,
        )

    def set_fov_y(self, fov_y_deg: float) -> None:
        f = (self.intr.height / 2.0) / math.tan(math.radians(fov_y_deg) / 2.0)
        self.intr = CameraIntrinsics(
            fx=f, fy=f, cx=self.intr.width / 2.0, cy=self.intr.height / 2.0,
            width=self.intr.width, height=self.intr.height,
        )


def _parse_pose(data: dict) -> tuple[Pose, list[float]]:
    m = data.get("m")
    arr = np.asarray(m, dtype=np.float64)
    if arr.shape != (16,):
        raise ValueError("pose message needs 'm': 16 floats, row-major 4x4")
    mat = arr.reshape(4, 4)
    r_c2w = mat[:3, :3]
    if np.max(np.abs(r_c2w.T @ r_c2w - np.eye(3))) > ROTATION_TOL:
        raise ValueError("pose rotation is not orthonormal")
    center = mat[:3, 3]
    return Pose(rotation=r_c2w.T, translation=-r_c2w.T @ center), [float(v) for v in arr]


async def _send_error(ws: WebSocket, lock: asyncio.Lock, message: str) -> None:
    async with lock:
        await ws.send_text(json.dumps({"type": "error", "message": message}))


async def _handle_message(
    ws: WebSocket, sess: _Session, lock: asyncio.Lock, text: str, max_res: int
) -> None:
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("message must be a JSON object")
        kind = data.get("type")
        if kind == "pose":
            pose, raw = _parse_pose(data)
            if "fov_y" in data:
                sess.set_fov_y(float(data["fov_y"]))
            sess.latest_pose = pose
            sess.latest_m = raw
            sess.sent_poses.append(raw)
            sess.new_pose.set()
        elif kind == "config":
            if "use_guidance" in data:
                sess.cfg.use_guidance = bool(data["use_guidance"])
            if "use_nn" in data:
                sess.cfg.use_neural_renderer = bool(data["use_nn"])
            if data.get("reset"):
                sess.buf.clear()
        elif kind == "resize":
            sess.snap_size(int(data["w"]), int(data["h"]), max_res)
        else:
            raise ValueError(f"unknown message type {kind!r}")
    except WebSocketDisconnect:
        raise
    except Exception as exc:
        await _send_error(ws, lock, str(exc))


async def _render_loop(
    ws: WebSocket, state, sess: _Session, lock: asyncio.Lock, stop: asyncio.Event
) -> None:
    while not stop.is_set():
        await sess.new_pose.wait()
        if stop.is_set():
            return
        sess.new_pose.clear()
        pose, raw_m, intr = sess.latest_pose, sess.latest_m, sess.intr
        buffer_len = len(sess.buf)
        t0 = time.perf_counter()
        try:
            image, stats = await anyio.to_thread.run_sync(
                render_next, state.field, state.occ, state.renderer,
                sess.buf, pose, intr, sess.cfg,
            )
        except Exception as exc:
            await _send_error(ws, lock, str(exc))
            continue
        wall_ms = (time.perf_counter() - t0) * 1e3
        sess.frame_id += 1
        sess.rendered_poses.append(raw_m)
        header = FRAME_HEADER.pack(
            FRAME_MAGIC, sess.frame_id, intr.width, intr.height, FORMAT_RGB8
        )
        payload = to_uint8(image).tobytes()
        telemetry = {
            "type": "stats",
            "frame_id": sess.frame_id,
            "fps": 1000.0 / wall_ms if wall_ms > 0 else 0.0,
            "samples_per_ray": stats.samples_per_ray_mean,
            "guided_fraction": stats.guided_pixel_fraction,
            "ms_volume": stats.ms_volume,
            "ms_warp": stats.ms_warp,
            "ms_nn": stats.ms_neural,
            "buffer_len": buffer_len,
        }
        try:
            async with lock:  # frame and its stats stay adjacent
                await ws.send_bytes(header + payload)
                await ws.send_text(json.dumps(telemetry))
        except Exception:
            return


def create_app(
    ckpt_path: str,
    n_threads: int = 1,
    max_res: int = 1024,
    static_dir: str | None = None,
) -> FastAPI:
    """Build the streaming app around one loaded checkpoint."""
    ckpt = load_checkpoint(ckpt_path)
    field, renderer = model_from_checkpoint(ckpt)
    occ = None
    res = ckpt.meta.get("occ_resolution")
    if res is not None:
        try:
            occ = field.rebuild_occupancy(
                tuple(int(v) for v in res), float(ckpt.meta.get("occ_threshold", 0.01))
            )
        except ValueError:
            occ = None

    app = FastAPI(title="warpfield", docs_url=None, redoc_url=None)
    app.state.meta = ckpt.meta
    app.state.field = field
    app.state.renderer = renderer
    app.state.occ = occ
    app.state.sessions = []
    app.state.n_threads = n_threads
    app.state.max_res = max_res

    index_page = None
    if static_dir and os.path.isdir(static_dir):
        index = os.path.join(static_dir, "index.html")
        if os.path.isfile(index):
            index_page = index
        app.mount("/assets", StaticFiles(directory=static_dir), name="assets")

    @app.get("/")
    async def root():
        if index_page:
            return FileResponse(index_page)
        return HTMLResponse(_FALLBACK_PAGE)

    @app.websocket("/render")
    async def render_socket(ws: WebSocket) -> None:
        await ws.accept()
        sess = _Session(app.state, app.state.n_threads)
        app.state.sessions.append(sess)
        stop = asyncio.Event()
        lock = asyncio.Lock()
        task = asyncio.create_task(_render_loop(ws, app.state, sess, lock, stop))
        try:
            while True:
                message = await ws.receive()
                if message["type"] == "websocket.disconnect":
                    break
                text = message.get("text")
                if text is None:
                    await _send_error(ws, lock, "expected a text JSON message")
                    continue
                await _handle_message(ws, sess, lock, text, app.state.max_res)
        except WebSocketDisconnect:
            pass
        finally:
            stop.set()
            sess.new_pose.set()
            task.cancel()
            await asyncio.gather(task, return_exceptions=True)

    return app
