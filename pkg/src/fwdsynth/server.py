"""Real-time rendering service speaking the frame protocol.

A session lifts the input views once, then answers each pose message with a
rendered frame. Incoming messages are drained between renders so a burst of
poses collapses to the newest one (latest-wins).
"""

from __future__ import annotations

import asyncio
import math
import time

import numpy as np
from fastapi import FastAPI, WebSocket
from starlette.websockets import WebSocketDisconnect

from .errors import DomainError, FormatError, FwdError
from .geometry import Pose, camera_center
from .pipeline import VARIANTS, FwdModel, ViewInput
from .protocol import (
    ERR_BAD_FIELD,
    ERR_BAD_JSON,
    ERR_RENDER,
    FLAG_ZERO_COVERAGE,
    encode_error_message,
    encode_png,
    encode_stats_message,
    pack_frame,
    parse_client_message,
)
from .scenes import MANIFEST_CONVENTION, SceneBundle
from .splat import SplatConfig

DRAIN_TIMEOUT_S = 0.002


class ServeSession:
    """One client's render state over a shared read-only model.

    The lifted clouds depend only on the model weights and the input views,
    so they are computed once (and may be shared between sessions). Config
    messages switch the blend depth or the render path without re-encoding.
    """

    def __init__(self, model: FwdModel, per_view, intr):
        self.model = model
        self.per_view = per_view
        self.intr = intr
        self.variant = model.cfg.variant
        self.k_blend = model.cfg.k_blend
        self._splat_cfg = None  # None means the model's own settings

    def configure(self, k_blend: int | None = None, variant: str | None = None) -> None:
        """Apply a config message; raises DomainError on unusable values."""
        if variant is not None:
            if variant not in VARIANTS:
                raise DomainError(f"unknown variant: {variant}")
            if variant in ("fwd-d", "fwd-u") and self.model.fusion is None:
                raise DomainError(
                    f"loaded model has no fusion module; cannot render as {variant}")
            self.variant = variant
        if k_blend is not None:
            self.k_blend = int(k_blend)
        base = self.model.splat_cfg
        if self.k_blend == self.model.cfg.k_blend:
            self._splat_cfg = None
        else:
            self._splat_cfg = SplatConfig(radius_px=base.radius_px,
                                          k_blend=self.k_blend,
                                          alpha_min_clamp=base.alpha_min_clamp,
                                          depth_mode=base.depth_mode)

    def render(self, R: np.ndarray, T: np.ndarray) -> tuple[bytes, int, float]:
        """Render one pose; returns (png bytes, header flags, render ms)."""
        t0 = time.perf_counter()
        pose = Pose(np.asarray(R, dtype=np.float64), np.asarray(T, dtype=np.float64))
        image_t, aux = self.model.render_target(
            self.per_view, self.intr, pose,
            variant=self.variant if self.variant != self.model.cfg.variant else None,
            splat_cfg=self._splat_cfg)
        image = np.clip(np.asarray(image_t.data, dtype=np.float64), 0.0, 1.0)
        image = image.reshape(self.intr.height, self.intr.width, 3)
        flags = FLAG_ZERO_COVERAGE if int(aux["coverage"].sum()) == 0 else 0
        payload = encode_png(image)
        ms = (time.perf_counter() - t0) * 1000.0
        return payload, flags, ms


def _orbit_of_view(pose: Pose, target: np.ndarray) -> dict:
    """Azimuth/elevation/distance that place an orbit camera at this view."""
    center = camera_center(pose)
    offset = center - target
    dist = float(np.linalg.norm(offset))
    if dist <= 0.0:
        return {"azimuth": 0.0, "elevation": 0.0, "distance": 1.0}
    v = offset / dist
    azimuth = math.atan2(v[0], -v[2])
    elevation = math.asin(max(-1.0, min(1.0, -v[1])))
    return {"azimuth": azimuth, "elevation": elevation, "distance": dist}


def _default_orbit(bundle: SceneBundle, depth_prior: float) -> dict:
    """A starting camera orbit aimed at the scene from the first view."""
    centers = []
    look = []
    for view in bundle.views:
        c = camera_center(view.pose)
        forward = view.pose.R[2, :]
        if view.depth is not None and view.mask is not None and view.mask.any():
            reach = float(np.median(view.depth[view.mask]))
        else:
            reach = depth_prior
        centers.append(c)
        look.append(c + forward * reach)
    target = np.mean(np.asarray(look), axis=0)
    orbit = _orbit_of_view(bundle.views[0].pose, target)
    orbit["target"] = [float(x) for x in target]
    return orbit


def build_meta(model: FwdModel, bundle: SceneBundle) -> dict:
    """The /meta document a viewer reads before opening the socket."""
    intr = bundle.views[0].intr
    return {
        "scene": bundle.name,
        "n_views": len(bundle.views),
        "resolution": [intr.height, intr.width],
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy},
        "convention": MANIFEST_CONVENTION,
        "variant": model.cfg.variant,
        "k_blend": model.cfg.k_blend,
        "n_input_views": model.cfg.n_input_views,
        "orbit": _default_orbit(bundle, model.cfg.depth_prior),
    }


def prepare_inputs(model: FwdModel, bundle: SceneBundle, input_indices=None):
    """Lift the serving input views once; returns (per_view, intrinsics)."""
    if input_indices is None:
        k = min(model.cfg.n_input_views, len(bundle.views))
        input_indices = list(range(k))
    views = [bundle.views[i] for i in input_indices]
    inputs = [ViewInput.from_scene_view(v) for v in views]
    model.eval()
    per_view = model.encode_views(inputs)
    return per_view, views[0].intr


def create_app(model: FwdModel, bundle: SceneBundle, *, input_indices=None,
               static_dir: str | None = None):
    """Build the ASGI app: GET /healthz, GET /meta, WS /ws, optional static UI."""
    per_view, intr = prepare_inputs(model, bundle, input_indices)
    meta = build_meta(model, bundle)
    app = FastAPI()

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/meta")
    async def meta_route():
        return meta

    async def _receive_text(ws: WebSocket) -> str | None:
        """Next text payload, or None when the peer sent binary instead."""
        message = await ws.receive()
        if message["type"] == "websocket.disconnect":
            raise WebSocketDisconnect(message.get("code") or 1000)
        text = message.get("text")
        if text is None:
            await ws.send_text(encode_error_message(
                ERR_BAD_JSON, "expected a text message"))
        return text

    async def _handle_text(ws: WebSocket, session: ServeSession, text: str) -> dict | None:
        """Parse and apply one message; returns the pose dict if it was a pose."""
        try:
            msg = parse_client_message(text)
        except FormatError as exc:
            code = getattr(exc, "code", ERR_BAD_FIELD)
            await ws.send_text(encode_error_message(code, str(exc)))
            return None
        if msg["type"] == "config":
            try:
                session.configure(k_blend=msg.get("k_blend"),
                                  variant=msg.get("variant"))
            except (DomainError, FormatError) as exc:
                await ws.send_text(encode_error_message(ERR_BAD_FIELD, str(exc)))
            return None
        return msg

    @app.websocket("/ws")
    async def ws_route(ws: WebSocket):
        await ws.accept()
        session = ServeSession(model, per_view, intr)
        try:
            while True:
                text = await _receive_text(ws)
                if text is None:
                    continue
                pose_msg = await _handle_text(ws, session, text)
                # Collapse any burst that piled up while we were busy; the
                # newest pose wins, config messages still apply in order.
                while True:
                    try:
                        raw = await asyncio.wait_for(ws.receive(), timeout=DRAIN_TIMEOUT_S)
                    except asyncio.TimeoutError:
                        break
                    if raw["type"] == "websocket.disconnect":
                        raise WebSocketDisconnect(raw.get("code") or 1000)
                    if raw.get("text") is None:
                        await ws.send_text(encode_error_message(
                            ERR_BAD_JSON, "expected a text message"))
                        continue
                    newer = await _handle_text(ws, session, raw["text"])
                    if newer is not None:
                        pose_msg = newer
                if pose_msg is None:
                    continue
                try:
                    payload, flags, ms = await asyncio.to_thread(
                        session.render, pose_msg["R"], pose_msg["T"])
                except FwdError as exc:
                    await ws.send_text(encode_error_message(ERR_RENDER, str(exc)))
                    continue
                await ws.send_bytes(pack_frame(pose_msg["fid"], flags, payload))
                await ws.send_text(encode_stats_message(pose_msg["fid"], ms))
        except WebSocketDisconnect:
            return

    if static_dir is not None:
        from starlette.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="viewer")

    return app
