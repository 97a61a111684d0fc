"""Network control surface: WebSocket protocol, frame streaming, UI serving.

One bidirectional message channel per client over a standard WebSocket
handshake.  Control traffic is JSON text; preview frames are binary
messages with a fixed 16-byte header (four 32-bit big-endian unsigned
integers: frame_index, width, height, payload length) followed by a JPEG
payload.  Full-quality PNGs are fetched over a sibling HTTP endpoint,
``GET /frame/{frame_index}.png``, valid while that frame is still current.

Message kinds
-------------
client -> server:
  hello    {token?, subscribe_frames?, preview_quality?}   once, first
  command  {op, ...}; requires a client seq for acknowledgment
  signal   {signal_id, value in [0,1]}; fire-and-forget
server -> client:
  hello        greeting + protocol version
  state_full   whole-tank snapshot; starts the delta sequence
  state_delta  changed top-level sections only; gapless per-connection seq
  command      acknowledgment (applied/rejected + reason), echoing seq
  frame        binary preview (see header above)
  metrics      periodic engine counters
  error        malformed input or engine events; never closes the socket

Every command gets exactly one acknowledgment, sent after the tick that
applied it.  All engine mutation flows through the engine's command queue;
multiple clients interleave by arrival order.  A slow consumer only ever
loses preview frames (latest-wins), never control messages.
"""

from __future__ import annotations

import asyncio
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .engine import CommandResult, Engine

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
FRAME_HEADER = struct.Struct(">IIII")
TOKEN_ENV = "PROMPTTANK_TOKEN"
LISTEN_ENV = "PROMPTTANK_LISTEN"

#: Commands accepted over the wire; anything else is rejected before it
#: reaches the engine.
WIRE_COMMANDS = frozenset({
    "create_node", "edit_node_text", "move_node", "join_nodes", "delete_node",
    "set_pixel_param", "set_model_params", "set_layout", "set_autopilot",
    "next", "add_lfo", "remove_lfo", "map_signal", "signal",
    "load_preset", "save_preset", "snapshot", "set_rate", "start", "stop",
})


@dataclass
class ServerConfig:
    token: str | None = field(default_factory=lambda: os.environ.get(TOKEN_ENV) or None)
    preview_quality: int = 80
    metrics_interval: float = 1.0
    state_poll_interval: float = 0.05
    ui_dir: Path | None = None
    headless: bool = False


def compute_delta(old: dict, new: dict) -> dict:
    """Changed top-level sections; applying with dict-merge reproduces new."""
    return {key: value for key, value in new.items() if old.get(key) != value}


def apply_delta(snapshot: dict, delta: dict) -> dict:
    return {**snapshot, **delta}


class _EventFanout:
    """Bridges engine-thread events into per-connection asyncio queues."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sinks: set[tuple[asyncio.AbstractEventLoop, asyncio.Queue]] = set()

    def attach(self, loop, queue) -> None:
        with self._lock:
            self._sinks.add((loop, queue))

    def detach(self, loop, queue) -> None:
        with self._lock:
            self._sinks.discard((loop, queue))

    def __call__(self, event) -> None:
        with self._lock:
            sinks = list(self._sinks)
        for loop, queue in sinks:
            try:
                loop.call_soon_threadsafe(queue.put_nowait, event)
            except RuntimeError:
                pass  # loop already closed


class _Connection:
    def __init__(self, socket: WebSocket, engine: Engine, config: ServerConfig,
                 fanout: _EventFanout):
        self.socket = socket
        self.engine = engine
        self.config = config
        self.fanout = fanout
        self.send_lock = asyncio.Lock()
        self.sync_seq = 0
        self.last_snapshot: dict = {}
        self.subscribe_frames = False
        self.preview_quality = config.preview_quality

    async def send(self, kind: str, payload, seq: int | None = None) -> None:
        message = {"kind": kind, "payload": payload}
        if seq is not None:
            message["seq"] = seq
        async with self.send_lock:
            await self.socket.send_json(message)

    async def send_error(self, reason: str, message: str, seq=None) -> None:
        await self.send("error", {"reason": reason, "message": message}, seq)

    async def handshake(self) -> bool:
        try:
            first = await self.socket.receive_json()
        except (ValueError, KeyError):
            await self.send_error("malformed", "expected a JSON hello message")
            return False
        if not isinstance(first, dict) or first.get("kind") != "hello":
            await self.send_error("bad_handshake", "first message must be kind 'hello'")
            return False
        payload = first.get("payload") or {}
        if not isinstance(payload, dict):
            payload = {}
        if self.config.token is not None and payload.get("token") != self.config.token:
            await self.send_error("auth_failed", "missing or wrong token")
            return False
        self.subscribe_frames = bool(payload.get("subscribe_frames", True))
        quality = payload.get("preview_quality")
        if isinstance(quality, int) and 1 <= quality <= 100:
            self.preview_quality = quality
        await self.send("hello", {
            "server": "prompttank",
            "protocol": PROTOCOL_VERSION,
            "frame_header": "u32be frame_index, width, height, payload_len",
        })
        self.last_snapshot = self.engine.state_snapshot()
        await self.send("state_full", self.last_snapshot, seq=self.sync_seq)
        return True

    async def handle_message(self, message) -> None:
        if not isinstance(message, dict) or "kind" not in message:
            await self.send_error("malformed", "messages must be objects with a 'kind'")
            return
        kind = message.get("kind")
        payload = message.get("payload")
        if kind == "command":
            await self.handle_command(message.get("seq"), payload)
        elif kind == "signal":
            self.handle_signal(payload)
        elif kind == "hello":
            await self.send_error("bad_handshake", "hello is only valid once")
        else:
            await self.send_error("unknown_kind", f"unsupported message kind {kind!r}")

    async def handle_command(self, seq, payload) -> None:
        if not isinstance(seq, int):
            await self.send_error("malformed", "commands require an integer seq")
            return
        if not isinstance(payload, dict) or not isinstance(payload.get("op"), str):
            await self.send("command", {"status": "rejected", "reason": "malformed",
                                        "message": "payload must carry a string 'op'"}, seq)
            return
        if payload["op"] not in WIRE_COMMANDS:
            await self.send("command", {"status": "rejected", "reason": "unknown_op",
                                        "message": f"unknown command {payload['op']!r}"}, seq)
            return
        future = self.engine.submit(dict(payload))
        try:
            result: CommandResult = await asyncio.wrap_future(future)
        except Exception as e:  # engine shut down mid-command
            await self.send("command", {"status": "rejected", "reason": "engine_unavailable",
                                        "message": str(e)}, seq)
            return
        body = {"status": "applied" if result.ok else "rejected", "data": result.data}
        if not result.ok:
            body["reason"] = result.reason
            body["message"] = result.message
        await self.send("command", body, seq)

    def handle_signal(self, payload) -> None:
        # Fire-and-forget by contract: no acknowledgment beyond receipt.
        if not isinstance(payload, dict):
            return
        self.engine.submit({"op": "signal",
                            "signal_id": payload.get("signal_id"),
                            "value": payload.get("value")})

    async def state_sync_task(self) -> None:
        last_version = self.engine.state_version
        while True:
            await asyncio.sleep(self.config.state_poll_interval)
            version = self.engine.state_version
            if version == last_version:
                continue
            last_version = version
            snapshot = self.engine.state_snapshot()
            delta = compute_delta(self.last_snapshot, snapshot)
            if not delta:
                continue
            self.last_snapshot = snapshot
            self.sync_seq += 1
            await self.send("state_delta", delta, seq=self.sync_seq)

    async def frame_task(self) -> None:
        from . import pixels

        subscription = self.engine.subscribe()
        try:
            while True:
                frame = await asyncio.to_thread(subscription.get, 0.5)
                if frame is None:
                    continue
                payload = await asyncio.to_thread(
                    pixels.encode_jpeg, frame.image, self.preview_quality
                )
                height, width = frame.image.shape[0], frame.image.shape[1]
                header = FRAME_HEADER.pack(frame.frame_index, width, height, len(payload))
                async with self.send_lock:
                    await self.socket.send_bytes(header + payload)
        finally:
            self.engine.unsubscribe(subscription)

    async def metrics_task(self) -> None:
        while True:
            await asyncio.sleep(self.config.metrics_interval)
            await self.send("metrics", self.engine.metrics())

    async def events_task(self) -> None:
        queue: asyncio.Queue = asyncio.Queue()
        loop = asyncio.get_running_loop()
        self.fanout.attach(loop, queue)
        try:
            while True:
                event = await queue.get()
                await self.send("error", {
                    "reason": event.kind,
                    "message": event.message,
                    "frame_index": event.frame_index,
                    "data": event.data,
                })
        finally:
            self.fanout.detach(loop, queue)

    async def run(self) -> None:
        await self.socket.accept()
        if not await self.handshake():
            await self.socket.close()
            return
        tasks = [
            asyncio.create_task(self.state_sync_task()),
            asyncio.create_task(self.metrics_task()),
            asyncio.create_task(self.events_task()),
        ]
        if self.subscribe_frames:
            tasks.append(asyncio.create_task(self.frame_task()))
        try:
            while True:
                try:
                    message = await self.socket.receive_json()
                except ValueError:
                    await self.send_error("malformed", "frames from client must be JSON text")
                    continue
                await self.handle_message(message)
        except WebSocketDisconnect:
            pass
        finally:
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)


def create_app(engine: Engine, config: ServerConfig | None = None) -> FastAPI:
    config = config or ServerConfig()
    app = FastAPI(title="prompttank control server")
    fanout = _EventFanout()
    engine.add_event_listener(fanout)
    app.state.engine = engine
    app.state.config = config

    @app.websocket("/ws")
    async def websocket_endpoint(socket: WebSocket):
        await _Connection(socket, engine, config, fanout).run()

    @app.get("/frame/{frame_index}.png")
    def frame_png(frame_index: int):
        data = engine.frame_png(frame_index)
        if data is None:
            return JSONResponse({"error": "frame_expired"}, status_code=410)
        return Response(content=data, media_type="image/png")

    @app.get("/metrics")
    def metrics():
        return engine.metrics()

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "running": engine.running}

    if config.ui_dir is not None and not config.headless and Path(config.ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app


def default_ui_dir() -> Path | None:
    """Locate a built UI bundle next to the package or the working directory."""
    candidates = [
        Path.cwd() / "frontend" / "dist",
        Path(__file__).resolve().parent.parent.parent / "frontend" / "dist",
    ]
    for candidate in candidates:
        if candidate.is_dir():
            return candidate
    return None
