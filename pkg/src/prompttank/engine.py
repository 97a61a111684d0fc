"""The per-frame generation loop.

Every tick is end-to-end: drain queued control commands (atomically, at
the tick boundary), resolve automation for the current instant, capture an
input frame, run the pixel chain, compose the weighted prompt set, call
the backend, publish the result.  Nothing carries over between frames
beyond the declared state, so two ticks with equal parameters produce
pixel-identical frames.

One engine loop owns all mutable state.  Control surfaces talk to it only
through the command queue; frames fan out through per-subscriber
latest-wins slots, so a slow consumer drops frames instead of stalling the
loop.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pixels, presets
from .automation import (
    autopilot_tick,
    count_figures,
    crossfade_weights,
    plan_playlist_step,
    pluralise_text,
    resolve_parameters,
    resolve_target,
    AutopilotConfig,
    Crossfade,
    ExternalSignalMap,
    Lfo,
    UnknownParameterError,
)
from .backends import BackendError
from .prompts import (
    NodeError,
    NodeKind,
    ModelParams,
    PromptNode,
    TankLayout,
    compose_prompt_set,
    join_nodes,
    serialize_weighted_prompts,
    weight_for_position,
)
from .state import TankState

log = logging.getLogger(__name__)

MAX_FPS = 60.0
DEGRADED_AFTER_FAILURES = 5


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    """The stateless per-tick bundle handed to a backend."""

    image: np.ndarray
    prompts: tuple
    strength: float
    seed: int
    frame_index: int
    timestamp: float


@dataclass(frozen=True, eq=False)
class Frame:
    """One generated output frame plus its provenance."""

    image: np.ndarray
    request_digest: str
    frame_index: int
    latency_ms: float


def request_digest(request: GenerationRequest) -> str:
    """Stable hash of a request's generation-relevant fields.

    frame_index and timestamp are excluded on purpose: determinism tests
    compare digests across runs, and those two fields are bookkeeping, not
    parameters.  Every other field feeds the hash at full precision.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(request.image.shape[0]).to_bytes(4, "big"))
    h.update(int(request.image.shape[1]).to_bytes(4, "big"))
    h.update(np.ascontiguousarray(request.image).tobytes())
    for prompt in request.prompts:
        text = prompt.text.encode("utf-8")
        h.update(len(text).to_bytes(4, "big"))
        h.update(text)
        h.update(repr(prompt.weight).encode("ascii"))
        h.update(b";")
    h.update(repr(request.strength).encode("ascii"))
    h.update(str(request.seed).encode("ascii"))
    return h.hexdigest()


@dataclass(frozen=True)
class EngineEvent:
    kind: str
    message: str
    frame_index: int
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CommandResult:
    ok: bool
    reason: str | None = None
    message: str = ""
    data: dict = field(default_factory=dict)


class Subscription:
    """Latest-wins frame slot: holds at most one pending frame.

    The engine replaces the slot on every publish; a consumer that cannot
    keep up silently loses the frames in between (``dropped`` counts them).
    Publishing never blocks.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._frame: Frame | None = None
        self._published = 0
        self._consumed = 0
        self.dropped = 0
        self.closed = False

    def publish(self, frame: Frame) -> None:
        with self._cond:
            if self._published > self._consumed:
                self.dropped += 1
            self._frame = frame
            self._published += 1
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> Frame | None:
        """Wait for a frame newer than the last one consumed; None on timeout."""
        with self._cond:
            if not self._cond.wait_for(
                lambda: self._published > self._consumed or self.closed, timeout
            ):
                return None
            if self._published <= self._consumed:
                return None
            self._consumed = self._published
            return self._frame

    def latest(self) -> Frame | None:
        with self._cond:
            return self._frame

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()


class _Metrics:
    def __init__(self, target_fps: float):
        self.target_fps = target_fps
        self.frame_times: deque[float] = deque(maxlen=600)
        self.latencies: deque[float] = deque(maxlen=512)
        self.generated = 0
        self.skipped = 0
        self.consecutive_failures = 0
        self.degraded = False

    def record_frame(self, t: float, latency_ms: float) -> None:
        self.frame_times.append(t)
        self.latencies.append(latency_ms)
        self.generated += 1
        self.consecutive_failures = 0
        self.degraded = False

    def record_skip(self) -> bool:
        """Count a failure; True when the failure streak newly degrades the backend."""
        self.skipped += 1
        self.consecutive_failures += 1
        if self.consecutive_failures == DEGRADED_AFTER_FAILURES and not self.degraded:
            self.degraded = True
            return True
        return False

    def measured_fps(self) -> float:
        if len(self.frame_times) < 2:
            return 0.0
        span = self.frame_times[-1] - self.frame_times[0]
        return (len(self.frame_times) - 1) / span if span > 0 else 0.0

    def as_dict(self) -> dict:
        lat = sorted(self.latencies)
        pct = (
            {
                "p50": float(np.percentile(lat, 50)),
                "p90": float(np.percentile(lat, 90)),
                "p99": float(np.percentile(lat, 99)),
            }
            if lat
            else {"p50": 0.0, "p90": 0.0, "p99": 0.0}
        )
        return {
            "target_fps": self.target_fps,
            "measured_fps": self.measured_fps(),
            "frames_generated": self.generated,
            "frames_skipped": self.skipped,
            "backend_latency_ms": pct,
            "backend_degraded": self.degraded,
            "consecutive_failures": self.consecutive_failures,
        }


class Engine:
    """Owns the tank state and runs the generation loop.

    Can be driven two ways: ``start()`` spawns the paced real-time loop,
    or callers tick manually with explicit timestamps for scripted,
    fully deterministic sessions.  Do not mix the two.
    """

    def __init__(
        self,
        backend,
        source,
        state: TankState | None = None,
        *,
        target_fps: float = 12.0,
        snapshot_dir=None,
        snapshot_interval: float | None = None,
        clock=time.monotonic,
    ):
        if not 0.0 < target_fps <= MAX_FPS:
            raise ValueError(f"target_fps must lie in (0, {MAX_FPS}], got {target_fps!r}")
        self.backend = backend
        self.source = source
        self.state = state if state is not None else TankState()
        self.clock = clock
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.snapshot_interval = snapshot_interval

        self._period = 1.0 / target_fps
        self._target_fps = target_fps
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._subscribers: list[Subscription] = []
        self._listeners: list = []
        self._lock = threading.RLock()
        self._stop_event = threading.Event()
        self._thread: threading.Thread | None = None

        self._generating = True
        self._frame_index = 0
        self._node_counter = 0
        self._signal_values: dict[str, tuple[float, float]] = {}
        self._last_autopilot_fire: float | None = None
        self._last_snapshot_time: float | None = None
        self._last: tuple[Frame, GenerationRequest, object] | None = None
        self._state_version = 0
        self._metrics = _Metrics(target_fps)
        self._configure_backend_timeout()

    # -- wiring ---------------------------------------------------------------

    def subscribe(self) -> Subscription:
        sub = Subscription()
        with self._lock:
            self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.close()
        with self._lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)

    def add_event_listener(self, fn) -> None:
        self._listeners.append(fn)

    def _emit(self, kind: str, message: str, **data) -> None:
        event = EngineEvent(kind=kind, message=message, frame_index=self._frame_index, data=data)
        log.info("engine event %s: %s", kind, message)
        for fn in list(self._listeners):
            try:
                fn(event)
            except Exception:
                log.exception("event listener failed")

    def submit(self, command: dict) -> Future:
        """Queue one command; the future resolves to its CommandResult after the applying tick."""
        fut: Future = Future()
        self._queue.put(([command], fut, False))
        return fut

    def submit_many(self, commands: list[dict]) -> Future:
        """Queue an atomic batch; no frame will ever reflect part of it."""
        fut: Future = Future()
        self._queue.put((list(commands), fut, True))
        return fut

    @property
    def state_version(self) -> int:
        return self._state_version

    @property
    def target_fps(self) -> float:
        return self._target_fps

    @property
    def frame_index(self) -> int:
        return self._frame_index

    def metrics(self) -> dict:
        with self._lock:
            data = self._metrics.as_dict()
            data["last_frame_digest"] = self._last[0].request_digest if self._last else None
            data["generating"] = self._generating
            return data

    def last_frame(self) -> Frame | None:
        with self._lock:
            return self._last[0] if self._last else None

    def frame_png(self, frame_index: int) -> bytes | None:
        """Full-quality PNG of the given frame while it is still current."""
        with self._lock:
            if self._last is None or self._last[0].frame_index != frame_index:
                return None
            return pixels.encode_png(self._last[0].image)

    # -- the tick ---------------------------------------------------------------

    def tick(self, now: float | None = None) -> Frame | None:
        with self._lock:
            now = self.clock() if now is None else now
            if self._last_autopilot_fire is None:
                self._last_autopilot_fire = now
            if self._last_snapshot_time is None:
                self._last_snapshot_time = now

            acks = self._drain_commands(now)
            self._run_autopilot(now)
            self._complete_crossfades(now)

            frame = self._generate(now) if self._generating else None

            if frame is not None and self.snapshot_dir and self.snapshot_interval:
                if now - self._last_snapshot_time >= self.snapshot_interval:
                    self._last_snapshot_time = now
                    try:
                        self._write_snapshot(self.snapshot_dir)
                    except OSError as e:
                        self._emit("snapshot_error", str(e))

            for fut, result in acks:
                if not fut.cancelled():
                    fut.set_result(result)
            return frame

    def _drain_commands(self, now: float) -> list[tuple[Future, object]]:
        acks = []
        while True:
            try:
                commands, fut, batched = self._queue.get_nowait()
            except queue.Empty:
                break
            results = [self._apply(cmd, now) for cmd in commands]
            acks.append((fut, results if batched else results[0]))
        return acks

    def _run_autopilot(self, now: float) -> None:
        actions, fired = autopilot_tick(
            self.state.autopilot, now, self._last_autopilot_fire, self.state.nodes, self.state.layout
        )
        self._last_autopilot_fire = fired
        for action in actions:
            self._commit_step(action)
        if actions:
            self._mark_changed()

    def _commit_step(self, action) -> None:
        # A fade already in flight completes instantly: its incoming text
        # becomes the node's text and the hand-off point for the new fade.
        cancelled = self.state.cancel_crossfades(action.node.id)
        if cancelled is not None and action.crossfade is not None:
            self.state.nodes[action.node.id] = replace(action.node, text=cancelled.new_text)
            self.state.crossfades.append(replace(action.crossfade, old_text=cancelled.new_text))
            return
        self.state.nodes[action.node.id] = action.node
        if action.crossfade is not None:
            self.state.crossfades.append(action.crossfade)

    def _complete_crossfades(self, now: float) -> None:
        remaining = []
        changed = False
        for cf in self.state.crossfades:
            if cf.is_complete(now):
                node = self.state.nodes.get(cf.node_id)
                if node is not None:
                    self.state.nodes[cf.node_id] = replace(node, text=cf.new_text)
                changed = True
            else:
                remaining.append(cf)
        self.state.crossfades = remaining
        if changed:
            self._mark_changed()

    def _generate(self, now: float) -> Frame | None:
        effective = resolve_parameters(self.state, now, self._signal_values)
        raw = self.source.next_frame()
        processed = pixels.apply_chain(raw, effective.pixel)

        figure_count = (
            count_figures(processed, self.state.pluraliser)
            if self.state.pluraliser.enabled
            else None
        )
        prompts = tuple(self._compose_prompts(effective, now, figure_count))
        request = GenerationRequest(
            image=processed,
            prompts=prompts,
            strength=effective.strength,
            seed=effective.seed,
            frame_index=self._frame_index,
            timestamp=now,
        )
        self._frame_index += 1

        started = time.perf_counter()
        try:
            output = self.backend.generate(request)
        except BackendError as e:
            if self._metrics.record_skip():
                self._emit("backend_degraded", f"{DEGRADED_AFTER_FAILURES} consecutive failures")
            self._emit("backend_error", f"{e.kind}: {e}", request_index=request.frame_index)
            return None
        except Exception as e:
            if self._metrics.record_skip():
                self._emit("backend_degraded", f"{DEGRADED_AFTER_FAILURES} consecutive failures")
            self._emit("backend_error", f"unexpected: {e}", request_index=request.frame_index)
            return None
        latency_ms = (time.perf_counter() - started) * 1000.0

        frame = Frame(
            image=output,
            request_digest=request_digest(request),
            frame_index=request.frame_index,
            latency_ms=latency_ms,
        )
        # Rate is measured from tick start times: paced starts never precede
        # their deadline, so measured fps cannot exceed the target.
        self._metrics.record_frame(now, latency_ms)
        self._last = (frame, request, effective)
        for sub in self._subscribers:
            sub.publish(frame)
        return frame

    def _compose_prompts(self, effective, now: float, figure_count: int | None):
        fading = {cf.node_id: cf for cf in effective.active_crossfades}
        population: list[PromptNode] = []
        overrides = dict(effective.weight_overrides)
        for node in self.state.nodes.values():
            if node.kind is NodeKind.ADJUSTMENT:
                continue
            cf = fading.get(node.id)
            if cf is not None:
                # Expand the fade into two synthetic entries sharing the node's
                # position; old before new on equal weights via the id suffix.
                old_w, new_w = crossfade_weights(cf, now)
                overrides.pop(node.id, None)
                for suffix, text, weight in (("~0", cf.old_text, old_w), ("~1", cf.new_text, new_w)):
                    if text:
                        population.append(
                            replace(node, id=node.id + suffix, text=text, playlist=(), playlist_index=0)
                        )
                        overrides[node.id + suffix] = weight
            else:
                text = node.text
                if figure_count is not None and node.pluralise and text:
                    text = pluralise_text(text, figure_count, self.state.pluraliser)
                population.append(node if text == node.text else replace(node, text=text))
        return compose_prompt_set(population, self.state.layout, overrides)

    # -- pacing ------------------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop_event.clear()
        self._thread = threading.Thread(target=self._run, name="prompttank-engine", daemon=True)
        self._thread.start()

    def shutdown(self) -> None:
        self._stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        for sub in list(self._subscribers):
            sub.close()

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def _run(self) -> None:
        deadline = self.clock()
        while not self._stop_event.is_set():
            try:
                self.tick()
            except Exception as e:
                # A live instrument must not die mid-performance.
                log.exception("tick failed")
                self._emit("engine_error", f"tick failed: {e}")
            deadline += self._period
            now = self.clock()
            if deadline <= now:
                deadline = now  # overran: start the next tick immediately, carry no debt
            else:
                # Loop the wait: an early wake must not start a tick before
                # its deadline or the measured rate could creep past target.
                while not self._stop_event.is_set():
                    remaining = deadline - self.clock()
                    if remaining <= 0:
                        break
                    self._stop_event.wait(remaining)

    def _configure_backend_timeout(self) -> None:
        configure = getattr(self.backend, "configure_for_fps", None)
        if callable(configure):
            configure(self._target_fps)

    # -- commands ------------------------------------------------------------------

    def _next_node_id(self) -> str:
        self._node_counter += 1
        return f"node-{self._node_counter}"

    def _mark_changed(self) -> None:
        self._state_version += 1

    def _apply(self, command, now: float) -> CommandResult:
        if not isinstance(command, dict) or "op" not in command:
            return CommandResult(False, "malformed", "command must be an object with an 'op' field")
        op = command["op"]
        if not isinstance(op, str) or not op.isidentifier():
            return CommandResult(False, "unknown_op", f"unknown command op {op!r}")
        handler = getattr(self, f"_cmd_{op}", None)
        if handler is None:
            return CommandResult(False, "unknown_op", f"unknown command op {op!r}")
        args = {k: v for k, v in command.items() if k != "op"}
        try:
            result = handler(now, **args)
        except TypeError as e:
            return CommandResult(False, "malformed", f"bad arguments for {op}: {e}")
        except (NodeError,) as e:
            return CommandResult(False, e.reason, str(e))
        except (ValueError,) as e:
            return CommandResult(False, "out_of_range", str(e))
        if result.ok:
            self._mark_changed()
        return result

    def _require_node(self, node_id) -> PromptNode | CommandResult:
        node = self.state.nodes.get(node_id)
        if node is None:
            return CommandResult(False, "unknown_node", f"no node with id {node_id!r}")
        return node

    def _start_fade(self, node: PromptNode, new_text: str, now: float) -> None:
        """Begin a text handover on a node, cancelling any fade in flight."""
        cancelled = self.state.cancel_crossfades(node.id)
        if cancelled is not None:
            node = replace(node, text=cancelled.new_text)
            self.state.nodes[node.id] = node
        fade_time = self.state.autopilot.crossfade_time
        if fade_time > 0.0 and node.text and node.text != new_text:
            self.state.crossfades.append(
                Crossfade(
                    node_id=node.id,
                    old_text=node.text,
                    new_text=new_text,
                    start_time=now,
                    duration=fade_time,
                    base_weight=weight_for_position(node.y, self.state.layout),
                )
            )
        else:
            self.state.nodes[node.id] = replace(node, text=new_text)

    def _cmd_create_node(self, now, text="", x=0.5, y=0.8, kind="text",
                         playlist=(), pluralise=False, adjustment_id=None):
        node = PromptNode(
            id=self._next_node_id(),
            kind=NodeKind(kind),
            text=text,
            position=(x, y),
            playlist=tuple(playlist),
            pluralise=bool(pluralise),
            adjustment_id=adjustment_id,
        )
        self.state.add_node(node)
        return CommandResult(True, data={"id": node.id})

    def _cmd_edit_node_text(self, now, id, text):
        node = self._require_node(id)
        if isinstance(node, CommandResult):
            return node
        if node.kind is NodeKind.ADJUSTMENT:
            return CommandResult(False, "kind_mismatch", "adjustment nodes carry no text")
        if not isinstance(text, str):
            return CommandResult(False, "malformed", "text must be a string")
        self._start_fade(node, text, now)
        return CommandResult(True, data={"id": id})

    def _cmd_move_node(self, now, id, x, y):
        node = self._require_node(id)
        if isinstance(node, CommandResult):
            return node
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            return CommandResult(False, "out_of_range", f"position ({x}, {y}) outside [0,1]^2")
        self.state.nodes[id] = replace(node, position=(float(x), float(y)))
        return CommandResult(True, data={"id": id, "weight": weight_for_position(float(y), self.state.layout)})

    def _cmd_join_nodes(self, now, a, b):
        node_a = self._require_node(a)
        if isinstance(node_a, CommandResult):
            return node_a
        node_b = self._require_node(b)
        if isinstance(node_b, CommandResult):
            return node_b
        if a == b:
            return CommandResult(False, "malformed", "cannot join a node with itself")
        try:
            joined = join_nodes(node_a, node_b, new_id=self._next_node_id())
        except NodeError as e:
            return CommandResult(False, e.reason, str(e))
        self.state.cancel_crossfades(a)
        self.state.cancel_crossfades(b)
        del self.state.nodes[a]
        del self.state.nodes[b]
        self.state.add_node(joined)
        return CommandResult(True, data={"id": joined.id, "text": joined.text})

    def _cmd_delete_node(self, now, id):
        node = self._require_node(id)
        if isinstance(node, CommandResult):
            return node
        self.state.cancel_crossfades(id)
        del self.state.nodes[id]
        return CommandResult(True, data={"id": id})

    def _cmd_set_pixel_param(self, now, name, value):
        params = self.state.pixel_params
        if not hasattr(params, name) or name.startswith("_"):
            return CommandResult(False, "unknown_parameter", f"no pixel parameter named {name!r}")
        if name == "noise_scale" and isinstance(value, float) and value.is_integer():
            value = int(value)
        if name in ("colourise_tint", "salford_tint"):
            value = tuple(value)
        self.state.pixel_params = replace(params, **{name: value})
        return CommandResult(True, data={name: value})

    def _cmd_set_model_params(self, now, strength=None, seed=None):
        params = self.state.model_params
        self.state.model_params = ModelParams(
            strength=params.strength if strength is None else strength,
            seed=params.seed if seed is None else seed,
        )
        return CommandResult(True)

    def _cmd_set_layout(self, now, active_fraction=None, max_weight=None):
        layout = self.state.layout
        self.state.layout = TankLayout(
            active_fraction=layout.active_fraction if active_fraction is None else active_fraction,
            max_weight=layout.max_weight if max_weight is None else max_weight,
        )
        return CommandResult(True)

    def _cmd_set_autopilot(self, now, enabled=None, period=None, crossfade_time=None, enrolled_nodes=None):
        cfg = self.state.autopilot
        new = AutopilotConfig(
            enabled=cfg.enabled if enabled is None else bool(enabled),
            period=cfg.period if period is None else period,
            crossfade_time=cfg.crossfade_time if crossfade_time is None else crossfade_time,
            enrolled_nodes=cfg.enrolled_nodes if enrolled_nodes is None else frozenset(enrolled_nodes),
        )
        self.state.autopilot = new
        return CommandResult(True, data={"diagnostics": new.diagnostics()})

    def _cmd_next(self, now, id):
        node = self._require_node(id)
        if isinstance(node, CommandResult):
            return node
        action = plan_playlist_step(node, now, self.state.autopilot.crossfade_time, self.state.layout)
        if action is None:
            return CommandResult(True, data={"id": id, "stepped": False})
        self._commit_step(action)
        return CommandResult(True, data={"id": id, "stepped": True})

    def _cmd_add_lfo(self, now, target, frequency, depth, base, phase=0.0):
        try:
            resolve_target(target, self.state.layout, self.state.nodes.keys())
        except UnknownParameterError as e:
            return CommandResult(False, "unknown_parameter", str(e))
        self.state.lfos.append(Lfo(target=target, frequency=frequency, depth=depth, base=base, phase=phase))
        return CommandResult(True, data={"index": len(self.state.lfos) - 1})

    def _cmd_remove_lfo(self, now, index):
        if not isinstance(index, int) or not 0 <= index < len(self.state.lfos):
            return CommandResult(False, "out_of_range", f"no LFO at index {index!r}")
        self.state.lfos.pop(index)
        return CommandResult(True)

    def _cmd_map_signal(self, now, signal_id, target, gain=1.0, offset=0.0, timeout=1.0):
        try:
            resolve_target(target, self.state.layout, self.state.nodes.keys())
        except UnknownParameterError as e:
            return CommandResult(False, "unknown_parameter", str(e))
        mapping = ExternalSignalMap(signal_id=signal_id, target=target, gain=gain, offset=offset, timeout=timeout)
        self.state.signal_maps = [
            m for m in self.state.signal_maps
            if not (m.signal_id == signal_id and m.target == target)
        ] + [mapping]
        return CommandResult(True)

    def _cmd_signal(self, now, signal_id, value):
        if not isinstance(signal_id, str) or not signal_id:
            return CommandResult(False, "malformed", "signal_id must be a non-empty string")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            return CommandResult(False, "malformed", "signal value must be a number")
        self._signal_values[signal_id] = (min(max(float(value), 0.0), 1.0), now)
        return CommandResult(True)

    def _cmd_load_preset(self, now, path):
        try:
            preset = presets.load_preset(path)
        except presets.PresetError as e:
            return CommandResult(False, "preset_error", str(e), data={"field": e.field})
        self.state = preset.to_state()
        self._last_autopilot_fire = now
        return CommandResult(True, data={"name": preset.name})

    def _cmd_save_preset(self, now, path):
        try:
            presets.save_preset(presets.TankPreset.from_state(self.state), path)
        except OSError as e:
            return CommandResult(False, "io_error", str(e))
        return CommandResult(True, data={"path": str(path)})

    def _cmd_snapshot(self, now, dir=None):
        directory = Path(dir) if dir else self.snapshot_dir
        if directory is None:
            return CommandResult(False, "no_snapshot_dir", "no snapshot directory configured")
        if self._last is None:
            return CommandResult(False, "no_frame", "no frame available to snapshot")
        try:
            path = self._write_snapshot(directory)
        except OSError as e:
            self._emit("snapshot_error", str(e))
            return CommandResult(False, "io_error", str(e))
        return CommandResult(True, data={"path": str(path)})

    def _cmd_set_rate(self, now, fps):
        if not isinstance(fps, (int, float)) or isinstance(fps, bool) or not 0.0 < fps <= MAX_FPS:
            return CommandResult(False, "out_of_range", f"fps must lie in (0, {MAX_FPS}], got {fps!r}")
        self._target_fps = float(fps)
        self._period = 1.0 / self._target_fps
        self._metrics.target_fps = self._target_fps
        self._configure_backend_timeout()
        return CommandResult(True, data={"fps": self._target_fps})

    def _cmd_start(self, now):
        self._generating = True
        return CommandResult(True)

    def _cmd_stop(self, now):
        self._generating = False
        return CommandResult(True)

    # -- snapshots -------------------------------------------------------------------

    def _write_snapshot(self, directory: Path) -> Path:
        frame, request, effective = self._last
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        base = directory / f"snapshot_{frame.frame_index:08d}"
        png_path = base.with_suffix(".png")
        pixels.save_png(frame.image, png_path)
        sidecar = {
            "frame_index": frame.frame_index,
            "timestamp": request.timestamp,
            "seed": request.seed,
            "strength": float(request.strength),
            "prompt_string": serialize_weighted_prompts(request.prompts),
            "prompts": [{"text": p.text, "weight": float(p.weight)} for p in request.prompts],
            "request_digest": frame.request_digest,
            "latency_ms": frame.latency_ms,
            "parameters": {
                "layout": {
                    "active_fraction": float(self.state.layout.active_fraction),
                    "max_weight": float(self.state.layout.max_weight),
                },
                "pixel_params": {
                    "brightness": float(effective.pixel.brightness),
                    "contrast": float(effective.pixel.contrast),
                    "gamma": float(effective.pixel.gamma),
                    "colourise_amount": float(effective.pixel.colourise_amount),
                    "colourise_tint": [float(c) for c in effective.pixel.colourise_tint],
                    "noise_gain": float(effective.pixel.noise_gain),
                    "noise_scale": int(effective.pixel.noise_scale),
                    "noise_seed": int(effective.pixel.noise_seed),
                    "salford_mix": float(effective.pixel.salford_mix),
                    "salford_contrast": float(effective.pixel.salford_contrast),
                    "salford_threshold": float(effective.pixel.salford_threshold),
                    "salford_tint": [float(c) for c in effective.pixel.salford_tint],
                    "salford_tint_strength": float(effective.pixel.salford_tint_strength),
                },
                "model_params": {"strength": float(effective.strength), "seed": int(effective.seed)},
                "weight_overrides": {
                    k: float(v) for k, v in sorted(effective.weight_overrides.items())
                },
            },
        }
        sidecar_path = base.with_suffix(".json")
        with open(sidecar_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(sidecar, indent=2, ensure_ascii=False, allow_nan=False) + "\n")
        return png_path

    # -- state views --------------------------------------------------------------------

    def _node_view(self, node: PromptNode) -> dict:
        fade = next((cf for cf in self.state.crossfades if cf.node_id == node.id), None)
        weight = (
            fade.base_weight if fade is not None
            else weight_for_position(node.y, self.state.layout)
        )
        view = {
            "id": node.id,
            "kind": node.kind.value,
            "text": node.text,
            "x": node.position[0],
            "y": node.position[1],
            "weight": weight,
            "playlist": list(node.playlist),
            "playlist_index": node.playlist_index,
            "pluralise": node.pluralise,
            "adjustment_id": node.adjustment_id,
            "joined_from": list(node.joined_from),
        }
        if fade is not None:
            view["fade"] = {
                "old_text": fade.old_text,
                "new_text": fade.new_text,
                "start_time": fade.start_time,
                "duration": fade.duration,
                "base_weight": fade.base_weight,
            }
        return view

    def state_snapshot(self) -> dict:
        """Protocol-shaped view of the whole tank, consistent under the engine lock."""
        with self._lock:
            s = self.state
            return {
                "name": s.name,
                "layout": {
                    "active_fraction": s.layout.active_fraction,
                    "max_weight": s.layout.max_weight,
                },
                "nodes": [self._node_view(n) for n in s.nodes.values()],
                "pixel_params": {
                    "brightness": s.pixel_params.brightness,
                    "contrast": s.pixel_params.contrast,
                    "gamma": s.pixel_params.gamma,
                    "colourise_amount": s.pixel_params.colourise_amount,
                    "colourise_tint": list(s.pixel_params.colourise_tint),
                    "noise_gain": s.pixel_params.noise_gain,
                    "noise_scale": s.pixel_params.noise_scale,
                    "noise_seed": s.pixel_params.noise_seed,
                    "salford_mix": s.pixel_params.salford_mix,
                    "salford_contrast": s.pixel_params.salford_contrast,
                    "salford_threshold": s.pixel_params.salford_threshold,
                    "salford_tint": list(s.pixel_params.salford_tint),
                    "salford_tint_strength": s.pixel_params.salford_tint_strength,
                },
                "model_params": {
                    "strength": s.model_params.strength,
                    "seed": s.model_params.seed,
                },
                "autopilot": {
                    "enabled": s.autopilot.enabled,
                    "period": s.autopilot.period,
                    "crossfade_time": s.autopilot.crossfade_time,
                    "enrolled_nodes": sorted(s.autopilot.enrolled_nodes),
                    "diagnostics": s.autopilot.diagnostics(),
                },
                "pluraliser": {
                    "enabled": s.pluraliser.enabled,
                    "threshold": s.pluraliser.threshold,
                    "min_area_fraction": s.pluraliser.min_area_fraction,
                    "max_count_worded": s.pluraliser.max_count_worded,
                },
                "lfos": [
                    {
                        "target": l.target,
                        "frequency": l.frequency,
                        "depth": l.depth,
                        "base": l.base,
                        "phase": l.phase,
                    }
                    for l in s.lfos
                ],
                "signal_maps": [
                    {
                        "signal_id": m.signal_id,
                        "target": m.target,
                        "gain": m.gain,
                        "offset": m.offset,
                        "timeout": m.timeout,
                    }
                    for m in s.signal_maps
                ],
                # Control state only: per-frame counters live in metrics and
                # frame headers, keeping delta streams quiet while generating.
                "engine": {
                    "generating": self._generating,
                    "target_fps": self._target_fps,
                },
            }
