"""Time- and signal-driven parameter modulation.

Everything here is pure: given a timestamp and a snapshot of the latest
external signal values, evaluation is deterministic and side-effect free.
Mutation of the underlying state (new crossfades, config changes, fresh
signal samples) is the engine's job, serialized through its between-frame
command queue.

Modulators address parameters by path.  Scalar pixel-chain parameters live
under ``pixel.*``, diffusion strength under ``model.strength``, and node
weight overrides under ``node.<id>.weight``; each path has a declared range
and every emitted value is clamped to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .pixels import PARAM_RANGES, PixelChainParams, luma
from .prompts import PromptNode, TankLayout, step_playlist, weight_for_position

MODULATABLE_PIXEL_PARAMS = (
    "brightness",
    "contrast",
    "gamma",
    "colourise_amount",
    "noise_gain",
    "salford_mix",
)

#: Static parameter paths available as modulation targets.
PARAMETER_PATHS: dict[str, tuple[float, float]] = {
    **{f"pixel.{name}": PARAM_RANGES[name] for name in MODULATABLE_PIXEL_PARAMS},
    "model.strength": (0.0, 1.0),
}


class UnknownParameterError(ValueError):
    """A modulator was bound to a parameter path that does not exist."""

    def __init__(self, path: str):
        super().__init__(f"unknown parameter path: {path!r}")
        self.path = path


def resolve_target(
    path: str,
    layout: TankLayout | None = None,
    node_ids: Iterable[str] | None = None,
) -> tuple[float, float]:
    """Validate a parameter path at bind time and return its value range.

    Node weight paths take their upper bound from the layout's max_weight;
    when ``node_ids`` is given, the referenced node must exist.
    """
    if path in PARAMETER_PATHS:
        return PARAMETER_PATHS[path]
    parts = path.split(".")
    if len(parts) == 3 and parts[0] == "node" and parts[2] == "weight" and parts[1]:
        if node_ids is not None and parts[1] not in set(node_ids):
            raise UnknownParameterError(path)
        return (0.0, layout.max_weight if layout is not None else 1.0)
    raise UnknownParameterError(path)


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


# --- crossfades -------------------------------------------------------------


@dataclass(frozen=True)
class Crossfade:
    """Timed linear hand-off of weight from an outgoing to an incoming text.

    ``base_weight`` is the node's position-derived weight captured when the
    fade starts; the fade owns the node's weight for its whole duration, so
    old + new always sums to exactly ``base_weight``.
    """

    node_id: str
    old_text: str
    new_text: str
    start_time: float
    duration: float
    base_weight: float

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError(f"crossfade duration must be > 0, got {self.duration!r}")

    def progress(self, t: float) -> float:
        # Endpoints pinned so completion and the weight split agree exactly
        # even when (start + duration) - start rounds below duration.
        if t <= self.start_time:
            return 0.0
        if self.is_complete(t):
            return 1.0
        return _clamp((t - self.start_time) / self.duration, 0.0, 1.0)

    def is_complete(self, t: float) -> bool:
        return t >= self.start_time + self.duration


def crossfade_weights(cf: Crossfade, t: float) -> tuple[float, float]:
    """Split the base weight between outgoing and incoming text at time t.

    Linear ramp; evaluation before the start clamps to progress 0.  The
    pair is constructed so that old + new == base_weight holds bit-exactly
    for every t (the incoming weight is recomputed from the rounded
    outgoing one, which Sterbenz's lemma makes an exact subtraction).
    """
    p = cf.progress(t)
    incoming = cf.base_weight * p
    old = cf.base_weight - incoming
    new = cf.base_weight - old
    return old, new


# --- oscillators and external signals ---------------------------------------


@dataclass(frozen=True)
class Lfo:
    """Sine low-frequency oscillator bound to one parameter path."""

    target: str
    frequency: float
    depth: float
    base: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0.0:
            raise ValueError(f"lfo frequency must be > 0 Hz, got {self.frequency!r}")
        if self.depth < 0.0:
            raise ValueError(f"lfo depth must be >= 0, got {self.depth!r}")


def _lfo_raw(l: Lfo, t: float) -> float:
    return l.base + l.depth * math.sin(2.0 * math.pi * l.frequency * t + l.phase)


def lfo_value(l: Lfo, t: float, value_range: tuple[float, float] | None = None) -> float:
    """Evaluate the oscillator at time t, clamped to its target's range."""
    lo, hi = value_range if value_range is not None else resolve_target(l.target)
    return _clamp(_lfo_raw(l, t), lo, hi)


@dataclass(frozen=True)
class ExternalSignalMap:
    """Mapping from a named external signal to a parameter path.

    Signals arrive as normalized [0,1] envelope values on the control
    protocol.  A signal older than ``timeout`` seconds is stale and
    contributes the offset only, so a silent source releases its grip on
    the parameter instead of pinning it at the last loud value.
    """

    signal_id: str
    target: str
    gain: float = 1.0
    offset: float = 0.0
    timeout: float = 1.0

    def __post_init__(self):
        if not self.signal_id:
            raise ValueError("signal_id must be non-empty")
        if not self.timeout > 0.0:
            raise ValueError(f"signal timeout must be > 0, got {self.timeout!r}")


#: Latest sample per signal id: value in [0,1] plus receive timestamp.
SignalSnapshot = Mapping[str, tuple[float, float]]


def _external_raw(m: ExternalSignalMap, now: float, snapshot: SignalSnapshot) -> float:
    latest = snapshot.get(m.signal_id)
    if latest is None or now - latest[1] > m.timeout:
        return m.offset
    return m.offset + m.gain * latest[0]


def external_value(
    m: ExternalSignalMap,
    now: float,
    snapshot: SignalSnapshot,
    value_range: tuple[float, float] | None = None,
) -> float:
    """Evaluate a signal mapping at ``now``, clamped to its target's range."""
    lo, hi = value_range if value_range is not None else resolve_target(m.target)
    return _clamp(_external_raw(m, now, snapshot), lo, hi)


# --- autopilot ---------------------------------------------------------------


@dataclass(frozen=True)
class AutopilotConfig:
    """Unattended playlist stepping on a timer, with configured fade times."""

    enabled: bool = False
    period: float = 20.0
    crossfade_time: float = 4.0
    enrolled_nodes: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.period > 0.0:
            raise ValueError(f"autopilot period must be > 0, got {self.period!r}")
        if self.crossfade_time < 0.0:
            raise ValueError(f"crossfade_time must be >= 0, got {self.crossfade_time!r}")
        object.__setattr__(self, "enrolled_nodes", frozenset(self.enrolled_nodes))

    def diagnostics(self) -> list[str]:
        if self.crossfade_time >= self.period:
            return [
                f"crossfade_time ({self.crossfade_time}s) is not shorter than the "
                f"period ({self.period}s); fades will overlap the next step"
            ]
        return []


@dataclass(frozen=True)
class StepAction:
    """One planned playlist advance: the updated node plus an optional fade."""

    node: PromptNode
    crossfade: Crossfade | None


def plan_playlist_step(
    node: PromptNode,
    now: float,
    crossfade_time: float,
    layout: TankLayout,
) -> StepAction | None:
    """Advance a node's playlist, deferring the text switch to a fade.

    With a positive crossfade time the returned node keeps its current text
    and the fade carries old and new; the engine commits the new text when
    the fade completes.  With no fade time the text switches instantly.
    Returns None when the playlist is empty or the step lands on the same
    text.
    """
    stepped, ok = step_playlist(node)
    if not ok:
        return None
    if crossfade_time > 0.0 and stepped.text != node.text:
        held = replace(stepped, text=node.text)
        fade = Crossfade(
            node_id=node.id,
            old_text=node.text,
            new_text=stepped.text,
            start_time=now,
            duration=crossfade_time,
            base_weight=weight_for_position(node.y, layout),
        )
        return StepAction(node=held, crossfade=fade)
    return StepAction(node=stepped, crossfade=None)


def autopilot_tick(
    cfg: AutopilotConfig,
    t: float,
    last_fire: float,
    nodes: Mapping[str, PromptNode],
    layout: TankLayout,
) -> tuple[list[StepAction], float]:
    """Fire the autopilot if its period has elapsed.

    On firing, every enrolled node with a non-empty playlist gets a planned
    step wrapped in a crossfade of the configured time (all on the same
    tick, so enrolled prompts change together like a scene).  Returns the
    actions plus the updated last-fire time.
    """
    if not cfg.enabled or t - last_fire < cfg.period:
        return [], last_fire
    actions = []
    for node_id in sorted(cfg.enrolled_nodes):
        node = nodes.get(node_id)
        if node is None or not node.playlist:
            continue
        action = plan_playlist_step(node, t, cfg.crossfade_time, layout)
        if action is not None:
            actions.append(action)
    return actions, t


# --- pluraliser --------------------------------------------------------------

_NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
)


@dataclass(frozen=True)
class PluraliserConfig:
    """Figure counting on the input image, driving prompt text amendment.

    Figures are dark connected regions (the silhouettes a shadow-capture
    setup produces): pixels with luma below ``threshold``, grouped by
    4-connectivity, kept when their area reaches ``min_area_fraction`` of
    the image.
    """

    enabled: bool = False
    threshold: float = 0.35
    min_area_fraction: float = 0.01
    max_count_worded: int = 9

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold!r}")
        if not 0.0 < self.min_area_fraction < 1.0:
            raise ValueError(
                f"min_area_fraction must lie in (0,1), got {self.min_area_fraction!r}"
            )
        if self.max_count_worded < 0:
            raise ValueError(f"max_count_worded must be >= 0, got {self.max_count_worded!r}")


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def count_figures(img: np.ndarray, cfg: PluraliserConfig) -> int:
    """Count dark connected components large enough to be figures."""
    mask = luma(np.asarray(img, dtype=np.float64)) < cfg.threshold
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return 0
    min_area = cfg.min_area_fraction * mask.shape[0] * mask.shape[1]
    areas = np.bincount(labels.ravel())[1:]
    return int(np.count_nonzero(areas >= min_area))


def pluralise_text(base: str, count: int, cfg: PluraliserConfig) -> str:
    """Prefix a count word onto a prompt ("priests", 2 -> "two priests").

    Counts of 0 and 1 leave the text untouched (no singularisation is
    attempted); counts past ``max_count_worded`` fall back to the decimal
    numeral.  Always applied to the pristine base text, never to a
    previously pluralised one.
    """
    if count < 2:
        return base
    if count <= cfg.max_count_worded and count < len(_NUMBER_WORDS):
        return f"{_NUMBER_WORDS[count]} {base}"
    return f"{count} {base}"


# --- combined evaluation ------------------------------------------------------


@dataclass(frozen=True)
class EffectiveParams:
    """Snapshot of every parameter after modulation at one instant."""

    pixel: PixelChainParams
    strength: float
    seed: int
    weight_overrides: dict[str, float] = field(default_factory=dict)
    active_crossfades: tuple[Crossfade, ...] = ()


def resolve_parameters(state, t: float, signals: SignalSnapshot | None = None) -> EffectiveParams:
    """Fold every modulator into one effective parameter map.

    ``state`` needs nodes, layout, pixel_params, model_params, lfos,
    signal_maps and crossfades (see TankState).  Modulators targeting the
    same parameter are summed as deviations around the parameter's base
    value, then clamped once to the declared range.  Crossfade overrides
    replace the affected node's weight with the frozen base weight; the
    engine expands them into old/new prompt pairs at composition time.

    Pure: identical (state, t, signals) always produce identical output.
    """
    signals = signals or {}
    deviations: dict[str, float] = {}

    def accumulate(path: str, raw: float, base: float) -> None:
        deviations[path] = deviations.get(path, 0.0) + (raw - base)

    def base_value(path: str) -> float:
        if path.startswith("pixel."):
            return getattr(state.pixel_params, path[len("pixel."):])
        if path == "model.strength":
            return state.model_params.strength
        node_id = path.split(".")[1]
        node = state.nodes.get(node_id)
        return weight_for_position(node.y, state.layout) if node else 0.0

    for lfo in state.lfos:
        accumulate(lfo.target, _lfo_raw(lfo, t), base_value(lfo.target))
    for m in state.signal_maps:
        accumulate(m.target, _external_raw(m, t, signals), base_value(m.target))

    pixel_updates: dict[str, float] = {}
    strength = state.model_params.strength
    weight_overrides: dict[str, float] = {}
    for path, deviation in deviations.items():
        lo, hi = resolve_target(path, state.layout)
        effective = _clamp(base_value(path) + deviation, lo, hi)
        if path.startswith("pixel."):
            pixel_updates[path[len("pixel."):]] = effective
        elif path == "model.strength":
            strength = effective
        else:
            weight_overrides[path.split(".")[1]] = effective

    pixel = replace(state.pixel_params, **pixel_updates) if pixel_updates else state.pixel_params

    active = tuple(cf for cf in state.crossfades if not cf.is_complete(t))
    for cf in active:
        # The fade owns the node's weight until it completes.
        weight_overrides[cf.node_id] = cf.base_weight

    return EffectiveParams(
        pixel=pixel,
        strength=strength,
        seed=state.model_params.seed,
        weight_overrides=weight_overrides,
        active_crossfades=active,
    )
