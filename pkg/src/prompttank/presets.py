"""Preset persistence: whole-tank state as a canonical text document.

One preset is one whole tank.  The on-disk format is a canonical JSON
key/value tree: UTF-8, two-space indent, fixed field order, floats in
shortest round-trip form, trailing newline.  Identical states therefore
produce byte-identical files, and save -> load -> save is a fixed point at
the byte level.  The format is human-readable on purpose, so performers
can hand-edit presets between shows.

Loading validates everything and is all-or-nothing: a document that
violates any invariant is rejected with a diagnostic naming the offending
field, and nothing is loaded.  Unknown fields found in a document are
preserved and re-emitted on save (after the known fields, sorted by name),
so presets written by newer versions survive a round-trip through this
one.

Playlist progress is intentionally not stored: a loaded scene always
starts every playlist from the top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .automation import (
    AutopilotConfig,
    ExternalSignalMap,
    Lfo,
    PluraliserConfig,
    UnknownParameterError,
    resolve_target,
)
from .pixels import PARAM_RANGES, PixelChainParams
from .prompts import ModelParams, NodeKind, PromptNode, TankLayout
from .state import TankState

FORMAT_VERSION = 1

_NODE_KINDS = tuple(k.value for k in NodeKind)


class PresetError(ValueError):
    """A preset document failed to load; ``field`` names the offender."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field = field_path


@dataclass(frozen=True)
class TankPreset:
    """Serializable snapshot of a whole tank."""

    name: str
    nodes: tuple[PromptNode, ...]
    layout: TankLayout
    pixel_params: PixelChainParams
    model_params: ModelParams
    autopilot: AutopilotConfig
    pluraliser: PluraliserConfig
    lfos: tuple[Lfo, ...]
    signal_maps: tuple[ExternalSignalMap, ...]
    format_version: int = FORMAT_VERSION
    # Unknown document fields keyed by location ("" = top level, "layout",
    # "nodes[2]", ...), preserved for forward compatibility.
    extras: dict[str, dict[str, Any]] = field(default_factory=dict)

    def to_state(self) -> TankState:
        return TankState(
            name=self.name,
            nodes={n.id: n for n in self.nodes},
            layout=self.layout,
            pixel_params=self.pixel_params,
            model_params=self.model_params,
            autopilot=self.autopilot,
            pluraliser=self.pluraliser,
            lfos=list(self.lfos),
            signal_maps=list(self.signal_maps),
        )

    @classmethod
    def from_state(cls, state: TankState) -> "TankPreset":
        return cls(
            name=state.name,
            nodes=tuple(state.nodes.values()),
            layout=state.layout,
            pixel_params=state.pixel_params,
            model_params=state.model_params,
            autopilot=state.autopilot,
            pluraliser=state.pluraliser,
            lfos=tuple(state.lfos),
            signal_maps=tuple(state.signal_maps),
        )


# --- document emission -------------------------------------------------------


def _with_extras(known: dict, extras: dict[str, Any] | None) -> dict:
    if extras:
        for key in sorted(extras):
            known[key] = extras[key]
    return known


def _node_doc(node: PromptNode, extras) -> dict:
    return _with_extras(
        {
            "id": node.id,
            "kind": node.kind.value,
            "text": node.text,
            "position": [float(node.position[0]), float(node.position[1])],
            "playlist": list(node.playlist),
            "pluralise": node.pluralise,
            "adjustment_id": node.adjustment_id,
            "joined_from": list(node.joined_from),
        },
        extras,
    )


def preset_to_doc(preset: TankPreset) -> dict:
    """Build the canonical document tree for a preset."""
    ex = preset.extras
    doc = {
        "format_version": preset.format_version,
        "name": preset.name,
        "layout": _with_extras(
            {
                "active_fraction": float(preset.layout.active_fraction),
                "max_weight": float(preset.layout.max_weight),
            },
            ex.get("layout"),
        ),
        "model_params": _with_extras(
            {
                "strength": float(preset.model_params.strength),
                "seed": int(preset.model_params.seed),
            },
            ex.get("model_params"),
        ),
        "pixel_params": _with_extras(
            {
                "brightness": float(preset.pixel_params.brightness),
                "contrast": float(preset.pixel_params.contrast),
                "gamma": float(preset.pixel_params.gamma),
                "colourise_amount": float(preset.pixel_params.colourise_amount),
                "colourise_tint": [float(c) for c in preset.pixel_params.colourise_tint],
                "noise_gain": float(preset.pixel_params.noise_gain),
                "noise_scale": int(preset.pixel_params.noise_scale),
                "noise_seed": int(preset.pixel_params.noise_seed),
                "salford_mix": float(preset.pixel_params.salford_mix),
                "salford_contrast": float(preset.pixel_params.salford_contrast),
                "salford_threshold": float(preset.pixel_params.salford_threshold),
                "salford_tint": [float(c) for c in preset.pixel_params.salford_tint],
                "salford_tint_strength": float(preset.pixel_params.salford_tint_strength),
            },
            ex.get("pixel_params"),
        ),
        "autopilot": _with_extras(
            {
                "enabled": preset.autopilot.enabled,
                "period": float(preset.autopilot.period),
                "crossfade_time": float(preset.autopilot.crossfade_time),
                "enrolled_nodes": sorted(preset.autopilot.enrolled_nodes),
            },
            ex.get("autopilot"),
        ),
        "pluraliser": _with_extras(
            {
                "enabled": preset.pluraliser.enabled,
                "threshold": float(preset.pluraliser.threshold),
                "min_area_fraction": float(preset.pluraliser.min_area_fraction),
                "max_count_worded": int(preset.pluraliser.max_count_worded),
            },
            ex.get("pluraliser"),
        ),
        "lfos": [
            _with_extras(
                {
                    "target": l.target,
                    "frequency": float(l.frequency),
                    "depth": float(l.depth),
                    "base": float(l.base),
                    "phase": float(l.phase),
                },
                ex.get(f"lfos[{i}]"),
            )
            for i, l in enumerate(preset.lfos)
        ],
        "signal_maps": [
            _with_extras(
                {
                    "signal_id": m.signal_id,
                    "target": m.target,
                    "gain": float(m.gain),
                    "offset": float(m.offset),
                    "timeout": float(m.timeout),
                },
                ex.get(f"signal_maps[{i}]"),
            )
            for i, m in enumerate(preset.signal_maps)
        ],
        "nodes": [
            _node_doc(n, ex.get(f"nodes[{i}]")) for i, n in enumerate(preset.nodes)
        ],
    }
    return _with_extras(doc, ex.get(""))


def dumps_preset(preset: TankPreset) -> str:
    return json.dumps(preset_to_doc(preset), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def save_preset(preset: TankPreset, path) -> None:
    """Write the canonical preset document. Identical presets give identical bytes."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_preset(preset))


# --- document parsing and validation ------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


class _Section:
    """Cursor over one JSON object, tracking consumed keys for extras."""

    def __init__(self, doc: Any, path: str):
        if not isinstance(doc, dict):
            raise PresetError(path or "document", "expected an object")
        self.doc = doc
        self.path = path
        self.seen: set[str] = set()

    def _get(self, key: str):
        if key not in self.doc:
            raise PresetError(self._sub(key), "missing required field")
        self.seen.add(key)
        return self.doc[key]

    def _sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def number(self, key: str, lo=None, hi=None, exclusive=False) -> float:
        v = self._get(key)
        if not _is_number(v):
            raise PresetError(self._sub(key), f"expected a number, got {v!r}")
        v = float(v)
        ok = True
        if lo is not None:
            ok = ok and (v > lo if exclusive else v >= lo)
        if hi is not None:
            ok = ok and (v < hi if exclusive else v <= hi)
        if not ok:
            bounds = f"({lo}, {hi})" if exclusive else f"[{lo}, {hi}]"
            raise PresetError(self._sub(key), f"value {v!r} outside {bounds}")
        return v

    def integer(self, key: str, lo=None, hi=None) -> int:
        v = self._get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise PresetError(self._sub(key), f"expected an integer, got {v!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise PresetError(self._sub(key), f"value {v!r} outside [{lo}, {hi}]")
        return v

    def string(self, key: str, non_empty=False, nullable=False) -> str | None:
        v = self._get(key)
        if v is None and nullable:
            return None
        if not isinstance(v, str):
            raise PresetError(self._sub(key), f"expected a string, got {v!r}")
        if non_empty and not v:
            raise PresetError(self._sub(key), "must be non-empty")
        return v

    def boolean(self, key: str) -> bool:
        v = self._get(key)
        if not isinstance(v, bool):
            raise PresetError(self._sub(key), f"expected a boolean, got {v!r}")
        return v

    def string_list(self, key: str) -> list[str]:
        v = self._get(key)
        if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
            raise PresetError(self._sub(key), "expected a list of strings")
        return v

    def triple(self, key: str) -> tuple[float, float, float]:
        v = self._get(key)
        if (not isinstance(v, list) or len(v) != 3
                or not all(_is_number(c) and 0.0 <= c <= 1.0 for c in v)):
            raise PresetError(self._sub(key), "expected an RGB triple with channels in [0,1]")
        return tuple(float(c) for c in v)

    def pair(self, key: str, lo: float, hi: float) -> tuple[float, float]:
        v = self._get(key)
        if (not isinstance(v, list) or len(v) != 2
                or not all(_is_number(c) and lo <= c <= hi for c in v)):
            raise PresetError(self._sub(key), f"expected an [x, y] pair within [{lo}, {hi}]")
        return float(v[0]), float(v[1])

    def object_list(self, key: str) -> list:
        v = self._get(key)
        if not isinstance(v, list):
            raise PresetError(self._sub(key), "expected a list")
        return v

    def extras(self) -> dict[str, Any]:
        return {k: v for k, v in self.doc.items() if k not in self.seen}


def _parse_node(doc, path: str) -> tuple[PromptNode, dict]:
    sec = _Section(doc, path)
    node_id = sec.string("id", non_empty=True)
    kind = sec.string("kind")
    if kind not in _NODE_KINDS:
        raise PresetError(f"{path}.kind", f"unknown node kind {kind!r}")
    text = sec.string("text")
    position = sec.pair("position", 0.0, 1.0)
    playlist = tuple(sec.string_list("playlist"))
    pluralise = sec.boolean("pluralise")
    adjustment_id = sec.string("adjustment_id", nullable=True)
    joined_from = tuple(sec.string_list("joined_from"))
    if kind == "adjustment":
        if text:
            raise PresetError(f"{path}.text", "adjustment nodes carry no text")
        if not adjustment_id:
            raise PresetError(f"{path}.adjustment_id", "adjustment nodes require adjustment_id")
    elif adjustment_id is not None:
        raise PresetError(f"{path}.adjustment_id", f"{kind} nodes cannot set adjustment_id")
    node = PromptNode(
        id=node_id,
        kind=NodeKind(kind),
        text=text,
        position=position,
        playlist=playlist,
        pluralise=pluralise,
        adjustment_id=adjustment_id,
        joined_from=joined_from,
    )
    return node, sec.extras()


def doc_to_preset(doc: Any) -> TankPreset:
    """Validate a parsed document tree and build the preset, all-or-nothing."""
    top = _Section(doc, "")
    extras: dict[str, dict[str, Any]] = {}

    version = top.integer("format_version")
    if version != FORMAT_VERSION:
        raise PresetError("format_version", f"unsupported version {version} (supported: {FORMAT_VERSION})")
    name = top.string("name")

    sec = _Section(top._get("layout"), "layout")
    layout = TankLayout(
        active_fraction=sec.number("active_fraction", 0.0, 1.0, exclusive=True),
        max_weight=sec.number("max_weight", 0.0, None, exclusive=True),
    )
    if sec.extras():
        extras["layout"] = sec.extras()

    sec = _Section(top._get("model_params"), "model_params")
    model = ModelParams(
        strength=sec.number("strength", 0.0, 1.0),
        seed=sec.integer("seed", 0),
    )
    if sec.extras():
        extras["model_params"] = sec.extras()

    sec = _Section(top._get("pixel_params"), "pixel_params")
    pixel = PixelChainParams(
        brightness=sec.number("brightness", *PARAM_RANGES["brightness"]),
        contrast=sec.number("contrast", *PARAM_RANGES["contrast"]),
        gamma=sec.number("gamma", *PARAM_RANGES["gamma"]),
        colourise_amount=sec.number("colourise_amount", *PARAM_RANGES["colourise_amount"]),
        colourise_tint=sec.triple("colourise_tint"),
        noise_gain=sec.number("noise_gain", *PARAM_RANGES["noise_gain"]),
        noise_scale=sec.integer("noise_scale", 1),
        noise_seed=sec.integer("noise_seed"),
        salford_mix=sec.number("salford_mix", *PARAM_RANGES["salford_mix"]),
        salford_contrast=sec.number("salford_contrast", *PARAM_RANGES["salford_contrast"]),
        salford_threshold=sec.number("salford_threshold", *PARAM_RANGES["salford_threshold"]),
        salford_tint=sec.triple("salford_tint"),
        salford_tint_strength=sec.number("salford_tint_strength", *PARAM_RANGES["salford_tint_strength"]),
    )
    if sec.extras():
        extras["pixel_params"] = sec.extras()

    sec = _Section(top._get("autopilot"), "autopilot")
    autopilot = AutopilotConfig(
        enabled=sec.boolean("enabled"),
        period=sec.number("period", 0.0, None, exclusive=True),
        crossfade_time=sec.number("crossfade_time", 0.0),
        enrolled_nodes=frozenset(sec.string_list("enrolled_nodes")),
    )
    if sec.extras():
        extras["autopilot"] = sec.extras()

    sec = _Section(top._get("pluraliser"), "pluraliser")
    pluraliser_cfg = PluraliserConfig(
        enabled=sec.boolean("enabled"),
        threshold=sec.number("threshold", 0.0, 1.0, exclusive=True),
        min_area_fraction=sec.number("min_area_fraction", 0.0, 1.0, exclusive=True),
        max_count_worded=sec.integer("max_count_worded", 0),
    )
    if sec.extras():
        extras["pluraliser"] = sec.extras()

    nodes: list[PromptNode] = []
    node_ids: set[str] = set()
    for i, entry in enumerate(top.object_list("nodes")):
        node, node_extras = _parse_node(entry, f"nodes[{i}]")
        if node.id in node_ids:
            raise PresetError(f"nodes[{i}].id", f"duplicate node id {node.id!r}")
        node_ids.add(node.id)
        nodes.append(node)
        if node_extras:
            extras[f"nodes[{i}]"] = node_extras

    def _check_target(path_str: str, field_path: str) -> str:
        try:
            resolve_target(path_str, layout, node_ids)
        except UnknownParameterError:
            raise PresetError(field_path, f"unknown parameter path {path_str!r}") from None
        return path_str

    lfos: list[Lfo] = []
    for i, entry in enumerate(top.object_list("lfos")):
        sec = _Section(entry, f"lfos[{i}]")
        lfos.append(Lfo(
            target=_check_target(sec.string("target", non_empty=True), f"lfos[{i}].target"),
            frequency=sec.number("frequency", 0.0, None, exclusive=True),
            depth=sec.number("depth", 0.0),
            base=sec.number("base"),
            phase=sec.number("phase"),
        ))
        if sec.extras():
            extras[f"lfos[{i}]"] = sec.extras()

    signal_maps: list[ExternalSignalMap] = []
    for i, entry in enumerate(top.object_list("signal_maps")):
        sec = _Section(entry, f"signal_maps[{i}]")
        signal_maps.append(ExternalSignalMap(
            signal_id=sec.string("signal_id", non_empty=True),
            target=_check_target(sec.string("target", non_empty=True), f"signal_maps[{i}].target"),
            gain=sec.number("gain"),
            offset=sec.number("offset"),
            timeout=sec.number("timeout", 0.0, None, exclusive=True),
        ))
        if sec.extras():
            extras[f"signal_maps[{i}]"] = sec.extras()

    if top.extras():
        extras[""] = top.extras()

    return TankPreset(
        name=name,
        nodes=tuple(nodes),
        layout=layout,
        pixel_params=pixel,
        model_params=model,
        autopilot=autopilot,
        pluraliser=pluraliser_cfg,
        lfos=tuple(lfos),
        signal_maps=tuple(signal_maps),
        format_version=version,
        extras=extras,
    )


def loads_preset(text: str) -> TankPreset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise PresetError("", f"malformed document: {e}") from None
    return doc_to_preset(doc)


def load_preset(path) -> TankPreset:
    """Load and validate a preset file; failure loads nothing."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise PresetError("", f"preset file not found: {path}") from None
    return loads_preset(text)
