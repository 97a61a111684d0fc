"""Mutable whole-tank state owned by the engine.

TankState is everything a performance session is made of: the node
population, zone layout, pixel chain settings, model parameters and the
automation configuration, plus runtime-only pieces (active crossfades)
that never persist.  The serializable view of this lives in
:mod:`prompttank.presets`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .automation import (
    AutopilotConfig,
    Crossfade,
    ExternalSignalMap,
    Lfo,
    PluraliserConfig,
)
from .pixels import PixelChainParams
from .prompts import ModelParams, PromptNode, TankLayout


@dataclass
class TankState:
    name: str = "untitled"
    nodes: dict[str, PromptNode] = field(default_factory=dict)
    layout: TankLayout = field(default_factory=TankLayout)
    pixel_params: PixelChainParams = field(default_factory=PixelChainParams)
    model_params: ModelParams = field(default_factory=ModelParams)
    autopilot: AutopilotConfig = field(default_factory=AutopilotConfig)
    pluraliser: PluraliserConfig = field(default_factory=PluraliserConfig)
    lfos: list[Lfo] = field(default_factory=list)
    signal_maps: list[ExternalSignalMap] = field(default_factory=list)
    # Runtime only; never serialized.
    crossfades: list[Crossfade] = field(default_factory=list)

    def add_node(self, node: PromptNode) -> None:
        self.nodes[node.id] = node

    def cancel_crossfades(self, node_id: str) -> Crossfade | None:
        """Drop any active fade on the node, returning the newest cancelled one."""
        cancelled = None
        kept = []
        for cf in self.crossfades:
            if cf.node_id == node_id:
                cancelled = cf
            else:
                kept.append(cf)
        self.crossfades = kept
        return cancelled
