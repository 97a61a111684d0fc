"""Prompt nodes, tank geometry, and weighted prompt composition.

The tank canvas is a unit square with y=0 at the top edge.  Nodes in the
upper ``active_fraction`` of the canvas carry a weight that grows linearly
toward the top; everything below that line is storage and contributes
nothing.  Composition turns the node population into an ordered list of
weighted prompt strings for a generator backend.

All types here are immutable values; operations return new nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping


class NodeKind(str, Enum):
    TEXT = "text"
    ADJUSTMENT = "adjustment"
    AUTOMATED = "automated"


class NodeError(ValueError):
    """A node operation violated the node typing rules.

    ``reason`` is a stable machine-readable code ("kind_mismatch",
    "empty_text") surfaced in command rejections.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class TankLayout:
    """Split of the canvas into active (top) and storage (bottom) zones.

    ``active_fraction`` is the fraction of canvas height, measured from the
    top, inside which nodes carry weight.  ``max_weight`` is the weight a
    node has when parked at the very top edge.
    """

    active_fraction: float = 1.0 / 3.0
    max_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.active_fraction < 1.0:
            raise ValueError(
                f"active_fraction must be in (0, 1) exclusive, got {self.active_fraction!r}"
            )
        if not self.max_weight > 0.0:
            raise ValueError(f"max_weight must be > 0, got {self.max_weight!r}")


@dataclass(frozen=True)
class PromptNode:
    """A movable prompt object whose vertical position sets its weight.

    ``kind`` distinguishes plain text prompts, adjustment handles (which
    drive one pixel-chain parameter and carry no text) and automated nodes
    (text nodes with automation behaviour attached, e.g. pluralisation).
    """

    id: str
    kind: NodeKind = NodeKind.TEXT
    text: str = ""
    position: tuple[float, float] = (0.5, 0.8)
    playlist: tuple[str, ...] = ()
    playlist_index: int = 0
    pluralise: bool = False
    adjustment_id: str | None = None
    joined_from: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        object.__setattr__(self, "playlist", tuple(self.playlist))
        object.__setattr__(self, "joined_from", tuple(self.joined_from))
        if not isinstance(self.id, str) or not self.id:
            raise ValueError(f"node id must be a non-empty string, got {self.id!r}")
        if not isinstance(self.text, str):
            raise ValueError(f"node text must be a string, got {self.text!r}")
        if not all(isinstance(entry, str) for entry in self.playlist):
            raise ValueError("playlist entries must be strings")
        if not all(isinstance(entry, str) for entry in self.joined_from):
            raise ValueError("joined_from entries must be strings")
        if len(self.position) != 2:
            raise ValueError(f"position must be an (x, y) pair, got {self.position!r}")
        x, y = self.position
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"node position must lie in [0,1]^2, got {self.position}")
        if self.kind is NodeKind.ADJUSTMENT:
            if self.text:
                raise NodeError("kind_mismatch", "adjustment nodes carry no text")
            if not self.adjustment_id:
                raise NodeError("kind_mismatch", "adjustment nodes require adjustment_id")
        elif self.adjustment_id is not None:
            raise NodeError("kind_mismatch", f"{self.kind.value} nodes cannot set adjustment_id")
        if not 0 <= self.playlist_index < max(1, len(self.playlist)):
            raise ValueError(
                f"playlist_index {self.playlist_index} out of range for "
                f"playlist of length {len(self.playlist)}"
            )

    @property
    def y(self) -> float:
        return self.position[1]


@dataclass(frozen=True)
class WeightedPrompt:
    """One entry of the composed prompt set."""

    text: str
    weight: float

    def __post_init__(self):
        if not self.text:
            raise ValueError("weighted prompt text must be non-empty")
        if self.weight < 0.0:
            raise ValueError(f"weight must be >= 0, got {self.weight!r}")


@dataclass(frozen=True)
class ModelParams:
    """Generator settings surfaced to the performer: diffusion strength and seed."""

    strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0,1], got {self.strength!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed!r}")


def weight_for_position(y: float, layout: TankLayout) -> float:
    """Map a normalized vertical coordinate to a prompt weight.

    Linear from ``max_weight`` at the top edge down to zero at the
    active/storage boundary, and exactly zero everywhere below.  Inputs
    outside [0,1] are clamped rather than rejected.
    """
    y = min(max(y, 0.0), 1.0)
    if y >= layout.active_fraction:
        return 0.0
    # Ratio first: (af - 0)/af == 1.0 exactly, so the top edge yields
    # max_weight bit-for-bit and no position can exceed it.
    return layout.max_weight * ((layout.active_fraction - y) / layout.active_fraction)


def compose_prompt_set(
    nodes: Iterable[PromptNode],
    layout: TankLayout,
    automation_overrides: Mapping[str, float] | None = None,
) -> list[WeightedPrompt]:
    """Build the ordered weighted prompt set from the node population.

    Every text/automated node with a positive effective weight contributes
    one entry.  The effective weight is position-derived unless an
    automation override for the node id is present.  Entries are sorted by
    weight descending, ties broken by node id; weights are intentionally
    not normalized (imbalance between prompts is information, not noise).
    """
    overrides = automation_overrides or {}
    picked: list[tuple[float, str, str]] = []
    for node in nodes:
        if node.kind is NodeKind.ADJUSTMENT or not node.text:
            continue
        weight = overrides.get(node.id)
        if weight is None:
            weight = weight_for_position(node.y, layout)
        if weight > 0.0:
            picked.append((weight, node.id, node.text))
    picked.sort(key=lambda e: (-e[0], e[1]))
    return [WeightedPrompt(text=text, weight=weight) for weight, _, text in picked]


def join_nodes(a: PromptNode, b: PromptNode, new_id: str | None = None) -> PromptNode:
    """Merge two text-bearing nodes into one, concatenating their texts.

    The joined node takes ``a``'s position, records the constituent texts,
    and is an ordinary node afterwards (its weight comes from its position
    like any other).  Joining is a left fold: join(join(a,b),c) yields
    "a, b, c".  Adjustment nodes cannot be joined.
    """
    for node in (a, b):
        if node.kind is NodeKind.ADJUSTMENT:
            raise NodeError("kind_mismatch", f"cannot join adjustment node {node.id!r}")
        if not node.text:
            raise NodeError("empty_text", f"cannot join node {node.id!r} with empty text")
    kind = (
        NodeKind.AUTOMATED
        if NodeKind.AUTOMATED in (a.kind, b.kind)
        else NodeKind.TEXT
    )
    return PromptNode(
        id=new_id if new_id is not None else f"{a.id}+{b.id}",
        kind=kind,
        text=f"{a.text}, {b.text}",
        position=a.position,
        pluralise=a.pluralise or b.pluralise,
        joined_from=(a.joined_from or (a.text,)) + (b.joined_from or (b.text,)),
    )


def step_playlist(node: PromptNode) -> tuple[PromptNode, bool]:
    """Advance a node to its next playlist entry, wrapping at the end.

    Returns ``(node, stepped)``; an empty playlist is a signalled no-op,
    returning the node unchanged with ``stepped=False``.  Callers that want
    the switch to be gradual wrap the result in a crossfade (see the
    automation module) instead of committing the new text instantly.
    """
    if not node.playlist:
        return node, False
    index = (node.playlist_index + 1) % len(node.playlist)
    return replace(node, playlist_index=index, text=node.playlist[index]), True


def serialize_weighted_prompts(prompts: Iterable[WeightedPrompt]) -> str:
    """Render a prompt set as the canonical "(text:W)" wire string.

    Weights are fixed to two decimals; entries keep their order and are
    joined by ", ".  The empty set serializes to the empty string.
    """
    return ", ".join(f"({p.text}:{p.weight:.2f})" for p in prompts)
