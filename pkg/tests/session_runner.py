"""Scripted 100-frame session for cross-process determinism checks.

Builds a fixed tank (nodes, pixel chain with noise, one LFO, fixed seeds),
ticks the engine 100 times with scripted timestamps, and prints one request
digest per line.  Two runs of this script must produce byte-identical
output: the loop keeps no hidden state between frames.
"""

import sys

from prompttank.automation import Lfo
from prompttank.backends import MockBackend, SyntheticSource
from prompttank.engine import Engine
from prompttank.pixels import PixelChainParams
from prompttank.prompts import ModelParams, PromptNode
from prompttank.state import TankState


def build_state() -> TankState:
    state = TankState(name="determinism-session")
    state.add_node(PromptNode(id="a", text="frog", position=(0.4, 0.05)))
    state.add_node(PromptNode(id="b", text="sculpture", position=(0.6, 0.15)))
    state.add_node(PromptNode(id="c", text="papercraft", position=(0.5, 0.75)))
    state.pixel_params = PixelChainParams(
        brightness=0.05, contrast=1.2, noise_gain=0.2, noise_scale=2, noise_seed=7,
        salford_mix=0.25,
    )
    state.model_params = ModelParams(strength=0.6, seed=21)
    state.lfos = [Lfo(target="pixel.noise_gain", frequency=0.7, depth=0.1, base=0.2)]
    return state


def main() -> int:
    engine = Engine(
        MockBackend(),
        SyntheticSource(width=128, height=128, blob_count=2, seed=9),
        state=build_state(),
    )
    for k in range(100):
        frame = engine.tick(k / 12.0)
        if frame is None:
            print("SKIPPED", k)
            return 1
        print(frame.request_digest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
