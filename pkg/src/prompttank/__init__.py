"""prompttank: weighted prompt mixing and automation for live image-to-image loops."""

from .automation import (
    AutopilotConfig,
    Crossfade,
    EffectiveParams,
    ExternalSignalMap,
    Lfo,
    PluraliserConfig,
    UnknownParameterError,
    autopilot_tick,
    count_figures,
    crossfade_weights,
    external_value,
    lfo_value,
    pluralise_text,
    resolve_parameters,
    resolve_target,
)
from .backends import (
    BackendCapabilities,
    BackendError,
    DirectorySource,
    MockBackend,
    RemoteBackend,
    StillImageSource,
    SyntheticSource,
    mock_generate,
)
from .engine import (
    CommandResult,
    Engine,
    EngineEvent,
    Frame,
    GenerationRequest,
    Subscription,
    request_digest,
)
from .pixels import (
    PixelChainParams,
    apply_brightness,
    apply_chain,
    apply_colourise,
    apply_contrast,
    apply_gamma,
    apply_noise,
    apply_salford,
    load_png,
    luma,
    noise_field,
    save_png,
)
from .presets import PresetError, TankPreset, load_preset, save_preset
from .prompts import (
    ModelParams,
    NodeError,
    NodeKind,
    PromptNode,
    TankLayout,
    WeightedPrompt,
    compose_prompt_set,
    join_nodes,
    serialize_weighted_prompts,
    step_playlist,
    weight_for_position,
)
from .state import TankState

__version__ = "0.1.0"
