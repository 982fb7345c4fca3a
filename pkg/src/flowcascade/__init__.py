"""flowcascade: fast-slow cascaded model serving for per-flow traffic classification."""

from . import assignment, config, crafting, dataset, flow_state, harness, metrics, models, packet_codec, pipeline, synth

__all__ = [
    "assignment",
    "config",
    "crafting",
    "dataset",
    "flow_state",
    "harness",
    "metrics",
    "models",
    "packet_codec",
    "pipeline",
    "synth",
]

__version__ = "0.1.0"
