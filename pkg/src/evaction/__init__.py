"""Online action recognition from event-camera streams.

Pipeline: events -> isolated-event filter -> exponential-decay time surfaces
-> per-surface convolutional embedding -> causal transformer over a sliding
queue of embeddings -> per-step class confidences.
"""

from .events import EventStream, MotionScript, decode_stream, encode_stream, generate_synthetic, validate_stream
from .model import ModelConfig, ModelParams, PredictionTrace, predict_offline, push_and_predict, run_stream
from .preprocess import DecayConfig, FilterConfig, TimeSurface, build_time_surface, filter_isolated, surface_sequence

__version__ = "0.1.0"

__all__ = [
    "EventStream", "MotionScript", "decode_stream", "encode_stream", "generate_synthetic", "validate_stream",
    "ModelConfig", "ModelParams", "PredictionTrace", "predict_offline", "push_and_predict", "run_stream",
    "DecayConfig", "FilterConfig", "TimeSurface", "build_time_surface", "filter_isolated", "surface_sequence",
]
