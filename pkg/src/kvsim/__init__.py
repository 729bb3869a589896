"""Desk-scale simulator for serving LLMs with predicted output lengths."""

from .core import (
    GpuConfig,
    ModelConfig,
    PRESET_MODELS,
    Request,
    SequenceState,
    Status,
    kv_bytes_per_token,
    kv_cache_bytes,
)
from .engine import CostModel, Engine, EngineConfig, pipeline_factor, run
from .predictor import BucketScheme, Prediction, PredictorMode, PredictorSpec, bucket_of, predict
from .report import RunReport

__version__ = "0.1.0"
