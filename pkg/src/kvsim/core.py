"""Domain types and the KV-cache memory model.

Byte quantities are exact Python ints; simulated time is float seconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

DEFAULT_MAX_SEQ_LEN = 2048
GB = 10**9


class ConfigError(ValueError):
    """A configuration or record violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    hidden_dim: int
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    bytes_per_number: int = 2
    weight_bytes: int = 0

    def __post_init__(self):
        for attr in ("num_layers", "hidden_dim", "max_seq_len", "bytes_per_number"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"ModelConfig.{attr} must be >= 1, got {getattr(self, attr)}")
        if self.weight_bytes < 0:
            raise ConfigError("ModelConfig.weight_bytes must be >= 0")

    @property
    def kv_bytes_per_token(self) -> int:
        return kv_bytes_per_token(self)


@dataclass(frozen=True)
class GpuConfig:
    hbm_capacity: int
    bw_hbm: float
    bw_h2d: float
    num_gpus: int = 1

    def __post_init__(self):
        if self.hbm_capacity <= 0:
            raise ConfigError("GpuConfig.hbm_capacity must be > 0")
        if self.bw_hbm <= 0 or self.bw_h2d <= 0:
            raise ConfigError("GpuConfig bandwidths must be > 0")
        if self.num_gpus < 1:
            raise ConfigError("GpuConfig.num_gpus must be >= 1")

    @property
    def total_hbm(self) -> int:
        return self.hbm_capacity * self.num_gpus

    def kv_capacity(self, model: ModelConfig) -> int:
        """Bytes left for KV caches once the weights are resident.

        Pipeline stages split the weights and pool what remains into one ledger.
        """
        free = self.total_hbm - model.weight_bytes
        if free <= 0:
            raise ConfigError(
                f"model {model.name!r} ({model.weight_bytes} B) does not fit in "
                f"{self.num_gpus} x {self.hbm_capacity} B of HBM"
            )
        return free


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    prompt_tokens: int
    output_tokens: int

    def validate(self, model: ModelConfig) -> None:
        if self.output_tokens < 1:
            raise ConfigError(f"request {self.id}: output_tokens must be >= 1")
        if self.prompt_tokens < 0:
            raise ConfigError(f"request {self.id}: prompt_tokens must be >= 0")
        if self.prompt_tokens + self.output_tokens > model.max_seq_len:
            raise ConfigError(
                f"request {self.id}: prompt+output = {self.prompt_tokens + self.output_tokens} "
                f"exceeds max_seq_len {model.max_seq_len}"
            )
        if self.arrival_time < 0:
            raise ConfigError(f"request {self.id}: negative arrival_time")


class Status(str, enum.Enum):
    POOLED = "pooled"
    RUNNING = "running"
    EVICTED = "evicted"
    FINISHED = "finished"


@dataclass(eq=False)
class SequenceState:
    """Mutable per-request progress, owned by a single engine."""

    request: Request
    allocated_tokens: int
    bucket_index: int = 0
    generated_tokens: int = 0
    status: Status = Status.POOLED
    eviction_count: int = 0
    penalty_seconds_accrued: float = 0.0
    completion_time: Optional[float] = None
    initial_allocated_tokens: int = field(default=0)
    # reload transfer still owed when the sequence re-enters the GPU
    pending_reload_bytes: int = 0
    first_admit_time: Optional[float] = None

    def __post_init__(self):
        if not self.initial_allocated_tokens:
            self.initial_allocated_tokens = self.allocated_tokens

    @property
    def id(self) -> int:
        return self.request.id

    @property
    def reserved_tokens(self) -> int:
        return self.request.prompt_tokens + self.allocated_tokens

    @property
    def resident_tokens(self) -> int:
        return self.request.prompt_tokens + self.generated_tokens

    @property
    def remaining_tokens(self) -> int:
        return self.request.output_tokens - self.generated_tokens


def kv_bytes_per_token(model: ModelConfig) -> int:
    """K and V, one vector of ``hidden_dim`` numbers per layer each."""
    return 2 * model.bytes_per_number * model.num_layers * model.hidden_dim


def kv_cache_bytes(model: ModelConfig, tokens: int) -> int:
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    return tokens * kv_bytes_per_token(model)


def check_sequence(seq: SequenceState, model: ModelConfig) -> None:
    """Raise AssertionError if ``seq`` breaks a state invariant."""
    req = seq.request
    if seq.status is Status.RUNNING:
        assert seq.generated_tokens <= seq.allocated_tokens, f"seq {req.id} overran its reservation"
    if seq.status is Status.FINISHED:
        assert seq.generated_tokens == req.output_tokens, f"seq {req.id} finished early/late"
    assert seq.eviction_count >= 0
    assert seq.allocated_tokens <= model.max_seq_len - req.prompt_tokens, (
        f"seq {req.id} allocation {seq.allocated_tokens} above cap"
    )
    assert seq.generated_tokens <= req.output_tokens


# Table 1 architectures; weight bytes are fp16 parameter counts.
PRESET_MODELS = {
    "gpt-j": ModelConfig("gpt-j", 28, 5120, weight_bytes=12 * GB),
    "llama-13b": ModelConfig("llama-13b", 40, 4096, weight_bytes=26 * GB),
    "gpt-neox": ModelConfig("gpt-neox", 44, 6144, weight_bytes=40 * GB),
    "llama-33b": ModelConfig("llama-33b", 60, 6656, weight_bytes=60 * GB),
    "gpt3-175b": ModelConfig("gpt3-175b", 96, 12288, weight_bytes=350 * GB),
}

# 80 GB A100 behind PCIe 4.0 x8.
A100_80GB = GpuConfig(hbm_capacity=80 * GB, bw_hbm=2.0e12, bw_h2d=16.0e9, num_gpus=1)
