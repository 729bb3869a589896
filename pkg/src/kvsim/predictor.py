"""Output-length prediction policies.

Predictions pick a length bucket and reserve the bucket's upper edge. The
stochastic mode stands in for a trained bucket classifier: it hits the true
bucket with a fixed probability and otherwise misses by a geometric distance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Request

# Alpaca-trained classifier figures.
DEFAULT_ACCURACY = 0.9861
DEFAULT_MEAN_DISTANCE = 1.03
DEFAULT_SHORT_FRACTION = 0.5
DEFAULT_NUM_BUCKETS = 10


class PredictorMode(str, enum.Enum):
    ORACLE = "oracle"
    MAX_LENGTH = "max_length"
    BUCKET_ORACLE = "bucket_oracle"
    STOCHASTIC = "stochastic"
    TRACE_PROVIDED = "trace_provided"


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class BucketScheme:
    max_seq_len: int
    num_buckets: int = DEFAULT_NUM_BUCKETS

    def __post_init__(self):
        if self.num_buckets < 1:
            raise ValueError("num_buckets must be >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")

    @property
    def bucket_width(self) -> int:
        return -(-self.max_seq_len // self.num_buckets)

    def upper_edge(self, index: int) -> int:
        return min((index + 1) * self.bucket_width, self.max_seq_len)


@dataclass(frozen=True)
class PredictorSpec:
    mode: PredictorMode = PredictorMode.STOCHASTIC
    bucket_accuracy: float = DEFAULT_ACCURACY
    mean_bucket_distance: float = DEFAULT_MEAN_DISTANCE
    short_fraction: float = DEFAULT_SHORT_FRACTION
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PredictorMode(self.mode))
        if not 0.0 <= self.bucket_accuracy <= 1.0:
            raise ValueError("bucket_accuracy must be in [0, 1]")
        if not 0.0 <= self.short_fraction <= 1.0:
            raise ValueError("short_fraction must be in [0, 1]")
        if self.mean_bucket_distance < 1.0:
            raise ValueError("mean_bucket_distance must be >= 1")

    @property
    def uses_predictor(self) -> bool:
        """max_length is the no-predictor baseline; every other mode runs one."""
        return self.mode is not PredictorMode.MAX_LENGTH


@dataclass(frozen=True)
class Prediction:
    request_id: int
    bucket_index: int
    allocated_tokens: int


def bucket_of(length: int, scheme: BucketScheme) -> int:
    if length < 0 or length > scheme.max_seq_len:
        raise PredictionError(f"length {length} outside [0, {scheme.max_seq_len}]")
    return min(length // scheme.bucket_width, scheme.num_buckets - 1)


class Predictor:
    """Stateful wrapper holding the rng stream for one engine.

    Results depend only on the seed and the order in which requests are fed.
    """

    def __init__(self, spec: PredictorSpec, scheme: BucketScheme):
        self.spec = spec
        self.scheme = scheme
        self.rng = np.random.default_rng(spec.rng_seed)

    def _miss_distance(self) -> int:
        mu = self.spec.mean_bucket_distance
        if mu == 1.0:
            return 1
        return int(self.rng.geometric(1.0 / mu))

    def _stochastic_bucket(self, true_bucket: int) -> int:
        if self.rng.random() < self.spec.bucket_accuracy:
            return true_bucket
        distance = self._miss_distance()
        if self.rng.random() < self.spec.short_fraction:
            distance = -distance
        return min(max(true_bucket + distance, 0), self.scheme.num_buckets - 1)

    def predict(self, request: Request, trace_bucket: Optional[int] = None) -> Prediction:
        mode = self.spec.mode
        scheme = self.scheme
        cap = scheme.max_seq_len - request.prompt_tokens
        true_bucket = bucket_of(request.output_tokens, scheme)

        if mode is PredictorMode.ORACLE:
            return Prediction(request.id, true_bucket, request.output_tokens)
        if mode is PredictorMode.MAX_LENGTH:
            return Prediction(request.id, scheme.num_buckets - 1, cap)

        if mode is PredictorMode.BUCKET_ORACLE:
            bucket = true_bucket
        elif mode is PredictorMode.STOCHASTIC:
            bucket = self._stochastic_bucket(true_bucket)
        else:
            if trace_bucket is None:
                raise PredictionError(
                    f"request {request.id}: trace_provided mode needs a predicted_bucket"
                )
            if not 0 <= trace_bucket < scheme.num_buckets:
                raise PredictionError(
                    f"request {request.id}: predicted_bucket {trace_bucket} out of range"
                )
            bucket = trace_bucket
        allocated = max(1, min(scheme.upper_edge(bucket), cap))
        return Prediction(request.id, bucket, allocated)


def predict(request: Request, spec: PredictorSpec, scheme: BucketScheme,
            trace_bucket: Optional[int] = None, predictor: Optional[Predictor] = None) -> Prediction:
    """One-shot prediction. Pass ``predictor`` to continue an existing rng stream."""
    if predictor is None:
        predictor = Predictor(spec, scheme)
    return predictor.predict(request, trace_bucket)


def empirical_short_probability(allocations: Sequence[int], actuals: Sequence[int]) -> float:
    """Fraction of requests whose allocation is shorter than the true output."""
    if len(allocations) != len(actuals):
        raise ValueError("allocations and actuals differ in length")
    if not allocations:
        raise ValueError("short probability undefined for an empty pool")
    short = sum(1 for a, n in zip(allocations, actuals) if a < n)
    return short / len(allocations)


def max_evictions(max_seq_len: int) -> int:
    """Upper bound on evictions per sequence under allocation doubling."""
    return math.ceil(math.log2(max_seq_len)) if max_seq_len > 1 else 0
