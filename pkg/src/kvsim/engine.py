"""Iteration-level discrete-event serving loop."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import (
    A100_80GB,
    PRESET_MODELS,
    GpuConfig,
    ModelConfig,
    Request,
    SequenceState,
    Status,
    check_sequence,
    kv_bytes_per_token,
)
from .predictor import BucketScheme, Predictor, PredictorSpec
from .report import IterationRecord, RunReport, SequenceRecord
from .scheduler import MemoryLedger, PoolView, admit_ffd
from .supervisor import EvictionEvent, EvictionOverlap, LayoutModel, evict

log = logging.getLogger(__name__)

DEFAULT_SLO_PER_TOKEN = 0.1875


@dataclass(frozen=True)
class CostModel:
    """Linear per-iteration time model.

    An iteration costs ``t_fixed + t_ff_per_seq * batch + t_attn_per_token *
    resident_tokens``: the feed-forward share is batched per sequence while
    attention is serialized over every cached token. Defaults put a
    GPT-J-class batch of a few hundred short sequences near 0.19 s/iteration.
    """

    t_fixed: float = 0.03
    t_ff_per_seq: float = 1.5e-4
    t_attn_per_token: float = 1.5e-6
    t_prefill_per_token: float = 5.0e-5
    predictor_latency: float = 0.0037
    retrain_latency: float = 0.011

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"CostModel.{name} must be >= 0")

    def iteration_latency(self, batch_size: int, resident_tokens: int) -> float:
        return self.t_fixed + self.t_ff_per_seq * batch_size + self.t_attn_per_token * resident_tokens


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = PRESET_MODELS["gpt-neox"]
    gpu: GpuConfig = A100_80GB
    cost: CostModel = field(default_factory=CostModel)
    policy: PredictorSpec = field(default_factory=PredictorSpec)
    num_buckets: int = 10
    eviction_overlap: EvictionOverlap = EvictionOverlap.NONE
    rng_seed: int = 0
    batch_size_cap: Optional[int] = None
    max_skip_iterations: Optional[int] = None
    # "append" keeps admission order; "random" inserts rows at uniform positions
    row_placement: str = "append"
    slo_per_token: float = DEFAULT_SLO_PER_TOKEN
    check_invariants: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eviction_overlap", EvictionOverlap(self.eviction_overlap))
        if self.batch_size_cap is not None and self.batch_size_cap < 1:
            raise ValueError("batch_size_cap must be >= 1")
        if self.row_placement not in ("append", "random"):
            raise ValueError(f"unknown row_placement {self.row_placement!r}")
        self.gpu.kv_capacity(self.model)

    @property
    def scheme(self) -> BucketScheme:
        return BucketScheme(self.model.max_seq_len, self.num_buckets)


def pipeline_factor(model: ModelConfig, gpu: GpuConfig) -> float:
    """Iteration-time scaling when ``num_layers`` are sharded over a saturated pipeline."""
    l = model.num_layers
    return math.ceil(l / gpu.num_gpus) / l


def trace_fingerprint(trace: Sequence[Request]) -> str:
    h = hashlib.sha256()
    for r in trace:
        h.update(f"{r.id},{r.arrival_time!r},{r.prompt_tokens},{r.output_tokens};".encode())
    return h.hexdigest()[:16]


class SimulationAbort(RuntimeError):
    pass


class Engine:
    """One single-threaded simulation. Use :func:`run` unless stepping by hand."""

    def __init__(self, config: EngineConfig, trace: Sequence[Request],
                 predicted_buckets: Optional[Dict[int, int]] = None, policy_name: Optional[str] = None):
        self.config = config
        self.model = config.model
        self.trace = list(trace)
        for r in self.trace:
            r.validate(self.model)
        if any(a.arrival_time > b.arrival_time for a, b in zip(self.trace, self.trace[1:])):
            raise ValueError("trace must be sorted by arrival_time")
        if len({r.id for r in self.trace}) != len(self.trace):
            raise ValueError("request ids must be unique")
        self.predicted_buckets = predicted_buckets or {}
        self.policy_name = policy_name or config.policy.mode.value

        self.kvpt = kv_bytes_per_token(self.model)
        self.pf = pipeline_factor(self.model, config.gpu) if config.gpu.num_gpus > 1 else 1.0
        self.predictor = Predictor(config.policy, config.scheme)
        self.placement_rng = np.random.default_rng([config.rng_seed, 1])
        self.ledger = MemoryLedger(config.gpu.total_hbm, self.model.weight_bytes, self.kvpt)
        self.pool = PoolView()
        self.layout = LayoutModel(self.kvpt)
        self.pending = deque(self.trace)
        self.sequences: List[SequenceState] = []
        self.events: List[EvictionEvent] = []
        self.iterations: List[IterationRecord] = []

        self.clock = 0.0
        self.generation_s = 0.0
        self.penalty_s = 0.0
        self.overhead_s = 0.0
        self.idle_s = 0.0
        self.resident_tokens = 0
        self._reset_iteration_counters()

    def _reset_iteration_counters(self):
        self._it_prefill = 0.0
        self._it_penalty = 0.0
        self._it_overhead = 0.0
        self._it_admitted = 0

    # clock charges; the three category sums are the only busy-time sources
    def _charge_generation(self, seconds: float) -> None:
        self.clock += seconds
        self.generation_s += seconds

    def _charge_penalty(self, seconds: float, seq: SequenceState) -> None:
        self.clock += seconds
        self.penalty_s += seconds
        self._it_penalty += seconds
        seq.penalty_seconds_accrued += seconds

    def _charge_overhead(self, seconds: float) -> None:
        self.clock += seconds
        self.overhead_s += seconds
        self._it_overhead += seconds

    @property
    def running(self) -> List[SequenceState]:
        return self.layout.rows

    def done(self) -> bool:
        return not (self.pending or self.pool or self.layout.rows)

    def _arrivals(self) -> None:
        if not self.layout.rows and not self.pool and self.pending:
            nxt = self.pending[0].arrival_time
            if nxt > self.clock:
                self.idle_s += nxt - self.clock
                self.clock = nxt
        cost = self.config.cost
        charge_predictor = self.config.policy.uses_predictor and cost.predictor_latency > 0
        while self.pending and self.pending[0].arrival_time <= self.clock:
            req = self.pending.popleft()
            pred = self.predictor.predict(req, self.predicted_buckets.get(req.id))
            seq = SequenceState(req, pred.allocated_tokens, bucket_index=pred.bucket_index)
            self.sequences.append(seq)
            if charge_predictor:
                self._charge_overhead(cost.predictor_latency)
            self.pool.add(seq)

    def _admit(self) -> None:
        cap = self.config.batch_size_cap
        slots = None if cap is None else cap - len(self.layout.rows)
        admitted = admit_ffd(self.pool, self.ledger, self.clock, slots=slots,
                             max_skip_iterations=self.config.max_skip_iterations)
        cost = self.config.cost
        for seq in admitted:
            position = None
            if self.config.row_placement == "random":
                position = int(self.placement_rng.integers(0, len(self.layout.rows) + 1))
            self.layout.append(seq, position)
            self.resident_tokens += seq.resident_tokens
            if seq.pending_reload_bytes:
                if self.config.eviction_overlap is EvictionOverlap.NONE:
                    self._charge_penalty(seq.pending_reload_bytes / self.config.gpu.bw_h2d, seq)
                seq.pending_reload_bytes = 0
            elif seq.request.prompt_tokens and cost.t_prefill_per_token:
                prefill = cost.t_prefill_per_token * seq.request.prompt_tokens
                self._charge_generation(prefill)
                self._it_prefill += prefill
        self._it_admitted += len(admitted)

    def step(self) -> Optional[IterationRecord]:
        """Advance one generation iteration; returns None when nothing could run."""
        self._arrivals()
        self._admit()
        rows = self.layout.rows
        if not rows:
            if self.pool:
                raise SimulationAbort("pool is non-empty but nothing could be admitted onto an idle GPU")
            return None

        cost = self.config.cost
        batch = len(rows)
        for seq in rows:
            seq.generated_tokens += 1
        self.resident_tokens += batch
        tick = cost.iteration_latency(batch, self.resident_tokens) * self.pf
        self._charge_generation(tick)

        finished = []
        overrun = []
        for seq in rows:
            if seq.generated_tokens == seq.request.output_tokens:
                finished.append(seq)
            elif seq.generated_tokens == seq.allocated_tokens:
                overrun.append(seq)
        it_index = len(self.iterations)
        for seq in finished:
            self.layout.remove(seq)
            self.ledger.release(seq)
            self.resident_tokens -= seq.resident_tokens
            seq.status = Status.FINISHED
            seq.completion_time = self.clock

        # id order keeps eviction order independent of row position
        overrun.sort(key=lambda s: s.id)
        for seq in overrun:
            self.ledger.release(seq)
            self.resident_tokens -= seq.resident_tokens
            event = evict(seq, self.layout, self.config.gpu, self.model.max_seq_len,
                          now=self.clock, iteration=it_index)
            self.events.append(event)
            if self.config.eviction_overlap is EvictionOverlap.NONE:
                self._charge_penalty(event.transfer_out_seconds + event.rearrange_seconds, seq)
            else:
                self._charge_penalty(event.rearrange_seconds, seq)
            if cost.retrain_latency:
                self._charge_overhead(cost.retrain_latency)
            self.pool.add(seq)

        if self.config.check_invariants:
            self._check()

        rec = IterationRecord(
            iteration_index=it_index,
            wall_clock=self.clock,
            batch_size=batch,
            tokens_resident=self.resident_tokens + sum(s.resident_tokens for s in finished),
            admitted=self._it_admitted,
            completed=len(finished),
            evicted=len(overrun),
            iteration_latency=tick,
            prefill_latency=self._it_prefill,
            penalty_latency=self._it_penalty,
            overhead_latency=self._it_overhead,
        )
        self.iterations.append(rec)
        self._reset_iteration_counters()
        return rec

    def _check(self) -> None:
        self.ledger.check()
        rows = self.layout.rows
        reserved = sum(s.reserved_tokens for s in rows) * self.kvpt
        assert reserved == self.ledger.reserved_bytes, "ledger out of sync with running rows"
        assert sum(s.resident_tokens for s in rows) == self.resident_tokens
        assert self.ledger.reserved_bytes + self.model.weight_bytes <= self.ledger.hbm_capacity
        for s in rows:
            check_sequence(s, self.model)

    def run(self) -> RunReport:
        while not self.done():
            self.step()
        return self.report()

    def report(self) -> RunReport:
        slo = self.config.slo_per_token
        records = []
        within = 0
        for s in sorted(self.sequences, key=lambda s: s.id):
            if s.status is not Status.FINISHED:
                continue
            latency = s.completion_time - s.request.arrival_time
            ok = latency <= slo * s.request.output_tokens
            within += ok
            records.append(SequenceRecord(
                id=s.id,
                arrival=s.request.arrival_time,
                prompt_tokens=s.request.prompt_tokens,
                output_tokens=s.request.output_tokens,
                predicted_bucket=s.bucket_index,
                initial_allocated_tokens=s.initial_allocated_tokens,
                final_allocated_tokens=s.allocated_tokens,
                first_admit=s.first_admit_time,
                completion=s.completion_time,
                latency=latency,
                evictions=s.eviction_count,
                penalty_s=s.penalty_seconds_accrued,
                slo_met=ok,
            ))
        n_it = len(self.iterations)
        avg_batch = sum(r.batch_size for r in self.iterations) / n_it if n_it else 0.0
        return RunReport(
            policy=self.policy_name,
            trace_id=trace_fingerprint(self.trace),
            num_requests=len(self.trace),
            generation_s=self.generation_s,
            penalty_s=self.penalty_s,
            overhead_s=self.overhead_s,
            idle_s=self.idle_s,
            makespan_s=self.clock,
            sequences_completed=len(records),
            sequences_within_slo=within,
            average_batch_size=avg_batch,
            num_iterations=n_it,
            eviction_count=len(self.events),
            pipeline_factor=self.pf,
            slo_per_token=slo,
            kv_capacity_bytes=self.ledger.kv_capacity,
            kv_bytes_per_token=self.kvpt,
            sequences=records,
            iterations=list(self.iterations),
            events=list(self.events),
        )


def run(config: EngineConfig, trace: Sequence[Request],
        predicted_buckets: Optional[Dict[int, int]] = None,
        policy_name: Optional[str] = None) -> RunReport:
    """Simulate ``trace`` to completion under ``config``."""
    return Engine(config, trace, predicted_buckets, policy_name).run()
