"""Closed-form misprediction penalties and cross-checks against simulated runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

from .core import GpuConfig, ModelConfig, Request, kv_bytes_per_token
from .engine import trace_fingerprint
from .predictor import Prediction, empirical_short_probability
from .report import RunReport
from .supervisor import expected_pool_penalty

PENALTY_TOLERANCE = 0.05
BATCH_RATIO_TOLERANCE = 0.10


@dataclass(frozen=True)
class PoolSummary:
    """Aggregate reservation vs. actual KV bytes over a request pool."""

    n: int
    sum_sp_bytes: int
    sum_sa_bytes: int
    p_short: float
    mean_resident_bytes: float
    # mean S_P over the short-predicted (evicted) sequences; falls back to the pool mean
    mean_sp_short_bytes: Optional[float] = None
    trace_id: Optional[str] = None

    def __post_init__(self):
        if self.sum_sp_bytes < 0 or self.sum_sa_bytes < 0:
            raise ValueError("byte sums must be >= 0")
        if not 0.0 <= self.p_short <= 1.0:
            raise ValueError("p_short must be in [0, 1]")

    @property
    def mean_sp_bytes(self) -> float:
        if self.mean_sp_short_bytes is not None:
            return self.mean_sp_short_bytes
        return self.sum_sp_bytes / self.n if self.n else 0.0


def summarize_pool(requests: Sequence[Request], allocations: Sequence[int], model: ModelConfig,
                   mean_resident_bytes: float = 0.0) -> PoolSummary:
    """Summary of a pool given each request's initial allocation (in output tokens)."""
    if len(requests) != len(allocations):
        raise ValueError("requests and allocations differ in length")
    kvpt = kv_bytes_per_token(model)
    sp = [(r.prompt_tokens + a) * kvpt for r, a in zip(requests, allocations)]
    sa = [(r.prompt_tokens + r.output_tokens) * kvpt for r in requests]
    short = [s for s, r, a in zip(sp, requests, allocations) if a < r.output_tokens]
    return PoolSummary(
        n=len(requests),
        sum_sp_bytes=sum(sp),
        sum_sa_bytes=sum(sa),
        p_short=empirical_short_probability(list(allocations), [r.output_tokens for r in requests])
        if requests else 0.0,
        mean_resident_bytes=mean_resident_bytes,
        mean_sp_short_bytes=sum(short) / len(short) if short else None,
        trace_id=trace_fingerprint(requests),
    )


def summarize_run(report: RunReport) -> PoolSummary:
    """Pool summary rebuilt from a run's per-sequence records and eviction log.

    S_P uses each sequence's first allocation. The resident-bytes term is the
    mean over evictions of the bytes held by the *other* rows of the batch, and
    the short-sequence S_P is the mean transferred size, which equals the
    reservation for an overrun.
    """
    kvpt = report.kv_bytes_per_token
    seqs = report.sequences
    sp = [(s.prompt_tokens + s.initial_allocated_tokens) * kvpt for s in seqs]
    sa = [(s.prompt_tokens + s.output_tokens) * kvpt for s in seqs]
    n_short = sum(1 for s in seqs if s.initial_allocated_tokens < s.output_tokens)
    ev = report.events
    mean_other = sum(e.other_rows_bytes for e in ev) / len(ev) if ev else 0.0
    mean_sp_short = sum(e.transferred_bytes for e in ev) / len(ev) if ev else None
    return PoolSummary(
        n=len(seqs),
        sum_sp_bytes=sum(sp),
        sum_sa_bytes=sum(sa),
        p_short=n_short / len(seqs) if seqs else 0.0,
        mean_resident_bytes=mean_other,
        mean_sp_short_bytes=mean_sp_short,
        trace_id=report.trace_id,
    )


def underutilization_ratio(summary: PoolSummary) -> float:
    """sum S_A / sum S_P: realized batch relative to the perfect-predictor batch."""
    if summary.sum_sp_bytes <= 0:
        raise ValueError("underutilization ratio undefined for zero reserved bytes")
    return summary.sum_sa_bytes / summary.sum_sp_bytes


def expected_batch_size(hbm_free_bytes: float, mean_kv_bytes: float) -> float:
    if mean_kv_bytes <= 0:
        raise ValueError("mean_kv_bytes must be > 0")
    return hbm_free_bytes / mean_kv_bytes


def pool_penalty(summary: PoolSummary, gpu: GpuConfig) -> float:
    return expected_pool_penalty(summary.p_short, summary.n, summary.mean_sp_bytes,
                                 summary.mean_resident_bytes, gpu)


def relative_error(value: float, reference: float) -> float:
    if reference == 0:
        return 0.0 if value == 0 else float("inf")
    return abs(value - reference) / abs(reference)


@dataclass
class Check:
    name: str
    simulated: float
    closed_form: float
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


@dataclass
class ValidationReport:
    trace_id: str
    policy: str
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [f"trace_id: {self.trace_id}", f"policy: {self.policy}"]
        for c in self.checks:
            lines.append(
                f"{c.name}: simulated={c.simulated:.6g} closed_form={c.closed_form:.6g} "
                f"rel_error={c.rel_error:.4f} tolerance={c.tolerance:g} "
                f"{'PASS' if c.passed else 'FAIL'}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {"trace_id": self.trace_id, "policy": self.policy, "passed": self.passed,
               "checks": [dict(asdict(c), passed=c.passed) for c in self.checks]}
        return json.dumps(doc, indent=2, sort_keys=True)


def validate_against_run(report: RunReport, summary: PoolSummary, gpu: GpuConfig,
                         reference: Optional[RunReport] = None,
                         reference_summary: Optional[PoolSummary] = None,
                         penalty_tolerance: float = PENALTY_TOLERANCE,
                         batch_tolerance: float = BATCH_RATIO_TOLERANCE) -> ValidationReport:
    """Compare closed-form predictions with a simulated run.

    Always checks total penalty seconds. With a ``reference`` run (normally the
    oracle policy on the same trace) it also checks that
    ``report.avg_batch / reference.avg_batch`` matches
    ``underutilization_ratio(summary) / underutilization_ratio(reference_summary)``;
    when ``reference_summary`` is omitted the reference is taken as exact
    (ratio 1), which is what an oracle run gives.
    """
    if summary.trace_id is not None and summary.trace_id != report.trace_id:
        raise ValueError(f"summary trace {summary.trace_id} does not match run trace {report.trace_id}")
    out = ValidationReport(report.trace_id, report.policy)
    expected = pool_penalty(summary, gpu)
    out.checks.append(Check("pool_penalty_s", report.penalty_s, expected,
                            relative_error(report.penalty_s, expected), penalty_tolerance))
    if reference is not None:
        if reference.trace_id != report.trace_id:
            raise ValueError("reference run is on a different trace")
        ratio_ref = underutilization_ratio(reference_summary) if reference_summary else 1.0
        closed = underutilization_ratio(summary) / ratio_ref
        simulated = (report.average_batch_size / reference.average_batch_size
                     if reference.average_batch_size else 0.0)
        out.checks.append(Check("batch_size_ratio", simulated, closed,
                                relative_error(simulated, closed), batch_tolerance))
    return out
