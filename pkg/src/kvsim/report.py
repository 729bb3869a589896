"""Run results and their on-disk form."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .supervisor import EvictionEvent


@dataclass(frozen=True)
class IterationRecord:
    iteration_index: int
    wall_clock: float
    batch_size: int
    tokens_resident: int
    admitted: int
    completed: int
    evicted: int
    iteration_latency: float
    prefill_latency: float
    penalty_latency: float
    overhead_latency: float


@dataclass(frozen=True)
class SequenceRecord:
    id: int
    arrival: float
    prompt_tokens: int
    output_tokens: int
    predicted_bucket: int
    initial_allocated_tokens: int
    final_allocated_tokens: int
    first_admit: float
    completion: float
    latency: float
    evictions: int
    penalty_s: float
    slo_met: bool


ITERATION_COLUMNS = [f.name for f in fields(IterationRecord)]
SEQUENCE_COLUMNS = [f.name for f in fields(SequenceRecord)]
EVENT_COLUMNS = list(EvictionEvent.FIELDS)

SUMMARY_KEYS = (
    "policy", "trace_id", "num_requests", "total_time_s", "makespan_s",
    "throughput_seqs_per_s", "sequences_completed", "sequences_within_slo",
    "average_batch_size", "num_iterations", "eviction_count",
    "generation_s", "penalty_s", "overhead_s", "idle_s", "pipeline_factor",
    "slo_per_token", "kv_capacity_bytes", "kv_bytes_per_token",
)


@dataclass
class RunReport:
    policy: str
    trace_id: str
    num_requests: int
    generation_s: float
    penalty_s: float
    overhead_s: float
    idle_s: float
    makespan_s: float
    sequences_completed: int
    sequences_within_slo: int
    average_batch_size: float
    num_iterations: int
    eviction_count: int
    pipeline_factor: float
    slo_per_token: float
    kv_capacity_bytes: int
    kv_bytes_per_token: int
    sequences: List[SequenceRecord] = field(default_factory=list)
    iterations: List[IterationRecord] = field(default_factory=list)
    events: List[EvictionEvent] = field(default_factory=list)

    @property
    def total_time_s(self) -> float:
        # busy time; idle gaps between online arrivals are reported separately
        return self.generation_s + self.penalty_s + self.overhead_s

    @property
    def throughput_seqs_per_s(self) -> float:
        if self.makespan_s <= 0:
            return 0.0
        return self.sequences_completed / self.makespan_s

    def summary(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in SUMMARY_KEYS}

    def to_json(self) -> str:
        doc = self.summary()
        doc["sequences"] = [asdict(s) for s in self.sequences]
        doc["iterations"] = [asdict(r) for r in self.iterations]
        doc["events"] = [e.as_row() for e in self.events]
        return json.dumps(doc, sort_keys=True)


def _write_csv(path: str, columns: List[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_run(report: RunReport, out_dir: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """Write run_summary.json plus sequences/iterations/events CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    summary = report.summary()
    if extra:
        summary.update(extra)
    with open(os.path.join(out_dir, "run_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(os.path.join(out_dir, "sequences.csv"), SEQUENCE_COLUMNS,
               (asdict(s) for s in report.sequences))
    _write_csv(os.path.join(out_dir, "iterations.csv"), ITERATION_COLUMNS,
               (asdict(r) for r in report.iterations))
    _write_csv(os.path.join(out_dir, "events.csv"), EVENT_COLUMNS,
               (e.as_row() for e in report.events))


def read_summary(run_dir: str) -> Dict[str, Any]:
    with open(os.path.join(run_dir, "run_summary.json"), encoding="utf-8") as fh:
        return json.load(fh)


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _convert(cls, row: Dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        raw = row[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = raw == "True"
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def load_run(run_dir: str) -> RunReport:
    """Rebuild a :class:`RunReport` from the files written by :func:`write_run`."""
    summary = read_summary(run_dir)
    init_keys = {f.name for f in fields(RunReport)} - {"sequences", "iterations", "events"}
    report = RunReport(**{k: summary[k] for k in init_keys})
    report.sequences = [_convert(SequenceRecord, r)
                        for r in read_csv(os.path.join(run_dir, "sequences.csv"))]
    report.iterations = [_convert(IterationRecord, r)
                         for r in read_csv(os.path.join(run_dir, "iterations.csv"))]
    events = []
    for r in read_csv(os.path.join(run_dir, "events.csv")):
        r = dict(r)
        r.pop("penalty_seconds")
        events.append(_convert(EvictionEvent, r))
    report.events = events
    return report
