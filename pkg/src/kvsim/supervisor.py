"""Overrun detection, eviction with transfer + compaction cost, and the
closed-form pool penalty."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

from .core import GpuConfig, SequenceState, Status


class EvictionOverlap(str, enum.Enum):
    NONE = "none"
    FULL = "full"


@dataclass(frozen=True)
class EvictionEvent:
    sequence_id: int
    row_index: int
    transferred_bytes: int
    rearranged_bytes: int
    batch_bytes: int
    transfer_out_seconds: float
    reload_seconds: float
    rearrange_seconds: float
    new_allocated_tokens: int
    time: float = 0.0
    iteration: int = 0

    @property
    def penalty_seconds(self) -> float:
        return self.transfer_out_seconds + self.reload_seconds + self.rearrange_seconds

    @property
    def other_rows_bytes(self) -> int:
        return self.batch_bytes - self.transferred_bytes

    FIELDS = ("sequence_id", "iteration", "time", "row_index", "transferred_bytes",
              "rearranged_bytes", "batch_bytes", "transfer_out_seconds", "reload_seconds",
              "rearrange_seconds", "penalty_seconds", "new_allocated_tokens")

    def as_row(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


class LayoutModel:
    """Row order of the batch's contiguous KV matrix.

    Rows hold live ``SequenceState`` objects so a row's resident bytes track
    generation without separate bookkeeping.
    """

    def __init__(self, kv_bytes_per_token: int):
        self.kvpt = kv_bytes_per_token
        self.rows: List[SequenceState] = []

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def append(self, seq: SequenceState, position: Optional[int] = None) -> None:
        if position is None:
            self.rows.append(seq)
        else:
            self.rows.insert(position, seq)

    def row_bytes(self, seq: SequenceState) -> int:
        return seq.resident_tokens * self.kvpt

    def total_bytes(self) -> int:
        return sum(s.resident_tokens for s in self.rows) * self.kvpt

    def index(self, seq: SequenceState) -> int:
        for i, s in enumerate(self.rows):
            if s is seq:
                return i
        raise KeyError(seq.id)

    def bytes_below(self, row: int) -> int:
        return sum(s.resident_tokens for s in self.rows[row + 1:]) * self.kvpt

    def remove(self, seq: SequenceState) -> Tuple[int, int]:
        """Drop ``seq``'s row; return (row index, bytes of rows shifted up)."""
        row = self.index(seq)
        below = self.bytes_below(row)
        del self.rows[row]
        return row, below

    def is_contiguous(self) -> bool:
        return len({id(s) for s in self.rows}) == len(self.rows) and all(
            s.status is Status.RUNNING for s in self.rows
        )


def detect_overruns(running: Iterable[SequenceState]) -> List[SequenceState]:
    return [s for s in running
            if s.generated_tokens == s.allocated_tokens
            and s.generated_tokens < s.request.output_tokens]


def doubled_allocation(seq: SequenceState, max_seq_len: int) -> int:
    return min(2 * seq.allocated_tokens, max_seq_len - seq.request.prompt_tokens)


def evict(seq: SequenceState, layout: LayoutModel, gpu: GpuConfig, max_seq_len: int,
          now: float = 0.0, iteration: int = 0) -> EvictionEvent:
    """Move ``seq`` off the GPU, compact the rows below it and double its allocation.

    The caller releases the old reservation from its ledger *before* calling
    (it needs the pre-doubling size) and re-pools the sequence afterwards.
    """
    if seq.status is not Status.RUNNING:
        raise RuntimeError(f"cannot evict sequence {seq.id} in state {seq.status.value}")
    batch_bytes = layout.total_bytes()
    transferred = layout.row_bytes(seq)
    row, below = layout.remove(seq)
    one_way = transferred / gpu.bw_h2d
    new_alloc = doubled_allocation(seq, max_seq_len)
    event = EvictionEvent(
        sequence_id=seq.id,
        row_index=row,
        transferred_bytes=transferred,
        rearranged_bytes=below,
        batch_bytes=batch_bytes,
        transfer_out_seconds=one_way,
        reload_seconds=one_way,
        rearrange_seconds=2.0 * below / gpu.bw_hbm,
        new_allocated_tokens=new_alloc,
        time=now,
        iteration=iteration,
    )
    seq.status = Status.EVICTED
    seq.eviction_count += 1
    seq.allocated_tokens = new_alloc
    seq.pending_reload_bytes = transferred
    return event


def eviction_penalty(sp_bytes: float, rows_below_bytes: float, gpu: GpuConfig) -> float:
    """Cost of evicting one sequence: round-trip transfer plus compaction."""
    return 2.0 * (sp_bytes / gpu.bw_h2d + rows_below_bytes / gpu.bw_hbm)


def expected_pool_penalty(p: float, n: int, mean_sp_bytes: float,
                          mean_total_resident_bytes: float, gpu: GpuConfig) -> float:
    """Expected eviction seconds over a pool of ``n`` sequences.

    A fraction ``p`` is short-predicted; each evicted row sits at a uniformly
    random position, so on average half the batch bytes are shifted.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if n < 0:
        raise ValueError("n must be >= 0")
    return 2.0 * p * n * (mean_sp_bytes / gpu.bw_h2d
                          + mean_total_resident_bytes / (2.0 * gpu.bw_hbm))
