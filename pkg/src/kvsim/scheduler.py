"""First-fit-decreasing admission into a single HBM bin."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

from .core import SequenceState, Status


class UnschedulableError(RuntimeError):
    """A sequence cannot fit even on an otherwise empty GPU."""

    def __init__(self, seq: SequenceState, reservation: int, capacity: int):
        self.seq = seq
        self.reservation = reservation
        self.capacity = capacity
        super().__init__(
            f"request {seq.id} is unschedulable: needs {reservation} B of KV cache "
            f"({seq.reserved_tokens} tokens) but only {capacity} B are free on an empty GPU"
        )


@dataclass
class MemoryLedger:
    hbm_capacity: int
    weight_bytes: int
    kv_bytes_per_token: int
    reserved_bytes: int = 0

    @property
    def kv_capacity(self) -> int:
        return self.hbm_capacity - self.weight_bytes

    @property
    def free_bytes(self) -> int:
        return self.kv_capacity - self.reserved_bytes

    def reservation(self, seq: SequenceState) -> int:
        return seq.reserved_tokens * self.kv_bytes_per_token

    def reserve(self, seq: SequenceState) -> None:
        nbytes = self.reservation(seq)
        if nbytes > self.free_bytes:
            raise AssertionError(f"reserving {nbytes} B for seq {seq.id} overflows the ledger")
        self.reserved_bytes += nbytes

    def release(self, seq: SequenceState) -> None:
        self.reserved_bytes -= self.reservation(seq)
        assert self.reserved_bytes >= 0

    def check(self) -> None:
        assert 0 <= self.reserved_bytes <= self.kv_capacity, (
            f"reserved {self.reserved_bytes} B outside [0, {self.kv_capacity}]"
        )


def _sort_key(seq: SequenceState):
    return (-seq.reserved_tokens, seq.request.arrival_time, seq.id)


class PoolView:
    """Pooled sequences, largest reservation first; ties by arrival then id."""

    def __init__(self, seqs=()):
        self._keys: list = []
        self._seqs: List[SequenceState] = []
        self.skips: Dict[int, int] = {}
        for s in seqs:
            self.add(s)

    def __len__(self) -> int:
        return len(self._seqs)

    def __iter__(self) -> Iterator[SequenceState]:
        return iter(list(self._seqs))

    def __bool__(self) -> bool:
        return bool(self._seqs)

    def add(self, seq: SequenceState) -> None:
        seq.status = Status.POOLED
        key = _sort_key(seq)
        i = bisect.bisect_left(self._keys, key)
        self._keys.insert(i, key)
        self._seqs.insert(i, seq)
        self.skips.setdefault(seq.id, 0)

    def _pop(self, i: int) -> SequenceState:
        del self._keys[i]
        seq = self._seqs.pop(i)
        self.skips.pop(seq.id, None)
        return seq

    def remove(self, seq: SequenceState) -> None:
        i = bisect.bisect_left(self._keys, _sort_key(seq))
        if i >= len(self._seqs) or self._seqs[i] is not seq:
            raise KeyError(seq.id)
        self._pop(i)

    def is_sorted(self) -> bool:
        return all(self._keys[i] <= self._keys[i + 1] for i in range(len(self._keys) - 1))

    def largest(self) -> Optional[SequenceState]:
        return self._seqs[0] if self._seqs else None


def admit_ffd(pool: PoolView, ledger: MemoryLedger, now: float,
              slots: Optional[int] = None,
              max_skip_iterations: Optional[int] = None) -> List[SequenceState]:
    """Admit pooled sequences first-fit-decreasing until memory or the pool runs out.

    ``slots`` limits how many sequences may join (batch-size cap). Admitted
    sequences become RUNNING and their reservations are charged to ``ledger``.
    """
    admitted: List[SequenceState] = []
    if not pool:
        return admitted
    head = pool.largest()
    if ledger.reservation(head) > ledger.kv_capacity:
        raise UnschedulableError(head, ledger.reservation(head), ledger.kv_capacity)
    if slots is not None and slots <= 0:
        return admitted

    kvpt = ledger.kv_bytes_per_token
    free = ledger.free_bytes

    if max_skip_iterations is not None:
        starved = [s for s in pool._seqs
                   if s.request.arrival_time <= now and pool.skips[s.id] >= max_skip_iterations]
        if starved:
            first = min(starved, key=lambda s: (s.request.arrival_time, s.id))
            if ledger.reservation(first) > free:
                # hold memory for the starved sequence; admit nothing else
                _bump_skips(pool, now)
                return admitted
            pool.remove(first)
            _admit_one(first, ledger, now)
            admitted.append(first)
            free = ledger.free_bytes

    i = 0
    while i < len(pool._seqs):
        if slots is not None and len(admitted) >= slots:
            break
        # first item at or after i that fits: keys sort by -tokens ascending
        max_tokens = free // kvpt
        j = bisect.bisect_left(pool._keys, (-max_tokens,), lo=i)
        if j >= len(pool._seqs):
            break
        seq = pool._seqs[j]
        if seq.request.arrival_time > now:
            i = j + 1
            continue
        pool._pop(j)
        _admit_one(seq, ledger, now)
        admitted.append(seq)
        free = ledger.free_bytes
        i = j

    if max_skip_iterations is not None:
        _bump_skips(pool, now)
    return admitted


def _admit_one(seq: SequenceState, ledger: MemoryLedger, now: float) -> None:
    ledger.reserve(seq)
    seq.status = Status.RUNNING
    if seq.first_admit_time is None:
        seq.first_admit_time = now


def _bump_skips(pool: PoolView, now: float) -> None:
    for s in pool._seqs:
        if s.request.arrival_time <= now:
            pool.skips[s.id] += 1


def iteration_admit(pool: PoolView, ledger: MemoryLedger, now: float,
                    slots: Optional[int] = None,
                    max_skip_iterations: Optional[int] = None) -> List[SequenceState]:
    """Per-iteration admission against the ledger after completions and evictions."""
    return admit_ffd(pool, ledger, now, slots=slots, max_skip_iterations=max_skip_iterations)
