"""Physical memory management for the growing per-request cache.

Two policies are modeled. STATIC_MAX reserves capacity for the maximum
context length the moment a request is admitted, which is what fixed-address
pre-generated command systems require. LAZY reserves only what the current
token count needs and grows one chunk at a time as tokens cross row
boundaries; chunks need not be adjacent, so freed holes are reusable
immediately.

Row accounting is per *group*: a set of banks whose row indices advance in
lockstep (the whole module under token-parallel placement, a single channel
under head-first placement). A request owns one or more *streams*, each a
dense virtual-chunk space bound to one group; every stream holds exactly
``ceil(t_cur / tokens_per_row)`` units (LAZY) or ``ceil(max_ctl /
tokens_per_row)`` units (STATIC_MAX), and a unit is ``rows_per_unit``
contiguous physical rows. Conservation -- free rows plus live rows equals
total rows -- holds per group at every event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple


class AllocError(ValueError):
    pass


class OutOfRows(AllocError):
    """Mid-generation growth failed; the scheduler must stall the request."""


class Policy(Enum):
    STATIC_MAX = "static_max"
    LAZY = "lazy"


class GroupKey(NamedTuple):
    module_id: int
    group_id: int


@dataclass(frozen=True)
class Chunk:
    """A contiguous run of physical rows on one bank group."""

    module_id: int
    group_id: int
    channel_lo: int
    channel_hi: int  # exclusive
    bank_lo: int
    bank_hi: int  # exclusive
    row_start: int
    rows: int

    def __post_init__(self):
        if self.rows < 1:
            raise AllocError("chunk must span at least one row")

    @property
    def key(self) -> GroupKey:
        return GroupKey(self.module_id, self.group_id)


@dataclass(frozen=True)
class GroupSpec:
    key: GroupKey
    channel_lo: int
    channel_hi: int
    bank_lo: int
    bank_hi: int
    total_rows: int


class _FreeList:
    """Sorted disjoint free intervals with first-fit allocation."""

    def __init__(self, total_rows: int, reserved: int = 0):
        if reserved > total_rows:
            raise AllocError("reservation exceeds group capacity")
        self.total_rows = total_rows
        self.intervals: List[List[int]] = (
            [[reserved, total_rows - reserved]] if total_rows > reserved else []
        )

    @property
    def free_rows(self) -> int:
        return sum(n for _, n in self.intervals)

    def alloc(self, run: int) -> Optional[int]:
        for iv in self.intervals:
            if iv[1] >= run:
                start = iv[0]
                iv[0] += run
                iv[1] -= run
                if iv[1] == 0:
                    self.intervals.remove(iv)
                return start
        return None

    def free(self, start: int, run: int) -> None:
        lo, hi = start, start + run
        for iv in self.intervals:
            if lo < iv[0] + iv[1] and iv[0] < hi:
                raise AllocError(f"double free of rows [{lo}, {hi})")
        self.intervals.append([lo, run])
        self.intervals.sort()
        merged: List[List[int]] = []
        for iv in self.intervals:
            if merged and merged[-1][0] + merged[-1][1] == iv[0]:
                merged[-1][1] += iv[1]
            else:
                merged.append(iv)
        self.intervals = merged


@dataclass
class StreamAlloc:
    space: int
    group: GroupKey
    chunks: List[Chunk] = field(default_factory=list)


@dataclass
class RequestAlloc:
    request_id: int
    t_cur: int
    units: int
    streams: List[StreamAlloc]


class AllocatorState:
    """Free lists plus live allocations for one simulated memory domain."""

    def __init__(
        self,
        groups: Sequence[GroupSpec],
        policy: Policy = Policy.LAZY,
        tokens_per_row: int = 256,
        max_ctl: int = 32768,
        rows_per_unit: int = 1,
        reserved_rows: int = 0,
    ):
        if tokens_per_row < 1 or rows_per_unit < 1 or max_ctl < 1:
            raise AllocError("tokens_per_row, rows_per_unit, max_ctl must be >= 1")
        self.policy = policy
        self.tokens_per_row = tokens_per_row
        self.max_ctl = max_ctl
        self.rows_per_unit = rows_per_unit
        self.specs: Dict[GroupKey, GroupSpec] = {g.key: g for g in groups}
        self.free: Dict[GroupKey, _FreeList] = {
            g.key: _FreeList(g.total_rows, reserved_rows) for g in groups
        }
        self.live: Dict[int, RequestAlloc] = {}
        self.events: List[Tuple[int, str, int, int, int]] = []
        self._clock = 0

    # -- accounting ---------------------------------------------------------
    def units_for(self, tokens: int) -> int:
        return -(-tokens // self.tokens_per_row)

    def free_rows(self, key: Optional[GroupKey] = None) -> int:
        if key is not None:
            return self.free[key].free_rows
        return sum(f.free_rows for f in self.free.values())

    def live_rows(self) -> int:
        return sum(
            c.rows
            for alloc in self.live.values()
            for s in alloc.streams
            for c in s.chunks
        )

    def usable_rows(self) -> int:
        """Rows under allocator control (capacity minus static reservations)."""
        total = sum(f.free_rows for f in self.free.values())
        return total + self.live_rows()

    def tick(self, clock: int) -> None:
        self._clock = clock

    def _log(self, event: str, request_id: int, rows: int) -> None:
        self.events.append((self._clock, event, request_id, rows, self.free_rows()))

    # -- operations ----------------------------------------------------------
    def _alloc_unit(self, stream: StreamAlloc) -> Optional[Chunk]:
        start = self.free[stream.group].alloc(self.rows_per_unit)
        if start is None:
            return None
        spec = self.specs[stream.group]
        return Chunk(
            module_id=stream.group.module_id,
            group_id=stream.group.group_id,
            channel_lo=spec.channel_lo,
            channel_hi=spec.channel_hi,
            bank_lo=spec.bank_lo,
            bank_hi=spec.bank_hi,
            row_start=start,
            rows=self.rows_per_unit,
        )

    def _rollback(self, streams: List[StreamAlloc]) -> None:
        for s in streams:
            for c in s.chunks:
                self.free[s.group].free(c.row_start, c.rows)
            s.chunks.clear()

    def admit(
        self,
        request_id: int,
        input_len: int,
        streams: Sequence[Tuple[int, GroupKey]],
    ) -> Optional[List[Chunk]]:
        """Reserve capacity for a new request; None means REJECTED (batch full).

        LAZY reserves the prefilled extent only; STATIC_MAX reserves the
        maximum context length. A rejection is not a fault and leaves the
        state untouched.
        """
        if request_id in self.live:
            raise AllocError(f"request {request_id} already live")
        if input_len < 1:
            raise AllocError(f"request {request_id}: input_len={input_len} < 1")
        if input_len > self.max_ctl:
            raise AllocError(
                f"request {request_id}: input_len={input_len} > max_ctl={self.max_ctl}"
            )
        units = self.units_for(
            self.max_ctl if self.policy is Policy.STATIC_MAX else input_len
        )
        allocs = [StreamAlloc(space=s, group=g) for s, g in streams]
        for s in allocs:
            if s.group not in self.free:
                raise AllocError(f"unknown group {s.group}")
        for _ in range(units):
            for s in allocs:
                chunk = self._alloc_unit(s)
                if chunk is None:
                    self._rollback(allocs)
                    return None
                s.chunks.append(chunk)
        self.live[request_id] = RequestAlloc(
            request_id=request_id, t_cur=input_len, units=units, streams=allocs
        )
        self._log("admit", request_id, units * self.rows_per_unit * len(allocs))
        return [c for s in allocs for c in s.chunks]

    def grow(self, request_id: int, new_t_cur: int) -> List[Chunk]:
        """Advance a LAZY request by one token; allocates on row-boundary cross.

        Returns the new chunks (empty when the token fits the current rows).
        Raises :class:`OutOfRows` when no free run is available; the caller
        stalls the request and retries later (state is unchanged, the token
        is not consumed).
        """
        alloc = self.live.get(request_id)
        if alloc is None:
            raise AllocError(f"grow of unknown request {request_id}")
        if self.policy is not Policy.LAZY:
            raise AllocError("grow is only meaningful under LAZY policy")
        if new_t_cur != alloc.t_cur + 1:
            raise AllocError(
                f"request {request_id}: t_cur {alloc.t_cur} -> {new_t_cur} is not +1"
            )
        need = self.units_for(new_t_cur)
        new_chunks: List[Chunk] = []
        if need > alloc.units:
            staged: List[Tuple[StreamAlloc, Chunk]] = []
            for s in alloc.streams:
                chunk = self._alloc_unit(s)
                if chunk is None:
                    for ss, cc in staged:
                        self.free[ss.group].free(cc.row_start, cc.rows)
                    raise OutOfRows(
                        f"request {request_id}: no free run of {self.rows_per_unit} rows"
                    )
                staged.append((s, chunk))
            for s, chunk in staged:
                s.chunks.append(chunk)
                new_chunks.append(chunk)
            alloc.units = need
            self._log("grow", request_id, self.rows_per_unit * len(staged))
        alloc.t_cur = new_t_cur
        return new_chunks

    def release(self, request_id: int) -> int:
        """Return all of a request's rows to the free lists; returns the count."""
        alloc = self.live.pop(request_id, None)
        if alloc is None:
            raise AllocError(f"release of unknown request {request_id}")
        freed = 0
        for s in alloc.streams:
            for c in s.chunks:
                self.free[s.group].free(c.row_start, c.rows)
                freed += c.rows
        self._log("release", request_id, freed)
        return freed

    def stream_spaces(self, request_id: int) -> List[int]:
        return [s.space for s in self.live[request_id].streams]


def single_group_state(
    total_rows: int,
    policy: Policy = Policy.LAZY,
    tokens_per_row: int = 256,
    max_ctl: int = 32768,
    rows_per_unit: int = 1,
) -> AllocatorState:
    """Convenience: one module-wide group, the common standalone setup."""
    spec = GroupSpec(GroupKey(0, 0), 0, 1, 0, 1, total_rows)
    return AllocatorState(
        [spec],
        policy=policy,
        tokens_per_row=tokens_per_row,
        max_ctl=max_ctl,
        rows_per_unit=rows_per_unit,
    )


# ---------------------------------------------------------------------------
# Batch-size estimation
# ---------------------------------------------------------------------------


def avg_batch_size(
    trace: Sequence[Tuple[int, int]],
    capacity_rows: int,
    policy: Policy,
    tokens_per_row: int = 256,
    max_ctl: int = 32768,
) -> float:
    """Time-weighted mean live batch over a greedy admit-on-release replay.

    ``trace`` is (input_len, out_len) pairs served FIFO, one generated token
    per live request per iteration. Requests whose growth hits the capacity
    wall stall for the iteration. Row math only; one row per unit.
    """
    if capacity_rows < 1:
        raise AllocError("capacity must be positive")
    units = lambda t: -(-t // tokens_per_row)
    queue = list(trace)
    for input_len, out_len in queue:
        if input_len < 1 or out_len < 1:
            raise AllocError("trace lengths must be positive")
    running: List[List[int]] = []  # [t_cur, remaining, held_rows, input_len, out_len]
    free = capacity_rows
    batch_samples = 0
    iterations = 0
    idx = 0
    overflow: List[Tuple[int, int]] = []  # preempted requests, re-served at the end
    while idx < len(queue) or running or overflow:
        while idx < len(queue) or overflow:
            input_len, out_len = queue[idx] if idx < len(queue) else overflow[0]
            need = units(max_ctl if policy is Policy.STATIC_MAX else input_len)
            if need > free:
                break
            free -= need
            running.append([input_len, out_len, need, input_len, out_len])
            if idx < len(queue):
                idx += 1
            else:
                overflow.pop(0)
        if not running:
            raise AllocError("request cannot fit even in empty memory")
        iterations += 1
        batch_samples += len(running)
        done_idx = []
        progressed = False
        for i, req in enumerate(running):
            if policy is Policy.LAZY:
                need = units(req[0] + 1)
                if need > req[2]:
                    if need - req[2] > free:
                        continue  # stalled this iteration
                    free += req[2] - need  # negative delta: takes rows
                    req[2] = need
            req[0] += 1
            req[1] -= 1
            progressed = True
            if req[1] == 0:
                done_idx.append(i)
        for i in reversed(done_idx):
            free += running[i][2]
            running.pop(i)
        if not progressed and running:
            # Every live request is stalled on growth: stall-only policy would
            # deadlock, so preempt the youngest and restart it later.
            victim = running.pop()
            free += victim[2]
            overflow.append((victim[3], victim[4]))
    return batch_samples / iterations


def ideal_avg_batch_size(
    trace: Sequence[Tuple[int, int]],
    capacity_rows: int,
    tokens_per_row: int = 256,
) -> float:
    """Upper-bound batch: fractional rows, no rounding, no stalls."""
    queue = list(trace)
    running: List[List[float]] = []
    free = float(capacity_rows)
    batch_samples = 0
    iterations = 0
    idx = 0
    step = 1.0 / tokens_per_row
    while idx < len(queue) or running:
        while idx < len(queue):
            input_len, out_len = queue[idx]
            need = input_len * step
            if need > free + 1e-9:
                break
            free -= need
            running.append([float(out_len), need])
            idx += 1
        if not running:
            raise AllocError("request cannot fit even in empty memory")
        iterations += 1
        batch_samples += len(running)
        done_idx = []
        for i, req in enumerate(running):
            if free >= step - 1e-12:
                free -= step
                req[1] += step
            req[0] -= 1
            if req[0] <= 0:
                done_idx.append(i)
        for i in reversed(done_idx):
            free += running[i][1]
            running.pop(i)
    return batch_samples / iterations
