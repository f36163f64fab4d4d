"""Workload partitioning: FC tensor sharding and cache placement.

Two cache placement strategies are implemented. Head-first keeps each
(request, head) cache inside a single channel, the conventional mapping that
parallelizes over independent (batch, head) pairs and leaves channels idle
when there are fewer pairs than channels. Token-parallel slices the key cache
along the token dimension over every bank of the module and the value cache
along the per-head feature (output) dimension, so all banks work on one head
regardless of batch size; score vectors are aggregated in the controller hub,
which runs the softmax over the complete gathered vector (never a partial
softmax).

``Geometry`` is the single source of truth for how cache units map onto DRAM
rows; the compiler, the allocator, and the functional engine all derive their
layout constants from it:

    S        tokens of one head per bank row (elements_per_row // d_h)
    G        banks in one head's group (whole module / one channel)
    tpr      tokens covered by one row unit across the group, G * S
    v_cols   value-cache columns per bank, ceil(d_h / G)
    v_rows   value rows per unit (1 when v_cols > 1)

One cache unit of one layer occupies 1 + v_rows physical rows; a request's
chunk bundles all local layers, so each virtual chunk index spans
``(1 + v_rows) * local_layers`` contiguous rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .device import PimTopology


class PartitionError(ValueError):
    pass


class FcOp(Enum):
    QKV_GEN = "qkv_gen"
    PROJ = "proj"
    FFN1 = "ffn1"
    FFN2 = "ffn2"


class AttnOp(Enum):
    QKT = "qkt"
    SV = "sv"


class Strategy(Enum):
    HEAD_FIRST = "head_first"  # each (request, head) cache within one channel
    TOKEN_PARALLEL = "token_parallel"  # K by tokens over all banks, V by feature


# Ops whose weight matrix splits along the output dimension (no reduction)
# versus the input dimension (partial sums reduced across shards).
_SPLIT_OUT = {FcOp.QKV_GEN, FcOp.FFN1}
_SPLIT_IN = {FcOp.PROJ, FcOp.FFN2}


@dataclass(frozen=True)
class LayerShape:
    """Shape of one decoder operation, FC or attention."""

    op: object  # FcOp | AttnOp
    d_in: int = 0
    d_out: int = 0
    n_h: int = 0
    n_kv_h: int = 0
    d_h: int = 0
    t: int = 0

    def __post_init__(self):
        if isinstance(self.op, FcOp):
            if self.d_in < 1 or self.d_out < 1:
                raise PartitionError(f"{self.op}: d_in/d_out must be positive")
        else:
            if self.n_h < 1 or self.d_h < 1:
                raise PartitionError(f"{self.op}: n_h/d_h must be positive")
            if self.n_kv_h and self.n_h % self.n_kv_h:
                raise PartitionError("n_h must be a multiple of n_kv_h")


@dataclass(frozen=True)
class FcShard:
    d_out: int
    d_in: int
    needs_reduce: bool
    pad_out: int = 0  # zero rows appended to the full matrix before slicing
    pad_in: int = 0


@dataclass(frozen=True)
class FcPartition:
    shards: Tuple[FcShard, ...]
    tp: int
    split_out: bool
    input_broadcast_bytes: int  # total input movement to all shards
    output_gather_bytes: int  # total output movement back (incl. partials)


def partition_fc(shape: LayerShape, tp: int, element_bytes: int = 2) -> FcPartition:
    """Split an FC weight matrix over ``tp`` shards.

    Output-projection ops split d_out (each shard owns whole rows, no
    reduction); input-projection ops split d_in (each shard sees an input
    slice and produces a full-length partial sum that must be reduced).
    Dimensions that do not divide evenly are zero-padded and the padding is
    masked out on reassembly.
    """
    if not isinstance(shape.op, FcOp):
        raise PartitionError(f"partition_fc on non-FC op {shape.op}")
    if tp < 1:
        raise PartitionError(f"tp={tp} < 1")
    split_out = shape.op in _SPLIT_OUT
    dim = shape.d_out if split_out else shape.d_in
    if tp > dim:
        raise PartitionError(f"tp={tp} exceeds splittable dimension {dim}")
    padded = -(-dim // tp) * tp
    pad = padded - dim
    per = padded // tp
    if split_out:
        shards = tuple(
            FcShard(d_out=per, d_in=shape.d_in, needs_reduce=False, pad_out=pad)
            for _ in range(tp)
        )
        in_bytes = tp * shape.d_in * element_bytes if tp > 1 else 0
        out_bytes = shape.d_out * element_bytes if tp > 1 else 0
    else:
        shards = tuple(
            FcShard(d_out=shape.d_out, d_in=per, needs_reduce=tp > 1, pad_in=pad)
            for _ in range(tp)
        )
        in_bytes = shape.d_in * element_bytes if tp > 1 else 0
        out_bytes = tp * shape.d_out * element_bytes if tp > 1 else 0
    return FcPartition(
        shards=shards,
        tp=tp,
        split_out=split_out,
        input_broadcast_bytes=in_bytes,
        output_gather_bytes=out_bytes,
    )


def reassemble_fc(
    partition: FcPartition, shard_outputs: Sequence[np.ndarray], d_out: int
) -> np.ndarray:
    """Combine shard GEMV results back into the unsharded output."""
    if partition.split_out:
        full = np.concatenate(shard_outputs)
        return full[:d_out]
    out = np.zeros_like(shard_outputs[0], dtype=np.float64)
    for part in shard_outputs:
        out += part.astype(np.float64)
    return out.astype(np.float32)[:d_out]


# ---------------------------------------------------------------------------
# Cache geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    """Row-level layout of one head's cache on its bank group."""

    strategy: Strategy
    d_h: int
    group_channels: int
    group_banks: int  # G: banks in the group
    tokens_per_bank_row: int  # S
    tokens_per_row: int  # tpr = G * S, the unit growth granularity
    v_cols_per_bank: int  # c
    v_rows_per_unit: int
    local_layers: int

    @property
    def rows_per_layer_unit(self) -> int:
        return 1 + self.v_rows_per_unit

    @property
    def rows_per_unit(self) -> int:
        """Physical rows one virtual chunk spans (all local layers)."""
        return self.rows_per_layer_unit * self.local_layers

    def units_for(self, tokens: int) -> int:
        return -(-tokens // self.tokens_per_row)

    def layer_base(self, local_layer: int) -> int:
        return local_layer * self.rows_per_layer_unit

    def k_offset(self, local_layer: int) -> int:
        return self.layer_base(local_layer)

    def v_offset(self, local_layer: int, sub: int) -> int:
        return self.layer_base(local_layer) + 1 + sub

    def token_bank(self, token: int) -> int:
        """Bank ordinal (within the group) holding a token's key slice."""
        return (token % self.tokens_per_row) // self.tokens_per_bank_row

    def token_slot(self, token: int) -> int:
        return (token % self.tokens_per_row) % self.tokens_per_bank_row

    def v_bank(self, col: int) -> int:
        return col % self.group_banks

    def v_slot(self, col: int) -> int:
        return col // self.group_banks


def attention_geometry(
    d_h: int,
    topo: PimTopology,
    strategy: Strategy,
    local_layers: int = 1,
) -> Geometry:
    """Derive the row layout for one head under the given strategy."""
    E = topo.elements_per_row
    if d_h > E:
        raise PartitionError(f"d_h={d_h} exceeds row capacity {E}")
    if strategy is Strategy.TOKEN_PARALLEL:
        channels = topo.channels_per_module
    else:
        channels = 1
    G = channels * topo.banks_per_channel
    S = E // d_h
    tpr = G * S
    c = -(-d_h // G)
    if c == 1:
        v_rows = -(-tpr // E)
    else:
        # few banks relative to d_h: all value columns of a unit share one row
        if c * tpr > E:
            raise PartitionError(
                f"value layout not mappable: {c} cols x {tpr} tokens > row ({E})"
            )
        v_rows = 1
    return Geometry(
        strategy=strategy,
        d_h=d_h,
        group_channels=channels,
        group_banks=G,
        tokens_per_bank_row=S,
        tokens_per_row=tpr,
        v_cols_per_bank=c,
        v_rows_per_unit=v_rows,
        local_layers=local_layers,
    )


# ---------------------------------------------------------------------------
# Placement plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SliceDesc:
    request: int
    head: int
    kind: str  # "K" or "V"
    lo: int  # token index (K) or column index (V), inclusive
    hi: int  # exclusive

    def count(self) -> int:
        return self.hi - self.lo


@dataclass
class PlacementPlan:
    strategy: Strategy
    topo: PimTopology
    slices: Dict[Tuple[int, int], List[SliceDesc]] = field(default_factory=dict)
    channel_of_pair: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def add(self, channel: int, bank: int, desc: SliceDesc) -> None:
        self.slices.setdefault((channel, bank), []).append(desc)

    def all_slices(self) -> Iterable[Tuple[Tuple[int, int], SliceDesc]]:
        for loc, descs in self.slices.items():
            for d in descs:
                yield loc, d

    def to_manifest(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "slices": {
                f"{c}.{b}": [
                    {"request": d.request, "head": d.head, "kind": d.kind, "lo": d.lo, "hi": d.hi}
                    for d in descs
                ]
                for (c, b), descs in sorted(self.slices.items())
            },
        }


def place_kv(
    strategy: Strategy,
    requests: Sequence[Tuple[int, int]],
    n_kv_heads: int,
    d_h: int,
    topo: PimTopology,
) -> PlacementPlan:
    """Place every request's per-head K/V cache on one module's bank grid.

    ``requests`` is (request_id, token_count) pairs. Token-parallel spreads
    each head over the whole module; head-first binds each (request, head)
    pair to the currently least-loaded channel and fails when one head's
    cache cannot fit a single channel.
    """
    plan = PlacementPlan(strategy=strategy, topo=topo)
    geo = attention_geometry(d_h, topo, strategy)
    total_bytes = sum(
        2 * t * d_h * n_kv_heads * topo.element_bytes for _, t in requests
    )
    if total_bytes > topo.module_capacity_bytes:
        raise PartitionError(
            f"cache ({total_bytes} B) exceeds module capacity "
            f"({topo.module_capacity_bytes} B)"
        )
    if strategy is Strategy.HEAD_FIRST:
        channel_rows = -(-topo.rows_per_bank // 1)
        load = [0] * topo.channels_per_module
        for rid, t in requests:
            rows_needed = geo.units_for(t) * geo.rows_per_layer_unit
            for h in range(n_kv_heads):
                ch = min(range(topo.channels_per_module), key=lambda c: load[c])
                if load[ch] + rows_needed > channel_rows:
                    raise PartitionError(
                        f"head-first placement infeasible: request {rid} head {h} "
                        f"needs {rows_needed} rows in one channel"
                    )
                load[ch] += rows_needed
                plan.channel_of_pair[(rid, h)] = ch
                _add_head_slices(plan, geo, rid, h, t, channel=ch)
    else:
        for rid, t in requests:
            for h in range(n_kv_heads):
                _add_head_slices(plan, geo, rid, h, t, channel=None)
    return plan


def _add_head_slices(
    plan: PlacementPlan,
    geo: Geometry,
    request: int,
    head: int,
    t: int,
    channel: Optional[int],
) -> None:
    topo = plan.topo
    nb = topo.banks_per_channel
    for beta in range(geo.group_banks):
        if channel is None:
            ch, bank = beta // nb, beta % nb
        else:
            ch, bank = channel, beta
        # key slices: blocks of S tokens per unit
        runs: List[Tuple[int, int]] = []
        for r in range(geo.units_for(t)):
            lo = r * geo.tokens_per_row + beta * geo.tokens_per_bank_row
            hi = min(lo + geo.tokens_per_bank_row, t)
            if lo < t:
                runs.append((lo, hi))
        for lo, hi in runs:
            plan.add(ch, bank, SliceDesc(request, head, "K", lo, hi))
        # value columns striped round-robin over the group
        for col in range(geo.d_h):
            if geo.v_bank(col) == beta:
                plan.add(ch, bank, SliceDesc(request, head, "V", col, col + 1))


def occupancy(plan: PlacementPlan, topo: PimTopology) -> dict:
    """Channel/bank usage fractions and load imbalance by exhaustive count."""
    n_ch = topo.channels_per_module
    n_bank = topo.banks_per_channel
    loads = np.zeros((n_ch, n_bank), dtype=np.int64)
    for (c, b), desc in plan.all_slices():
        loads[c, b] += desc.count()
    busy_channels = int((loads.sum(axis=1) > 0).sum())
    busy_banks = int((loads > 0).sum())
    mean = loads.mean()
    imbalance = float(loads.max() / mean) if mean > 0 else 1.0
    return {
        "channel_occupancy": busy_channels / n_ch,
        "bank_occupancy": busy_banks / (n_ch * n_bank),
        "imbalance": imbalance,
    }


def verify_coverage(
    plan: PlacementPlan,
    requests: Sequence[Tuple[int, int]],
    n_kv_heads: int,
    d_h: int,
) -> List[str]:
    """Every (request, head, token) key element placed exactly once; same for
    value columns. Returns human-readable problems, empty when sound."""
    problems: List[str] = []
    k_seen: Dict[Tuple[int, int, int], int] = {}
    v_seen: Dict[Tuple[int, int, int], int] = {}
    for _, d in plan.all_slices():
        for x in range(d.lo, d.hi):
            key = (d.request, d.head, x)
            target = k_seen if d.kind == "K" else v_seen
            target[key] = target.get(key, 0) + 1
    for rid, t in requests:
        for h in range(n_kv_heads):
            for tok in range(t):
                n = k_seen.get((rid, h, tok), 0)
                if n != 1:
                    problems.append(f"K ({rid},{h},{tok}) placed {n} times")
            for col in range(d_h):
                n = v_seen.get((rid, h, col), 0)
                if n != 1:
                    problems.append(f"V ({rid},{h},{col}) placed {n} times")
    extra = len(k_seen) + len(v_seen) - sum(
        (t + d_h) * n_kv_heads for _, t in requests
    )
    if extra > 0:
        problems.append(f"{extra} slices beyond declared requests")
    return problems
