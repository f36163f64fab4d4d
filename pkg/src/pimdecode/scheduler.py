"""Multi-node pipeline simulator: TP x PP decode with continuous batching.

One simulated iteration generates one token for every live request. The
running batch is split into micro-batches that flow through the pipeline
stages; a stage's time for a micro-batch is the sum of its layers' device
command streams (from the compiled program, walked by the device timing
model), hub vector work, cache-append transfers, and tensor-parallel
reductions. Stage handoffs cost one host synchronization bubble plus the
activation transfer, over the cross-node link when the stages live on
different nodes. Finished requests release their rows and are replaced from
the queue without draining the batch.

Timing is exact with respect to the device model: per-operation cycles come
from walking the dispatcher-expanded command streams of the actual compiled
stacks (cached per token-row-count bucket), so the scheduler and the
functional engine charge identical device costs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .compiler import (
    CompiledProgram,
    CompiledStage,
    CompileError,
    FcOp,
    compile_model,
    kv_space,
    model_config,
)
from .device import (
    PimTopology,
    TimingParams,
    epu_cycles,
    schedule_cycles,
    transfer_cycles,
)
from .dispatcher import (
    ADDR_MAP_BYTES,
    ADDR_ENTRY_BYTES,
    CMD_BUFFER_BYTES,
    ConfigBuffer,
    Va2PaTable,
    expand,
)
from .isa import OpKind
from .memmgr import (
    AllocatorState,
    GroupKey,
    GroupSpec,
    OutOfRows,
    Policy,
)
from .partition import Strategy, attention_geometry


class SimError(RuntimeError):
    pass


class RequestState(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    STALLED = "stalled"
    DONE = "done"


@dataclass
class Request:
    id: int
    input_len: int
    out_len: int
    t_cur: int = 0
    state: RequestState = RequestState.QUEUED

    def __post_init__(self):
        if self.input_len < 1 or self.out_len < 1:
            raise SimError(f"request {self.id}: lengths must be positive")

    @property
    def done(self) -> bool:
        return self.state is RequestState.DONE


@dataclass(frozen=True)
class Features:
    itpp: bool = True
    lazy_alloc: bool = True
    pingpong: bool = True

    def to_dict(self) -> dict:
        return {"itpp": self.itpp, "lazy_alloc": self.lazy_alloc, "pingpong": self.pingpong}


@dataclass(frozen=True)
class ParallelismPlan:
    tp: int
    pp: int
    micro_batch: Optional[int] = None  # None: ceil(live batch / pp)

    def modules_used(self) -> int:
        return self.tp * self.pp

    def stage_modules(self, stage: int) -> range:
        return range(stage * self.tp, (stage + 1) * self.tp)

    def stage_nodes(self, stage: int, topo: PimTopology) -> set:
        return {m // topo.modules_per_node for m in self.stage_modules(stage)}


@dataclass
class TimelineEvent:
    time: float
    kind: str  # STAGE_EXEC | SYNC | COMM | ADMIT | GROW | RELEASE | STALL | PREEMPT
    payload: dict


@dataclass
class EventTimeline:
    events: List[TimelineEvent] = field(default_factory=list)

    def add(self, time: float, kind: str, **payload) -> None:
        self.events.append(TimelineEvent(time, kind, payload))

    def to_rows(self) -> List[dict]:
        return [{"time": e.time, "kind": e.kind, **e.payload} for e in self.events]


# ---------------------------------------------------------------------------
# Cost model over compiled stacks
# ---------------------------------------------------------------------------


class OpCostModel:
    """Cycle costs of every compiled op, by walking real command streams.

    FC stacks are walked once; attention stacks once per distinct row-unit
    count (addresses are synthesized with one fresh row per unit, which
    reproduces the activation pattern of any real placement).
    """

    def __init__(
        self, program: CompiledProgram, timing: TimingParams, pingpong: bool
    ):
        self.program = program
        self.timing = timing
        self.pingpong = pingpong
        self.topo = program.topo
        self._attn_cache: Dict[Tuple[int, int], Tuple[dict, dict]] = {}
        self._fc: Dict[int, Dict[FcOp, dict]] = {}
        self._cfg = ConfigBuffer(total_layers=program.model.n_layers)
        for st in program.stages:
            table = Va2PaTable()
            from .compiler import weight_table_entries

            for space, pas in weight_table_entries(st):
                table.extend(space, pas)
            per_op: Dict[FcOp, dict] = {}
            for op, kind in (
                (FcOp.QKV_GEN, OpKind.QKV_GEN),
                (FcOp.PROJ, OpKind.PROJ),
                (FcOp.FFN1, OpKind.FFN1),
                (FcOp.FFN2, OpKind.FFN2),
            ):
                stack = st.stacks[(st.layer_lo, kind)]
                cmds = expand(stack, self._cfg, table)
                res = schedule_cycles(
                    cmds,
                    self.topo,
                    timing,
                    gb_chunk=stack.meta.gb_chunk,
                    pingpong=pingpong,
                )
                per_op[op] = {"cycles": res.cycles, "breakdown": res.breakdown}
            self._fc[st.stage] = per_op

    def _attn_table(self, st: CompiledStage, units: int) -> Va2PaTable:
        t = Va2PaTable()
        t.extend(0, [st.weight_rows + r * st.geo.rows_per_unit for r in range(units)])
        return t

    def attention(self, stage_idx: int, units: int) -> Tuple[dict, dict]:
        """(qkt, sv) cost dicts for one head at ``units`` cache row units."""
        key = (stage_idx, units)
        hit = self._attn_cache.get(key)
        if hit is not None:
            return hit
        st = self.program.stages[stage_idx]
        table = self._attn_table(st, units)
        cfg = ConfigBuffer(total_layers=self.program.model.n_layers)
        cfg.add_request(0, max(1, (units - 1) * st.geo.tokens_per_row + 1))
        scope = 0 if st.geo.group_channels == self.topo.channels_per_module else 1
        out = []
        for kind in (OpKind.QKT, OpKind.SV):
            stack = st.stacks[(st.layer_lo, kind)]
            cmds = expand(stack, cfg, table, request_id=0, space=0)
            res = schedule_cycles(
                cmds,
                self.topo,
                self.timing,
                gb_chunk=stack.meta.gb_chunk,
                scope_mask=scope,
                pingpong=self.pingpong,
            )
            out.append({"cycles": res.cycles, "breakdown": res.breakdown})
        pair = (out[0], out[1])
        self._attn_cache[key] = pair
        return pair

    def fc(self, stage_idx: int) -> Dict[FcOp, dict]:
        return self._fc[self.program.stages[stage_idx].stage]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def pipeline_schedule(
    stage_times: Sequence[Sequence[float]],
    sync_cycles: float,
    comm_cycles: Sequence[float],
) -> Tuple[float, List[List[Tuple[float, float]]]]:
    """Makespan of a synchronous pipeline pass.

    ``stage_times[s][m]`` is stage ``s``'s busy time on micro-batch ``m``;
    ``comm_cycles[s]`` the transfer charged between stage ``s`` and ``s+1``.
    A stage starts a micro-batch when it finished the previous one and the
    upstream stage has handed this one off (sync bubble plus transfer).
    Returns (makespan, per-stage list of (start, finish))."""
    pp = len(stage_times)
    m_count = len(stage_times[0]) if pp else 0
    spans: List[List[Tuple[float, float]]] = [[(0.0, 0.0)] * m_count for _ in range(pp)]
    finish_prev_stage = [0.0] * m_count
    for s in range(pp):
        free = 0.0
        for m in range(m_count):
            ready = 0.0
            if s > 0:
                ready = finish_prev_stage[m] + sync_cycles + comm_cycles[s - 1]
            start = max(free, ready)
            end = start + stage_times[s][m]
            spans[s][m] = (start, end)
            free = end
        finish_prev_stage = [spans[s][m][1] for m in range(m_count)]
    makespan = max((spans[-1][m][1] for m in range(m_count)), default=0.0)
    return makespan, spans


@dataclass
class SimReport:
    tokens_per_sec: float
    utilization_pct: float
    avg_batch: float
    total_tokens: int
    wall_cycles: float
    iterations: int
    mac_lane_ops: float
    total_lanes: int
    latency_breakdown: Dict[str, Dict[str, float]]
    features: dict
    plan: dict
    model: dict
    preempts: int = 0
    stall_iterations: int = 0
    budget: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tokens_per_sec": self.tokens_per_sec,
            "utilization_pct": self.utilization_pct,
            "avg_batch": self.avg_batch,
            "total_tokens": self.total_tokens,
            "wall_cycles": self.wall_cycles,
            "iterations": self.iterations,
            "mac_lane_ops": self.mac_lane_ops,
            "total_lanes": self.total_lanes,
            "latency_breakdown": self.latency_breakdown,
            "features": self.features,
            "plan": self.plan,
            "model": self.model,
            "preempts": self.preempts,
            "stall_iterations": self.stall_iterations,
            "budget": self.budget,
        }


def validate_plan(
    plan: ParallelismPlan, model, topo: PimTopology
) -> Optional[str]:
    """Reason the plan is infeasible, or None."""
    model = model_config(model)
    if plan.tp < 1 or plan.pp < 1:
        return "tp and pp must be >= 1"
    if plan.modules_used() > topo.total_modules:
        return (
            f"plan uses {plan.modules_used()} modules, system has {topo.total_modules}"
        )
    if plan.pp > model.n_layers:
        return f"pp={plan.pp} exceeds {model.n_layers} layers"
    if model.n_heads % plan.tp or model.n_kv_heads % plan.tp:
        return f"tp={plan.tp} does not divide head counts"
    return None


class _StageMem:
    """Allocation bookkeeping for one stage (modules are symmetric)."""

    def __init__(
        self,
        st: CompiledStage,
        topo: PimTopology,
        strategy: Strategy,
        policy: Policy,
        max_ctl: int,
    ):
        if strategy is Strategy.TOKEN_PARALLEL:
            groups = [
                GroupSpec(GroupKey(st.stage, 0), 0, topo.channels_per_module, 0,
                          topo.banks_per_channel, topo.rows_per_bank)
            ]
        else:
            groups = [
                GroupSpec(GroupKey(st.stage, ch), ch, ch + 1, 0,
                          topo.banks_per_channel, topo.rows_per_bank)
                for ch in range(topo.channels_per_module)
            ]
        self.alloc = AllocatorState(
            groups,
            policy=policy,
            tokens_per_row=st.geo.tokens_per_row,
            max_ctl=max_ctl,
            rows_per_unit=st.geo.rows_per_unit,
            reserved_rows=st.weight_rows,
        )
        self.strategy = strategy
        self.st = st
        self.addr_entries = st.weight_table_entries()
        self.addr_limit = ADDR_MAP_BYTES // ADDR_ENTRY_BYTES

    def _streams(self, rid: int, units: int):
        out = []
        demand = units * self.alloc.rows_per_unit
        projected = {k: f.free_rows for k, f in self.alloc.free.items()}
        for h in range(self.st.n_kv_local):
            if self.strategy is Strategy.TOKEN_PARALLEL:
                g = GroupKey(self.st.stage, 0)
            else:
                g = max(projected, key=projected.get)
                projected[g] -= demand
            out.append((kv_space(rid, h, self.st.n_kv_local), g))
        return out

    def admit(self, rid: int, input_len: int) -> bool:
        units = self.alloc.units_for(
            self.alloc.max_ctl if self.alloc.policy is Policy.STATIC_MAX else input_len
        )
        new_entries = units * self.st.n_kv_local
        if self.addr_entries + new_entries > self.addr_limit:
            return False
        chunks = self.alloc.admit(rid, input_len, self._streams(rid, units))
        if chunks is None:
            return False
        self.addr_entries += new_entries
        return True

    def grow(self, rid: int, new_t: int) -> None:
        if self.alloc.policy is Policy.LAZY:
            before = self.alloc.live[rid].units
            if self.alloc.units_for(new_t) > before:
                if (
                    self.addr_entries + self.st.n_kv_local > self.addr_limit
                ):
                    raise OutOfRows("address map budget exhausted")
            self.alloc.grow(rid, new_t)
            self.addr_entries += (self.alloc.live[rid].units - before) * self.st.n_kv_local
        else:
            self.alloc.live[rid].t_cur = new_t

    def release(self, rid: int) -> int:
        self.addr_entries -= self.alloc.live[rid].units * self.st.n_kv_local
        return self.alloc.release(rid)


def simulate(
    trace: Sequence[Request],
    plan: ParallelismPlan,
    model,
    topo: PimTopology,
    timing: TimingParams,
    features: Features = Features(),
    record_timeline: bool = True,
    max_iterations: int = 10_000_000,
) -> Tuple[EventTimeline, SimReport]:
    """Event-driven decode over a request trace; returns timeline and report.

    Deterministic for identical inputs: the loop holds no randomness and all
    collections iterate in insertion order.
    """
    model = model_config(model)
    reason = validate_plan(plan, model, topo)
    if reason:
        raise SimError(f"infeasible plan: {reason}")
    strategy = Strategy.TOKEN_PARALLEL if features.itpp else Strategy.HEAD_FIRST
    policy = Policy.LAZY if features.lazy_alloc else Policy.STATIC_MAX
    program = compile_model(model, topo, tp=plan.tp, pp=plan.pp, strategy=strategy)
    for st in program.stages:
        if st.stack_bytes() > CMD_BUFFER_BYTES:
            raise SimError(
                f"stage {st.stage}: stacks ({st.stack_bytes()} B) exceed command buffer"
            )
    costs = OpCostModel(program, timing, features.pingpong)
    mems = [
        _StageMem(st, topo, strategy, policy, model.max_ctl) for st in program.stages
    ]
    eb = topo.element_bytes
    d = model.d_model
    tp, pp = plan.tp, plan.pp
    n_h_l = model.n_heads // tp
    n_kv_l = model.n_kv_heads // tp

    # Constant per-(request, layer) FC cost on one module of a stage.
    def fc_per_layer(stage_idx: int) -> Tuple[float, Dict[str, Dict[str, float]]]:
        fc = costs.fc(stage_idx)
        parts: Dict[str, Dict[str, float]] = {}
        total = 0.0
        for op, kind in (
            (FcOp.QKV_GEN, "QKV_GEN"),
            (FcOp.PROJ, "PROJ"),
            (FcOp.FFN1, "FFN1"),
            (FcOp.FFN2, "FFN2"),
        ):
            total += fc[op]["cycles"]
            parts[kind] = dict(fc[op]["breakdown"])
        st = program.stages[stage_idx]
        # hub vector work: two norms, two residuals, partial-sum folds,
        # activation; cache append transfer
        epu = 4 * epu_cycles(d, timing)
        ffn_s = -(-model.ffn // tp)
        for op in (FcOp.QKV_GEN, FcOp.PROJ, FcOp.FFN1, FcOp.FFN2):
            shape = st.fc_shapes[(st.layer_lo, op)]
            if shape.chunks > 1:
                epu += epu_cycles((shape.chunks - 1) * shape.d_out_s, timing)
        epu += epu_cycles(ffn_s, timing)  # activation
        kv_bytes = 2 * n_kv_l * model.head_dim * eb
        kv = timing.io_cmd_base_cycles + transfer_cycles(
            kv_bytes, timing.interface_bytes_per_cycle
        )
        parts["HUB"] = {"EPU": float(epu)}
        parts["KV_APPEND"] = {"DT-GB": float(kv)}
        return total + epu + kv, parts

    fc_layer_cost = [fc_per_layer(s) for s in range(pp)]

    # Tensor-parallel reduction per layer: two reduced ops, tree collective.
    # The per-step hop latency is paid once per micro-batch; the bandwidth
    # term scales with the number of vectors reduced.
    def allreduce_cycles(stage_idx: int) -> Tuple[float, float]:
        if tp == 1:
            return 0.0, 0.0
        nodes = plan.stage_nodes(stage_idx, topo)
        cross = len(nodes) > 1
        rate = (
            timing.internode_bytes_per_cycle()
            if cross
            else timing.interface_bytes_per_cycle
        )
        hop = timing.internode_hop_cycles if cross else timing.intranode_hop_cycles
        steps = 2 * math.ceil(math.log2(tp))
        fixed = 2.0 * steps * hop
        bytes_per_module = 2.0 * (tp - 1) / tp * d * eb
        per_request = 2.0 * transfer_cycles(bytes_per_module, rate)
        return fixed, per_request

    comm_layer_cost = [allreduce_cycles(s) for s in range(pp)]

    # Stage handoff transfer (activations for one request).
    def handoff_cycles(stage_idx: int) -> float:
        if stage_idx >= pp - 1:
            return 0.0
        same = plan.stage_nodes(stage_idx, topo) == plan.stage_nodes(stage_idx + 1, topo)
        rate = (
            timing.interface_bytes_per_cycle
            if same
            else timing.internode_bytes_per_cycle()
        )
        return float(transfer_cycles(d * eb, rate))

    handoff = [handoff_cycles(s) for s in range(pp)]

    # Per-head attention cost by cache row-unit count, cached; identical for
    # every stage (stacks differ only in layer ids).
    geo0 = program.stages[0].geo
    _pair_cache: Dict[int, float] = {}

    def pair_cost(u: int) -> float:
        c = _pair_cache.get(u)
        if c is None:
            qkt, sv = costs.attention(0, u)
            c = float(qkt["cycles"] + sv["cycles"])
            _pair_cache[u] = c
        return c

    def pair_costs(us: np.ndarray) -> np.ndarray:
        uniq, inv = np.unique(us, return_inverse=True)
        vals = np.array([pair_cost(int(u)) for u in uniq])
        return vals[inv]

    epu_pe = timing.epu_cycles_per_element
    n_ch = topo.channels_per_module
    u_counts: Dict[int, int] = {}  # attention executions per unit bucket
    fc_layer_execs = 0
    softmax_epu_total = 0.0

    queue = deque(Request(r.id, r.input_len, r.out_len) for r in trace)
    for r in queue:
        if r.input_len + r.out_len > model.max_ctl:
            raise SimError(
                f"request {r.id}: input+output ({r.input_len + r.out_len}) "
                f"exceeds max context {model.max_ctl}"
            )
    running: List[Request] = []
    timeline = EventTimeline()
    breakdown: Dict[str, Dict[str, float]] = {}
    wall = 0.0
    total_tokens = 0
    batch_samples = 0
    iterations = 0
    mac_ops = 0.0
    preempts = 0
    stall_iters = 0

    fc_macs_per_tok_layer = (
        d * model.qkv_out()
        + d * d
        + d * model.ffn * (2 if model.ffn_variant == "swiglu" else 1)
        + d * model.ffn
    )

    while queue or running:
        if iterations >= max_iterations:
            raise SimError("iteration limit reached")
        # --- continuous admission (FIFO) --------------------------------
        while queue:
            nxt = queue[0]
            if all(m.admit(nxt.id, nxt.input_len) for m in mems):
                queue.popleft()
                nxt.t_cur = nxt.input_len
                nxt.state = RequestState.RUNNING
                running.append(nxt)
                if record_timeline:
                    timeline.add(wall, "ADMIT", request=nxt.id, t=nxt.t_cur)
            else:
                for m in mems:
                    if nxt.id in m.alloc.live:
                        m.release(nxt.id)
                break
        if not running:
            if queue:
                raise SimError(
                    f"deadlock: request {queue[0].id} cannot fit in empty memory"
                )
            break
        iterations += 1
        batch_samples += len(running)
        # --- growth (one token per live request) ------------------------
        active: List[Request] = []
        for r in running:
            try:
                for m in mems:
                    m.grow(r.id, r.t_cur + 1)
                r.t_cur += 1
                r.state = RequestState.RUNNING
                active.append(r)
            except OutOfRows:
                # partial growth is impossible: stage allocators are symmetric
                r.state = RequestState.STALLED
                if record_timeline:
                    timeline.add(wall, "STALL", request=r.id, t=r.t_cur)
        if not active:
            stall_iters += 1
            victim = running.pop()
            for m in mems:
                m.release(victim.id)
            victim.state = RequestState.QUEUED
            victim.t_cur = 0
            queue.appendleft(victim)
            preempts += 1
            if record_timeline:
                timeline.add(wall, "PREEMPT", request=victim.id)
            continue
        # --- per-request per-layer costs (vectorized) ---------------------
        ts = np.array([r.t_cur for r in active], dtype=np.int64)
        us = -(-ts // geo0.tokens_per_row)
        pairs = pair_costs(us)
        sm_head = np.ceil(ts * epu_pe)
        if features.itpp:
            att = np.maximum(n_h_l * pairs, n_h_l * sm_head + pairs)
        else:
            # head-first: each pair is confined to one channel; per-request
            # contribution assuming round-robin pair placement in its micro
            att = pairs * (-(-n_h_l // n_ch)) + n_h_l * sm_head
        # bookkeeping for the end-of-run breakdown
        for u, cnt in zip(*np.unique(us, return_counts=True)):
            u_counts[int(u)] = u_counts.get(int(u), 0) + int(cnt)
        fc_layer_execs += len(active)
        softmax_epu_total += float(n_h_l * sm_head.sum())
        # --- micro-batch partition and stage times -----------------------
        if plan.micro_batch:
            b_mu = plan.micro_batch
        elif features.itpp:
            b_mu = 1
        else:
            # fill the channels with (request, head) pairs per §-style trade-off
            b_mu = max(1, n_ch // n_h_l)
        bounds = list(range(0, len(active), b_mu))
        n_micro = len(bounds)
        if features.itpp:
            per_micro_work = np.add.reduceat(att, bounds)
        else:
            # channel waves inside each micro-batch
            per_micro_work = np.empty(n_micro)
            for mi, lo in enumerate(bounds):
                mb_pairs = np.repeat(pairs[lo : lo + b_mu], n_h_l)
                loads = np.zeros(n_ch)
                np.add.at(loads, np.arange(len(mb_pairs)) % n_ch, mb_pairs)
                per_micro_work[mi] = loads.max() + n_h_l * sm_head[lo : lo + b_mu].sum()
        mb_sizes = np.diff(bounds + [len(active)])
        fc_vec = np.array([fc_layer_cost[s][0] for s in range(pp)])
        stage_times = [
            (
                program.stages[s].local_layers
                * (
                    per_micro_work
                    + fc_vec[s] * mb_sizes
                    + comm_layer_cost[s][0]
                    + comm_layer_cost[s][1] * mb_sizes
                )
            ).tolist()
            for s in range(pp)
        ]
        sync = float(timing.host_sync_cycles) if pp > 1 else 0.0
        comm_per_stage = [handoff[s] * b_mu for s in range(pp)]
        if record_timeline:
            makespan, spans = pipeline_schedule(stage_times, sync, comm_per_stage)
            for s in range(pp):
                for m, (t0, t1) in enumerate(spans[s]):
                    timeline.add(wall + t0, "STAGE_EXEC", stage=s, micro=m, end=wall + t1)
                if s < pp - 1 and pp > 1:
                    timeline.add(wall, "SYNC", stage=s, cycles=sync)
                    timeline.add(wall, "COMM", stage=s, cycles=comm_per_stage[s])
        else:
            makespan, _ = pipeline_schedule(stage_times, sync, comm_per_stage)
        wall += makespan
        # --- token accounting, completion, replacement --------------------
        total_tokens += len(active)
        att_macs = model.n_heads * 2 * model.head_dim * int(ts.sum())
        mac_ops += model.n_layers * (fc_macs_per_tok_layer * len(active) + att_macs)
        for r in active:
            if r.t_cur - r.input_len >= r.out_len:
                r.state = RequestState.DONE
                for m in mems:
                    m.release(r.id)
                if record_timeline:
                    timeline.add(wall, "RELEASE", request=r.id)
        running = [r for r in running if not r.done]

    # assemble the per-op latency breakdown from the run counters
    nl = model.n_layers
    for u, cnt in sorted(u_counts.items()):
        qkt, sv = costs.attention(0, u)
        _acc(breakdown, "QKT", qkt["breakdown"], cnt * n_h_l * nl)
        _acc(breakdown, "SV", sv["breakdown"], cnt * n_h_l * nl)
    if softmax_epu_total:
        _acc(breakdown, "SOFTMAX", {"EPU": softmax_epu_total * nl}, 1)
    for op, parts in fc_layer_cost[0][1].items():
        _acc(breakdown, op, parts, fc_layer_execs * nl)

    lanes = topo.total_modules * topo.banks_per_module * topo.mac_width
    util = 100.0 * mac_ops / (lanes * wall) if wall > 0 else 0.0
    report = SimReport(
        tokens_per_sec=total_tokens * timing.pim_clock_hz / wall if wall else 0.0,
        utilization_pct=util,
        avg_batch=batch_samples / iterations if iterations else 0.0,
        total_tokens=total_tokens,
        wall_cycles=wall,
        iterations=iterations,
        mac_lane_ops=mac_ops,
        total_lanes=lanes,
        latency_breakdown={k: dict(v) for k, v in breakdown.items()},
        features=features.to_dict(),
        plan={"tp": plan.tp, "pp": plan.pp, "micro_batch": plan.micro_batch},
        model=model.to_dict(),
        preempts=preempts,
        stall_iterations=stall_iters,
        budget={
            "cmd_buffer_bytes_used": max(st.stack_bytes() for st in program.stages),
            "cmd_buffer_bytes_limit": CMD_BUFFER_BYTES,
            "addr_map_entry_limit": ADDR_MAP_BYTES // ADDR_ENTRY_BYTES,
        },
    )
    return timeline, report


def _acc(agg: Dict[str, Dict[str, float]], op: str, parts: Dict[str, float], n: int):
    if n <= 0:
        return
    slot = agg.setdefault(op, {})
    for phase, c in parts.items():
        slot[phase] = slot.get(phase, 0.0) + c * n


def utilization(report: SimReport) -> float:
    """Busy MAC lanes over total lane-cycles, in percent."""
    if report.wall_cycles <= 0:
        return 0.0
    return 100.0 * report.mac_lane_ops / (report.total_lanes * report.wall_cycles)


# ---------------------------------------------------------------------------
# Parallelism sweep
# ---------------------------------------------------------------------------


def sweep(
    trace: Sequence[Request],
    model,
    topo: PimTopology,
    timing: TimingParams,
    grid: Sequence[Tuple[int, int]],
    features: Features = Features(),
) -> List[dict]:
    """One simulation per (tp, pp) candidate; the best feasible point is
    flagged and every point carries its average batch size."""
    rows: List[dict] = []
    for tp, pp in grid:
        plan = ParallelismPlan(tp=tp, pp=pp)
        reason = validate_plan(plan, model, topo)
        row = {"tp": tp, "pp": pp, "feasible": reason is None, "reason": reason}
        if reason is None:
            try:
                _, rep = simulate(
                    trace, plan, model, topo, timing, features, record_timeline=False
                )
                row.update(
                    tokens_per_sec=rep.tokens_per_sec,
                    avg_batch=rep.avg_batch,
                    utilization_pct=rep.utilization_pct,
                )
            except (SimError, CompileError) as e:
                row.update(feasible=False, reason=str(e))
        rows.append(row)
    feasible = [r for r in rows if r["feasible"]]
    if feasible:
        best = max(feasible, key=lambda r: r["tokens_per_sec"])
        for r in rows:
            r["best"] = r is best
    return rows


# ---------------------------------------------------------------------------
# Gantt rendering (debugging small timelines)
# ---------------------------------------------------------------------------


def render_gantt(timeline: EventTimeline, width: int = 72) -> str:
    execs = [e for e in timeline.events if e.kind == "STAGE_EXEC"]
    if not execs:
        return "(empty timeline)"
    t_max = max(e.payload["end"] for e in execs)
    if t_max <= 0:
        return "(empty timeline)"
    stages = sorted({e.payload["stage"] for e in execs})
    lines = []
    for s in stages:
        row = [" "] * width
        for e in execs:
            if e.payload["stage"] != s:
                continue
            lo = int(e.time / t_max * (width - 1))
            hi = max(lo + 1, int(e.payload["end"] / t_max * (width - 1)))
            mark = str(e.payload["micro"] % 10)
            for i in range(lo, min(hi, width)):
                row[i] = mark
        lines.append(f"stage {s} |{''.join(row)}|")
    lines.append(f"0{' ' * (width - len(str(int(t_max))) + 7)}{int(t_max)} cycles")
    return "\n".join(lines)
