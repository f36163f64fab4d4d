"""Functional and cycle-level model of one PIM module.

A module is a grid of channels x banks. Every bank pairs a DRAM array
(row-addressable, ``row_bytes`` per row) with a multiply-accumulate unit that
consumes ``mac_width`` lanes per cycle and accumulates into a per-bank
out-register. Channels share a small global buffer for the broadcast input
vector, all channels share one input broadcast path, and the controller hub
holds scratch GPR storage plus a vector unit for softmax / normalization /
elementwise work.

Two timing modes are modeled. Serial charges every command in order.
Double-buffered ("ping-pong") splits commands over a transfer engine (WR-INP,
RD-OUT) and a compute engine (DOT-PROD) with one spare buffer on each side,
so transfers hide under MACs or vice versa; functional results are identical
by construction. Per-command costs:

    WR-INP:    io_cmd_base + ceil(chunk_bytes / broadcast_bytes_per_cycle)
    DOT-PROD:  row_activate (on row switch) + ceil(segment / mac_width)
    RD-OUT:    io_cmd_base + ceil(scoped_banks * element_bytes / outdrain_bpc)

plus ``dispatch_cycles_per_cmd`` each. The closed-form ``analytic_cycles``
reproduces the serial walk for a pure GEMV and acts as the timing oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .isa import CommandStack, Field, Opcode, PimCommand


class DeviceError(ValueError):
    pass


@dataclass(frozen=True)
class PimTopology:
    """Hardware shape. Defaults follow the reference configuration."""

    nodes: int = 1
    modules_per_node: int = 8
    channels_per_module: int = 16
    banks_per_channel: int = 16
    row_bytes: int = 2048
    rows_per_bank: int = 16384
    mac_width: int = 16
    gb_bytes: int = 2048
    outreg_bytes_per_pu: int = 4  # a pair of 2-byte output registers
    gpr_bytes: int = 512 * 1024
    element_bytes: int = 2

    def __post_init__(self):
        for name in (
            "nodes",
            "modules_per_node",
            "channels_per_module",
            "banks_per_channel",
            "row_bytes",
            "rows_per_bank",
            "mac_width",
            "gb_bytes",
            "gpr_bytes",
            "element_bytes",
        ):
            if getattr(self, name) < 1:
                raise DeviceError(f"{name} must be positive")
        if self.gb_bytes < self.row_bytes:
            # WR-INP chunks are row-sized; a smaller buffer cannot hold one.
            raise DeviceError("gb_bytes must cover at least one DRAM row")

    @property
    def total_modules(self) -> int:
        return self.nodes * self.modules_per_node

    @property
    def banks_per_module(self) -> int:
        return self.channels_per_module * self.banks_per_channel

    @property
    def elements_per_row(self) -> int:
        return self.row_bytes // self.element_bytes

    @property
    def gb_elements(self) -> int:
        return self.gb_bytes // self.element_bytes

    @property
    def gpr_elements(self) -> int:
        return self.gpr_bytes // self.element_bytes

    @property
    def module_capacity_bytes(self) -> int:
        return self.banks_per_module * self.row_bytes * self.rows_per_bank

    def lanes_per_module(self) -> int:
        return self.banks_per_module * self.mac_width


@dataclass(frozen=True)
class TimingParams:
    """Per-command cycle costs. All rates are per PIM clock cycle."""

    pim_clock_hz: float = 1e9
    interface_bytes_per_cycle: float = 64.0  # host <-> module link (64 GB/s @ 1 GHz)
    broadcast_bytes_per_cycle: float = 16.0  # GPR -> per-channel GB shared path
    outdrain_bytes_per_cycle: float = 32.0  # out-registers -> GPR drain path
    io_cmd_base_cycles: int = 2
    row_activate_cycles: int = 20
    epu_cycles_per_element: float = 0.0625  # 16-lane hub vector unit
    dispatch_cycles_per_cmd: int = 1
    host_sync_cycles: int = 2000
    internode_bytes_per_sec: float = 1e10  # conservative multi-node link
    intranode_hop_cycles: int = 100  # per collective step within a node
    internode_hop_cycles: int = 400  # per collective step across nodes

    def __post_init__(self):
        for name in (
            "pim_clock_hz",
            "interface_bytes_per_cycle",
            "broadcast_bytes_per_cycle",
            "outdrain_bytes_per_cycle",
            "epu_cycles_per_element",
            "internode_bytes_per_sec",
        ):
            if getattr(self, name) <= 0:
                raise DeviceError(f"{name} must be > 0")
        for name in ("io_cmd_base_cycles", "row_activate_cycles", "dispatch_cycles_per_cmd", "host_sync_cycles"):
            if getattr(self, name) < 0:
                raise DeviceError(f"{name} must be >= 0")

    def mac_cycles_per_row(self, topo: PimTopology) -> int:
        return topo.elements_per_row // topo.mac_width

    def peak_flops_per_pu(self, topo: PimTopology) -> float:
        # one multiply + one add per lane per cycle
        return topo.mac_width * 2.0 * self.pim_clock_hz

    def internode_bytes_per_cycle(self) -> float:
        return self.internode_bytes_per_sec / self.pim_clock_hz


def transfer_cycles(nbytes: float, bytes_per_cycle: float) -> int:
    return int(math.ceil(nbytes / bytes_per_cycle)) if nbytes > 0 else 0


# ---------------------------------------------------------------------------
# Module state
# ---------------------------------------------------------------------------


class ModuleState:
    """Mutable storage of one module. Owned by a single execution context.

    DRAM rows are materialized lazily (zero until written) so large topologies
    stay cheap to model. With ``pingpong_enabled`` the buffer contents seen by
    compute are identical to serial mode; the alternating bit only matters for
    timing, which is resolved by the command scheduler.
    """

    def __init__(self, topo: PimTopology, pingpong_enabled: bool = False):
        self.topo = topo
        self.pingpong_enabled = pingpong_enabled
        self.pingpong_bit = 0
        E = topo.elements_per_row
        self.dram: Dict[Tuple[int, int], Dict[int, np.ndarray]] = {}
        self.gb: Dict[int, np.ndarray] = {}
        self.gb_len = 0
        self.gpr = np.zeros(topo.gpr_elements, dtype=np.float32)
        self.outreg: Dict[Tuple[int, int], float] = {}
        self.out_written: Dict[Tuple[int, int], bool] = {}
        self.last_row: Dict[Tuple[int, int], int] = {}

    # -- host-side DMA ------------------------------------------------------
    def host_write_gpr(self, offset: int, values: np.ndarray) -> None:
        end = offset + len(values)
        if end > self.topo.gpr_elements:
            raise DeviceError(f"GPR write [{offset}:{end}] beyond capacity")
        self.gpr[offset:end] = np.asarray(values, dtype=np.float32)

    def host_read_gpr(self, offset: int, n: int) -> np.ndarray:
        return self.gpr[offset : offset + n].copy()

    def host_write_row(
        self, channel: int, bank: int, row: int, start: int, values: np.ndarray
    ) -> None:
        topo = self.topo
        if not (0 <= channel < topo.channels_per_module):
            raise DeviceError(f"channel {channel} out of range")
        if not (0 <= bank < topo.banks_per_channel):
            raise DeviceError(f"bank {bank} out of range")
        if not (0 <= row < topo.rows_per_bank):
            raise DeviceError(f"row {row} out of range")
        if start + len(values) > topo.elements_per_row:
            raise DeviceError("row write beyond row boundary")
        bank_rows = self.dram.setdefault((channel, bank), {})
        buf = bank_rows.get(row)
        if buf is None:
            buf = np.zeros(topo.elements_per_row, dtype=np.float32)
            bank_rows[row] = buf
        buf[start : start + len(values)] = np.asarray(values, dtype=np.float32)

    def row_data(self, channel: int, bank: int, row: int) -> Optional[np.ndarray]:
        return self.dram.get((channel, bank), {}).get(row)

    def reset_io_state(self) -> None:
        self.gb.clear()
        self.gb_len = 0
        self.outreg.clear()
        self.out_written.clear()


def scope_channels(topo: PimTopology, scope_mask: int) -> List[int]:
    if scope_mask == 0:
        return list(range(topo.channels_per_module))
    return [c for c in range(topo.channels_per_module) if scope_mask & (1 << c)]


# ---------------------------------------------------------------------------
# Command scheduling (timing)
# ---------------------------------------------------------------------------

PHASE_DT_GB = "DT-GB"
PHASE_DT_OUT = "DT-Out"
PHASE_MAC = "MAC"
PHASE_EPU = "EPU"


@dataclass
class ExecResult:
    cycles: int
    breakdown: Dict[str, float]
    mac_lane_ops: int = 0
    outputs: Optional[np.ndarray] = None


def _command_costs(
    commands: Sequence[PimCommand],
    topo: PimTopology,
    timing: TimingParams,
    gb_chunk: int,
    n_scoped_banks: int,
) -> List[Tuple[str, int]]:
    """Per-command (phase, cycles) in program order. Shared by both modes."""
    costs: List[Tuple[str, int]] = []
    disp = timing.dispatch_cycles_per_cmd
    eb = topo.element_bytes
    gb_len = 0
    last_row: Optional[int] = None
    for cmd in commands:
        if cmd.opcode == Opcode.WR_INP:
            gb_len = gb_chunk
            c = (
                timing.io_cmd_base_cycles
                + transfer_cycles(gb_len * eb, timing.broadcast_bytes_per_cycle)
                + disp
            )
            costs.append((PHASE_DT_GB, c))
        elif cmd.opcode == Opcode.DOT_PROD:
            seg = gb_len if gb_len else topo.elements_per_row
            act = timing.row_activate_cycles if cmd.arg0 != last_row else 0
            last_row = cmd.arg0
            c = act + int(math.ceil(seg / topo.mac_width)) + disp
            costs.append((PHASE_MAC, c))
        else:  # RD_OUT
            c = (
                timing.io_cmd_base_cycles
                + transfer_cycles(n_scoped_banks * eb, timing.outdrain_bytes_per_cycle)
                + disp
            )
            costs.append((PHASE_DT_OUT, c))
    return costs


def _pingpong_schedule(costs: List[Tuple[str, int]]) -> int:
    """Makespan of a double-buffered run of the command stream.

    Constraints: a dot product needs the feeding input load done, the previous
    dot product done, and at most one outstanding drain (the out-register
    pair). A load may start once the buffer it overwrites (two loads back) is
    fully consumed; loads and drains each stay ordered within their class but
    a ready load may pass a stalled drain on the bus.
    """
    n = len(costs)
    wrs = [i for i, (p, _) in enumerate(costs) if p == PHASE_DT_GB]
    dps = [i for i, (p, _) in enumerate(costs) if p == PHASE_MAC]
    rds = [i for i, (p, _) in enumerate(costs) if p == PHASE_DT_OUT]
    # dependency lookup tables, all by program index
    wr_of = {}  # dp index -> feeding wr index
    last_wr = None
    for i, (p, _) in enumerate(costs):
        if p == PHASE_DT_GB:
            last_wr = i
        elif p == PHASE_MAC:
            wr_of[i] = last_wr
    dp_of = {}  # rd index -> drained dp index
    last_dp = None
    for i, (p, _) in enumerate(costs):
        if p == PHASE_MAC:
            last_dp = i
        elif p == PHASE_DT_OUT:
            dp_of[i] = last_dp
    consumers: Dict[int, List[int]] = {w: [] for w in wrs}
    for d, w in wr_of.items():
        if w is not None:
            consumers[w].append(d)
    # program-order drain count before each dot product, for the register gate
    rd_count_before: Dict[int, int] = {}
    seen_rds = 0
    for i, (p, _) in enumerate(costs):
        if p == PHASE_MAC:
            rd_count_before[i] = seen_rds
        elif p == PHASE_DT_OUT:
            seen_rds += 1
    finish: Dict[int, int] = {}
    nw = nd = nr = 0  # next unplaced index per class
    bus_free = 0
    comp_free = 0
    wall = 0
    placed = 0
    while placed < n:
        candidates = []
        if nd < len(dps):
            i = dps[nd]
            w = wr_of[i]
            deps_ok = w is None or w in finish
            rd_gate = 0
            gate_idx = rd_count_before[i] - 2
            if gate_idx >= 0:
                gate_rd = rds[gate_idx]
                if gate_rd in finish:
                    rd_gate = finish[gate_rd]
                else:
                    deps_ok = False
            if deps_ok:
                start = max(comp_free, finish.get(w, 0), rd_gate)
                candidates.append((start, i, "dp"))
        if nw < len(wrs):
            i = wrs[nw]
            deps_ok = True
            dep_t = bus_free
            if nw >= 2:
                prev2 = wrs[nw - 2]
                cons = consumers[prev2]
                if all(c in finish for c in cons):
                    if cons:
                        dep_t = max(dep_t, max(finish[c] for c in cons))
                else:
                    deps_ok = False
            if deps_ok:
                candidates.append((dep_t, i, "wr"))
        if nr < len(rds):
            i = rds[nr]
            d = dp_of[i]
            if d is None or d in finish:
                start = max(bus_free, finish.get(d, 0))
                candidates.append((start, i, "rd"))
        if not candidates:
            raise DeviceError("scheduling deadlock in command stream")
        start, i, kind = min(candidates, key=lambda c: (c[0], c[1]))
        end = start + costs[i][1]
        finish[i] = end
        if kind == "dp":
            comp_free = end
            nd += 1
        else:
            bus_free = end
            if kind == "wr":
                nw += 1
            else:
                nr += 1
        wall = max(wall, end)
        placed += 1
    return wall


def schedule_cycles(
    commands: Sequence[PimCommand],
    topo: PimTopology,
    timing: TimingParams,
    gb_chunk: int = 0,
    scope_mask: int = 0,
    pingpong: bool = False,
) -> ExecResult:
    """Cycle count and phase breakdown for a command stream, data-free.

    Serial mode sums costs in order. Ping-pong mode runs transfers and MACs on
    separate engines: a DOT-PROD needs its feeding WR-INP done and at most one
    outstanding drain; a WR-INP may run ahead by one buffer; an RD-OUT follows
    the DOT-PROD it drains. The breakdown always sums to the returned cycles,
    with hidden transfer (or compute) time removed proportionally.
    """
    if gb_chunk <= 0:
        gb_chunk = topo.gb_elements
    n_banks = len(scope_channels(topo, scope_mask)) * topo.banks_per_channel
    costs = _command_costs(commands, topo, timing, gb_chunk, n_banks)
    busy: Dict[str, int] = {PHASE_DT_GB: 0, PHASE_MAC: 0, PHASE_DT_OUT: 0}
    for phase, c in costs:
        busy[phase] += c
    serial_total = sum(busy.values())
    if not pingpong:
        return ExecResult(serial_total, {k: float(v) for k, v in busy.items()})

    # Dependency-driven list schedule over two engines (MAC unit, I/O bus).
    # The spare input buffer lets a WR-INP overtake drains that still wait on
    # their dot product; order is preserved within each command class.
    wall = _pingpong_schedule(costs)

    # Attribute the wall to phases: the dominant stream keeps its busy time,
    # the hidden stream shows only what is not overlapped.
    xfer_busy = busy[PHASE_DT_GB] + busy[PHASE_DT_OUT]
    mac_busy = busy[PHASE_MAC]
    breakdown: Dict[str, float]
    if mac_busy >= xfer_busy:
        visible_xfer = wall - mac_busy
        scale = visible_xfer / xfer_busy if xfer_busy else 0.0
        breakdown = {
            PHASE_MAC: float(mac_busy),
            PHASE_DT_GB: busy[PHASE_DT_GB] * scale,
            PHASE_DT_OUT: busy[PHASE_DT_OUT] * scale,
        }
    else:
        visible_mac = wall - xfer_busy
        breakdown = {
            PHASE_MAC: float(visible_mac),
            PHASE_DT_GB: float(busy[PHASE_DT_GB]),
            PHASE_DT_OUT: float(busy[PHASE_DT_OUT]),
        }
    return ExecResult(wall, breakdown)


# ---------------------------------------------------------------------------
# Functional execution
# ---------------------------------------------------------------------------


def execute(
    commands: Sequence[PimCommand],
    state: ModuleState,
    timing: TimingParams,
    gb_chunk: int = 0,
    scope_mask: int = 0,
    pingpong: Optional[bool] = None,
) -> ExecResult:
    """Run concrete commands against module state.

    DOT-PROD accumulates, for every scoped bank, the dot product of the
    addressed row segment with the buffered input; RD-OUT drains the scoped
    out-registers into GPR (one element per bank, channel-major order) and
    clears them; WR-INP broadcasts a GPR chunk into every scoped channel's
    buffer. Outputs land in ``state.gpr``; cycle accounting matches
    :func:`schedule_cycles` exactly.
    """
    topo = state.topo
    if pingpong is None:
        pingpong = state.pingpong_enabled
    if gb_chunk <= 0:
        gb_chunk = topo.gb_elements
    if gb_chunk > topo.gb_elements:
        raise DeviceError(f"gb_chunk {gb_chunk} exceeds buffer capacity")
    channels = scope_channels(topo, scope_mask)
    banks = [(c, b) for c in channels for b in range(topo.banks_per_channel)]
    mac_ops = 0
    for cmd in commands:
        if cmd.opcode == Opcode.WR_INP:
            start = cmd.arg0
            if start + gb_chunk > topo.gpr_elements:
                raise DeviceError(f"WR-INP source [{start}:{start + gb_chunk}] beyond GPR")
            chunk = state.gpr[start : start + gb_chunk]
            for c in channels:
                state.gb[c] = chunk.copy()
            state.gb_len = gb_chunk
            if state.pingpong_enabled:
                state.pingpong_bit ^= 1
        elif cmd.opcode == Opcode.DOT_PROD:
            row, col = cmd.arg0, cmd.arg1
            if row >= topo.rows_per_bank:
                raise DeviceError(f"DOT-PROD row {row} out of range")
            seg_len = state.gb_len or topo.elements_per_row
            if col + seg_len > topo.elements_per_row:
                raise DeviceError(f"DOT-PROD segment [{col}:{col + seg_len}] beyond row")
            if state.gb_len == 0:
                raise DeviceError("DOT-PROD before any WR-INP")
            for c, b in banks:
                data = state.row_data(c, b, row)
                if data is None:
                    acc = 0.0
                else:
                    seg = data[col : col + seg_len].astype(np.float64)
                    acc = float(seg @ state.gb[c].astype(np.float64))
                state.outreg[(c, b)] = state.outreg.get((c, b), 0.0) + acc
                state.out_written[(c, b)] = True
                state.last_row[(c, b)] = row
            mac_ops += seg_len * len(banks)
        else:  # RD_OUT
            base = cmd.arg0
            if base + len(banks) > topo.gpr_elements:
                raise DeviceError(f"RD-OUT target [{base}:{base + len(banks)}] beyond GPR")
            for i, (c, b) in enumerate(banks):
                if not state.out_written.get((c, b)):
                    raise DeviceError(
                        f"RD-OUT of never-written out-register (channel {c}, bank {b})"
                    )
                state.gpr[base + i] = np.float32(state.outreg[(c, b)])
                state.outreg[(c, b)] = 0.0
                state.out_written[(c, b)] = False
    result = schedule_cycles(commands, topo, timing, gb_chunk, scope_mask, pingpong)
    result.mac_lane_ops = mac_ops
    if not np.all(np.isfinite(state.gpr)):
        raise DeviceError("non-finite value in GPR after execution")
    return result


# ---------------------------------------------------------------------------
# Hub vector unit
# ---------------------------------------------------------------------------

EPU_KINDS = ("SOFTMAX", "LAYERNORM", "EWADD", "EWMUL", "ACT_RELU", "ACT_SWIGLU")


def epu_apply(
    kind: str,
    vectors: Sequence[np.ndarray],
    timing: TimingParams,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, int]:
    """Exact float math for the hub vector unit; returns (result, cycles)."""
    if kind not in EPU_KINDS:
        raise DeviceError(f"unknown vector op {kind!r}")
    vs = [np.asarray(v, dtype=np.float32) for v in vectors]
    if kind in ("EWADD", "EWMUL", "ACT_SWIGLU"):
        if len(vs) != 2 or vs[0].shape != vs[1].shape:
            raise DeviceError(f"{kind} needs two equal-length vectors")
    elif len(vs) != 1:
        raise DeviceError(f"{kind} takes one vector")
    x = vs[0].astype(np.float64)
    if kind == "SOFTMAX":
        shifted = x - x.max()
        e = np.exp(shifted)
        out = e / e.sum()
    elif kind == "LAYERNORM":
        mu = x.mean()
        var = x.var()
        out = (x - mu) / np.sqrt(var + eps)
    elif kind == "EWADD":
        out = x + vs[1].astype(np.float64)
    elif kind == "EWMUL":
        out = x * vs[1].astype(np.float64)
    elif kind == "ACT_RELU":
        out = np.maximum(x, 0.0)
    else:  # ACT_SWIGLU: up * gate * sigmoid(gate)
        g = vs[1].astype(np.float64)
        out = x * g / (1.0 + np.exp(-g))
    cycles = int(math.ceil(len(x) * timing.epu_cycles_per_element))
    return out.astype(np.float32), cycles


def epu_cycles(n_elements: int, timing: TimingParams) -> int:
    return int(math.ceil(n_elements * timing.epu_cycles_per_element))


# ---------------------------------------------------------------------------
# Analytic GEMV timing oracle
# ---------------------------------------------------------------------------


def analytic_cycles(
    rows: int,
    cols: int,
    topo: PimTopology,
    timing: TimingParams,
    pingpong: bool = False,
) -> int:
    """Closed-form cycles for a dense rows x cols GEMV on one module.

    Assumes the canonical mapping: output rows striped over all banks, the
    input streamed in row-sized chunks, one partial drain per (chunk, local
    row). Serial mode is exact against the command walk; ping-pong mode is the
    two-stream bound plus pipeline edges.
    """
    if rows < 1 or cols < 1:
        raise DeviceError("GEMV shape must be positive")
    E = topo.elements_per_row
    G = topo.banks_per_module
    eb = topo.element_bytes
    disp = timing.dispatch_cycles_per_cmd
    chunks = -(-cols // E)
    rpb = -(-rows // G)
    wr = timing.io_cmd_base_cycles + transfer_cycles(E * eb, timing.broadcast_bytes_per_cycle) + disp
    dp = timing.row_activate_cycles + E // topo.mac_width + disp
    rd = timing.io_cmd_base_cycles + transfer_cycles(G * eb, timing.outdrain_bytes_per_cycle) + disp
    dt_gb = chunks * wr
    mac = chunks * rpb * dp
    dt_out = chunks * rpb * rd
    if not pingpong:
        return dt_gb + mac + dt_out
    xfer = dt_gb + dt_out
    return max(mac + wr + rd, xfer + dp)
