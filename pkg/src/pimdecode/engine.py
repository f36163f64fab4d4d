"""Functional decode runtime: compiled stacks driven end to end.

The engine owns one module state per (stage, tensor-parallel rank), loads
weight packs into DRAM behind the virtual weight tables, manages cache
allocation through the row allocator, and per decode step walks every layer:
hub normalization, the fused QKV stack, cache append, per-head score stack,
hub-gathered softmax, per-head context stack, projection and FFN stacks with
partial-sum reduction across ranks, residuals. All data movement runs through
the dispatcher expansion and the device interpreter, so the result is the
product of the same command streams the hardware would see.

Timing collected here covers device command streams and hub vector work; the
pipeline-level costs (stage handoffs, synchronization, inter-node transfers)
belong to the scheduler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .compiler import (
    CompiledProgram,
    CompiledStage,
    FcOp,
    kv_space,
    weight_space,
    weight_table_entries,
)
from .device import (
    ExecResult,
    ModuleState,
    PimTopology,
    TimingParams,
    epu_apply,
    epu_cycles,
    execute,
)
from .dispatcher import ConfigBuffer, Va2PaTable, expand, update_config
from .isa import CommandStack, OpKind
from .memmgr import AllocatorState, GroupKey, GroupSpec, Policy
from .partition import Strategy


class EngineError(RuntimeError):
    pass


@dataclass
class EngineModule:
    stage: int
    rank: int
    state: ModuleState
    table: Va2PaTable
    channel_of_stream: Dict[int, int] = field(default_factory=dict)  # space -> channel


class DecodeEngine:
    def __init__(
        self,
        program: CompiledProgram,
        timing: TimingParams,
        weights: Sequence[Dict[str, np.ndarray]],
        pingpong: bool = False,
        lazy_alloc: bool = True,
    ):
        self.program = program
        self.timing = timing
        self.pingpong = pingpong
        self.model = program.model
        topo = program.topo
        self.topo = topo
        self.modules: List[List[EngineModule]] = []
        self.cfgs: List[ConfigBuffer] = []
        self.allocs: List[AllocatorState] = []
        self.t_of: Dict[int, int] = {}
        self.phase_cycles: Dict[Tuple[str, str], float] = {}
        self._expand_cache: Dict[tuple, list] = {}
        self._gather_cache: Dict[int, np.ndarray] = {}
        for st in program.stages:
            row = []
            for rank in range(program.tp):
                state = ModuleState(topo, pingpong_enabled=pingpong)
                table = Va2PaTable()
                for space, pas in weight_table_entries(st):
                    table.extend(space, pas)
                row.append(EngineModule(st.stage, rank, state, table))
            self.modules.append(row)
            self.cfgs.append(ConfigBuffer(total_layers=self.model.n_layers))
            self.allocs.append(self._make_allocator(st, lazy_alloc))
        self._load_weights(weights)

    # ------------------------------------------------------------------
    # setup
    # ------------------------------------------------------------------
    def _make_allocator(self, st: CompiledStage, lazy: bool) -> AllocatorState:
        topo = self.topo
        if self.program.strategy is Strategy.TOKEN_PARALLEL:
            groups = [
                GroupSpec(
                    GroupKey(st.stage, 0),
                    0,
                    topo.channels_per_module,
                    0,
                    topo.banks_per_channel,
                    topo.rows_per_bank,
                )
            ]
        else:
            groups = [
                GroupSpec(
                    GroupKey(st.stage, ch),
                    ch,
                    ch + 1,
                    0,
                    topo.banks_per_channel,
                    topo.rows_per_bank,
                )
                for ch in range(topo.channels_per_module)
            ]
        return AllocatorState(
            groups,
            policy=Policy.LAZY if lazy else Policy.STATIC_MAX,
            tokens_per_row=st.geo.tokens_per_row,
            max_ctl=self.model.max_ctl,
            rows_per_unit=st.geo.rows_per_unit,
            reserved_rows=st.weight_rows,
        )

    def _shard_matrix(self, layer: int, op: FcOp, rank: int) -> np.ndarray:
        m = self.model
        w = self.weights[layer]
        tp = self.program.tp
        n_h_l = m.n_heads // tp
        n_kv_l = m.n_kv_heads // tp
        dh = m.head_dim
        ffn_s = -(-m.ffn // tp)
        if op is FcOp.QKV_GEN:
            q = w["wq"].reshape(m.n_heads, dh, m.d_model)[rank * n_h_l : (rank + 1) * n_h_l]
            k = w["wk"].reshape(m.n_kv_heads, dh, m.d_model)[
                rank * n_kv_l : (rank + 1) * n_kv_l
            ]
            v = w["wv"].reshape(m.n_kv_heads, dh, m.d_model)[
                rank * n_kv_l : (rank + 1) * n_kv_l
            ]
            return np.concatenate(
                [q.reshape(-1, m.d_model), k.reshape(-1, m.d_model), v.reshape(-1, m.d_model)]
            )
        if op is FcOp.PROJ:
            cols = w["wproj"].reshape(m.d_model, m.n_heads, dh)
            return cols[:, rank * n_h_l : (rank + 1) * n_h_l].reshape(m.d_model, -1)
        if op is FcOp.FFN1:
            lo, hi = rank * ffn_s, min((rank + 1) * ffn_s, m.ffn)
            up = np.zeros((ffn_s, m.d_model), dtype=np.float32)
            up[: hi - lo] = w["w1"][lo:hi]
            if m.ffn_variant != "swiglu":
                return up
            gate = np.zeros((ffn_s, m.d_model), dtype=np.float32)
            gate[: hi - lo] = w["wg"][lo:hi]
            return np.concatenate([up, gate])
        # FFN2
        lo, hi = rank * ffn_s, min((rank + 1) * ffn_s, m.ffn)
        cols = np.zeros((m.d_model, ffn_s), dtype=np.float32)
        cols[:, : hi - lo] = w["w2"][:, lo:hi]
        return cols

    def _load_weights(self, weights) -> None:
        self.weights = weights
        topo = self.topo
        G = topo.banks_per_module
        E = topo.elements_per_row
        nb = topo.banks_per_channel
        for st, row in zip(self.program.stages, self.modules):
            for rank, mod in enumerate(row):
                for (layer, op), shape in st.fc_shapes.items():
                    w_s = self._shard_matrix(layer, op, rank)
                    padded = np.zeros(
                        (shape.rows_per_bank * G, shape.chunks * E), dtype=np.float32
                    )
                    padded[: w_s.shape[0], : w_s.shape[1]] = w_s
                    for lo in range(shape.rows_per_bank):
                        for beta in range(G):
                            o = lo * G + beta
                            ch, b = beta // nb, beta % nb
                            for c in range(shape.chunks):
                                seg = padded[o, c * E : (c + 1) * E]
                                if np.any(seg):
                                    mod.state.host_write_row(
                                        ch,
                                        b,
                                        shape.row_start + lo * shape.chunks + c,
                                        0,
                                        seg,
                                    )

    # ------------------------------------------------------------------
    # request lifecycle
    # ------------------------------------------------------------------
    def admit(
        self, request_id: int, k_prefill: np.ndarray, v_prefill: np.ndarray
    ) -> None:
        """Allocate cache for a prefilled request and install its contents.

        Prefill arrays are (n_layers, n_kv_heads, input_len, head_dim).
        """
        input_len = k_prefill.shape[2]
        tp = self.program.tp
        for st, alloc, cfg, row in zip(
            self.program.stages, self.allocs, self.cfgs, self.modules
        ):
            units = alloc.units_for(
                alloc.max_ctl if alloc.policy is Policy.STATIC_MAX else input_len
            )
            demand = units * alloc.rows_per_unit
            projected = {k: f.free_rows for k, f in alloc.free.items()}
            streams = []
            for h in range(st.n_kv_local):
                space = kv_space(request_id, h, st.n_kv_local)
                if self.program.strategy is Strategy.TOKEN_PARALLEL:
                    group = GroupKey(st.stage, 0)
                else:
                    group = max(projected, key=projected.get)
                    projected[group] -= demand
                streams.append((space, group))
            chunks = alloc.admit(request_id, input_len, streams)
            if chunks is None:
                raise EngineError(f"request {request_id} rejected: no capacity")
            ra = alloc.live[request_id]
            for s in ra.streams:
                for mod in row:
                    mod.channel_of_stream[s.space] = (
                        s.group.group_id
                        if self.program.strategy is Strategy.HEAD_FIRST
                        else -1
                    )
                    for chunk in s.chunks:
                        mod.table.append(s.space, chunk.row_start)
            cfg.add_request(request_id, input_len)
            for rank, mod in enumerate(row):
                for h in range(st.n_kv_local):
                    g = rank * st.n_kv_local + h
                    for layer in range(st.layer_lo, st.layer_hi):
                        for tau in range(input_len):
                            self._write_kv_token(
                                st,
                                mod,
                                kv_space(request_id, h, st.n_kv_local),
                                layer,
                                tau,
                                k_prefill[layer, g, tau],
                                v_prefill[layer, g, tau],
                            )
        self.t_of[request_id] = input_len

    def release(self, request_id: int) -> None:
        for st, alloc, cfg, row in zip(
            self.program.stages, self.allocs, self.cfgs, self.modules
        ):
            spaces = alloc.stream_spaces(request_id)
            alloc.release(request_id)
            for mod in row:
                for space in spaces:
                    mod.table.drop_space(space)
                    mod.channel_of_stream.pop(space, None)
            del cfg.slots[request_id]
        del self.t_of[request_id]
        self._expand_cache = {
            k: v for k, v in self._expand_cache.items() if k[0] != request_id
        }

    # ------------------------------------------------------------------
    # cache writes
    # ------------------------------------------------------------------
    def _stream_banks(self, st: CompiledStage, mod: EngineModule, space: int):
        """(channel, bank) for a group ordinal under the stream's scope."""
        nb = self.topo.banks_per_channel
        ch_fixed = mod.channel_of_stream.get(space, -1)

        def locate(beta: int) -> Tuple[int, int]:
            if ch_fixed < 0:
                return beta // nb, beta % nb
            return ch_fixed, beta

        return locate

    def _write_kv_token(
        self,
        st: CompiledStage,
        mod: EngineModule,
        space: int,
        layer: int,
        tau: int,
        k_vec: np.ndarray,
        v_vec: np.ndarray,
    ) -> None:
        geo = st.geo
        E = self.topo.elements_per_row
        ll = layer - st.layer_lo
        r = tau // geo.tokens_per_row
        base = mod.table.lookup(space, r)
        locate = self._stream_banks(st, mod, space)
        rem = tau % geo.tokens_per_row
        beta, slot = divmod(rem, geo.tokens_per_bank_row)
        ch, b = locate(beta)
        mod.state.host_write_row(
            ch, b, base + geo.k_offset(ll), slot * geo.d_h, k_vec
        )
        if geo.v_cols_per_bank == 1:
            sub, pos = divmod(rem, E)
            v_row = base + geo.v_offset(ll, sub)
            for j in range(geo.d_h):
                ch, b = locate(geo.v_bank(j))
                mod.state.host_write_row(ch, b, v_row, pos, v_vec[j : j + 1])
        else:
            v_row = base + geo.v_offset(ll, 0)
            for j in range(geo.d_h):
                ch, b = locate(geo.v_bank(j))
                pos = geo.v_slot(j) * geo.tokens_per_row + rem
                mod.state.host_write_row(ch, b, v_row, pos, v_vec[j : j + 1])

    # ------------------------------------------------------------------
    # decode step
    # ------------------------------------------------------------------
    def step(self, inputs: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
        outputs: Dict[int, np.ndarray] = {}
        for rid in inputs:
            self._grow(rid)
        for rid, x in inputs.items():
            cur = np.asarray(x, dtype=np.float32)
            for st_idx in range(self.program.pp):
                cur = self._run_stage(st_idx, rid, cur)
            outputs[rid] = cur
        return outputs

    def _grow(self, rid: int) -> None:
        new_t = self.t_of[rid] + 1
        for st, alloc, cfg, row in zip(
            self.program.stages, self.allocs, self.cfgs, self.modules
        ):
            if alloc.policy is Policy.LAZY:
                ra = alloc.live[rid]
                before = {s.space: len(s.chunks) for s in ra.streams}
                alloc.grow(rid, new_t)
                for s in ra.streams:
                    for chunk in s.chunks[before[s.space] :]:
                        for mod in row:
                            mod.table.append(s.space, chunk.row_start)
            else:
                alloc.live[rid].t_cur = new_t
            update_config(cfg, rid, new_t)
        self.t_of[rid] = new_t

    def _charge(self, op: str, result: ExecResult) -> None:
        for phase, cyc in result.breakdown.items():
            key = (op, phase)
            self.phase_cycles[key] = self.phase_cycles.get(key, 0.0) + cyc

    def _charge_epu(self, op: str, n_elements: int) -> int:
        cyc = epu_cycles(n_elements, self.timing)
        key = (op, "EPU")
        self.phase_cycles[key] = self.phase_cycles.get(key, 0.0) + cyc
        return cyc

    def _run_fc(
        self,
        st: CompiledStage,
        mod: EngineModule,
        cfg: ConfigBuffer,
        layer: int,
        op: FcOp,
        opkind: OpKind,
        x_in: np.ndarray,
    ) -> np.ndarray:
        """One FC stack on one module: stage input, execute, hub-reduce."""
        topo = self.topo
        E = topo.elements_per_row
        G = topo.banks_per_module
        shape = st.fc_shapes[(layer, op)]
        padded = np.zeros(shape.chunks * E, dtype=np.float32)
        padded[: len(x_in)] = x_in
        mod.state.host_write_gpr(st.gpr.gemv_in, padded)
        key = ("fc", st.stage, layer, op)
        cmds = self._expand_cache.get(key)
        if cmds is None:
            cmds = expand(st.stacks[(layer, opkind)], cfg, mod.table)
            self._expand_cache[key] = cmds
        res = execute(
            cmds,
            mod.state,
            self.timing,
            gb_chunk=E,
            pingpong=self.pingpong,
        )
        self._charge(opkind.name, res)
        raw = mod.state.host_read_gpr(
            st.gpr.fc_out, shape.chunks * shape.rows_per_bank * G
        )
        out = raw.reshape(shape.chunks, shape.rows_per_bank * G).astype(np.float64)
        reduced = out.sum(axis=0).astype(np.float32)[: shape.d_out_s]
        if shape.chunks > 1:
            self._charge_epu(opkind.name, (shape.chunks - 1) * shape.d_out_s)
        return reduced

    def _gather_index(self, geo, units: int) -> np.ndarray:
        key = (geo.tokens_per_row, geo.tokens_per_bank_row, geo.group_banks, units)
        idx = self._gather_cache.get(key)
        if idx is None:
            tpr, S, G = geo.tokens_per_row, geo.tokens_per_bank_row, geo.group_banks
            tau = np.arange(units * tpr)
            r, rem = np.divmod(tau, tpr)
            beta, s = np.divmod(rem, S)
            idx = r * tpr + s * G + beta
            self._gather_cache[key] = idx
        return idx

    def _run_attention_head(
        self,
        st: CompiledStage,
        mod: EngineModule,
        cfg: ConfigBuffer,
        rid: int,
        layer: int,
        q_head: int,
        q_vec: np.ndarray,
        t_cur: int,
    ) -> np.ndarray:
        geo = st.geo
        topo = self.topo
        G = geo.group_banks
        group = self.model.n_heads // self.model.n_kv_heads
        h_local = q_head // group
        space = kv_space(rid, h_local, st.n_kv_local)
        scope = 0
        ch_fixed = mod.channel_of_stream.get(space, -1)
        if ch_fixed >= 0:
            scope = 1 << ch_fixed
        units = st.geo.units_for(t_cur)
        mod.state.host_write_gpr(st.gpr.q, q_vec)
        key = (rid, "qkt", st.stage, layer, space, units)
        cmds = self._expand_cache.get(key)
        if cmds is None:
            cmds = expand(
                st.stacks[(layer, OpKind.QKT)], cfg, mod.table, request_id=rid, space=space
            )
            self._expand_cache[key] = cmds
        res = execute(
            cmds,
            mod.state,
            self.timing,
            gb_chunk=geo.d_h,
            scope_mask=scope,
            pingpong=self.pingpong,
        )
        self._charge("QKT", res)
        raw = mod.state.host_read_gpr(st.gpr.scores, units * geo.tokens_per_row)
        scores = raw[self._gather_index(geo, units)][:t_cur]
        scaled = scores / np.float32(math.sqrt(self.model.head_dim))
        probs, cyc = epu_apply("SOFTMAX", [scaled], self.timing)
        self.phase_cycles[("SOFTMAX", "EPU")] = (
            self.phase_cycles.get(("SOFTMAX", "EPU"), 0.0) + cyc
        )
        padded = np.zeros(units * geo.tokens_per_row, dtype=np.float32)
        padded[:t_cur] = probs
        mod.state.host_write_gpr(st.gpr.probs, padded)
        key = (rid, "sv", st.stage, layer, space, units)
        cmds = self._expand_cache.get(key)
        if cmds is None:
            cmds = expand(
                st.stacks[(layer, OpKind.SV)], cfg, mod.table, request_id=rid, space=space
            )
            self._expand_cache[key] = cmds
        res = execute(
            cmds,
            mod.state,
            self.timing,
            gb_chunk=st.stacks[(layer, OpKind.SV)].meta.gb_chunk,
            scope_mask=scope,
            pingpong=self.pingpong,
        )
        self._charge("SV", res)
        c = geo.v_cols_per_bank
        if c == 1:
            raw = mod.state.host_read_gpr(st.gpr.attn_out, G)
            return raw[: geo.d_h].copy()
        raw = mod.state.host_read_gpr(st.gpr.attn_out, units * c * G)
        parts = raw.reshape(units, c * G).astype(np.float64).sum(axis=0)
        self._charge_epu("SV", (units - 1) * geo.d_h if units > 1 else 0)
        ctx = np.empty(geo.d_h, dtype=np.float32)
        for j in range(geo.d_h):
            ctx[j] = parts[geo.v_slot(j) * G + geo.v_bank(j)]
        return ctx

    def _run_stage(self, st_idx: int, rid: int, x: np.ndarray) -> np.ndarray:
        st = self.program.stages[st_idx]
        cfg = self.cfgs[st_idx]
        row = self.modules[st_idx]
        m = self.model
        tp = self.program.tp
        t_cur = self.t_of[rid]
        dh = m.head_dim
        n_h_l, n_kv_l = st.n_h_local, st.n_kv_local
        for layer in range(st.layer_lo, st.layer_hi):
            h1, cyc = epu_apply("LAYERNORM", [x], self.timing)
            self.phase_cycles[("NORM", "EPU")] = (
                self.phase_cycles.get(("NORM", "EPU"), 0.0) + cyc
            )
            # QKV generation + cache append on every rank
            ctx_parts: List[np.ndarray] = []
            attn_partials: List[np.ndarray] = []
            for rank, mod in enumerate(row):
                qkv = self._run_fc(st, mod, cfg, layer, FcOp.QKV_GEN, OpKind.QKV_GEN, h1)
                q_l = qkv[: n_h_l * dh].reshape(n_h_l, dh)
                k_l = qkv[n_h_l * dh : (n_h_l + n_kv_l) * dh].reshape(n_kv_l, dh)
                v_l = qkv[(n_h_l + n_kv_l) * dh :].reshape(n_kv_l, dh)
                for h in range(n_kv_l):
                    self._write_kv_token(
                        st,
                        mod,
                        kv_space(rid, h, n_kv_l),
                        layer,
                        t_cur - 1,
                        k_l[h],
                        v_l[h],
                    )
                ctx_local = np.empty(n_h_l * dh, dtype=np.float32)
                for i in range(n_h_l):
                    ctx_local[i * dh : (i + 1) * dh] = self._run_attention_head(
                        st, mod, cfg, rid, layer, i, q_l[i], t_cur
                    )
                ctx_parts.append(ctx_local)
                attn_partials.append(
                    self._run_fc(st, mod, cfg, layer, FcOp.PROJ, OpKind.PROJ, ctx_local)
                )
            attn = np.sum([p.astype(np.float64) for p in attn_partials], axis=0).astype(
                np.float32
            )
            if tp > 1:
                self._charge_epu("PROJ", (tp - 1) * m.d_model)
            x, cyc = epu_apply("EWADD", [x, attn], self.timing)
            self.phase_cycles[("RESIDUAL", "EPU")] = (
                self.phase_cycles.get(("RESIDUAL", "EPU"), 0.0) + cyc
            )
            h2, cyc = epu_apply("LAYERNORM", [x], self.timing)
            self.phase_cycles[("NORM", "EPU")] = (
                self.phase_cycles.get(("NORM", "EPU"), 0.0) + cyc
            )
            ffn_partials: List[np.ndarray] = []
            ffn_s = -(-m.ffn // tp)
            for rank, mod in enumerate(row):
                up_out = self._run_fc(st, mod, cfg, layer, FcOp.FFN1, OpKind.FFN1, h2)
                if m.ffn_variant == "swiglu":
                    f, cyc = epu_apply(
                        "ACT_SWIGLU", [up_out[:ffn_s], up_out[ffn_s:]], self.timing
                    )
                else:
                    f, cyc = epu_apply("ACT_RELU", [up_out], self.timing)
                self.phase_cycles[("ACT", "EPU")] = (
                    self.phase_cycles.get(("ACT", "EPU"), 0.0) + cyc
                )
                ffn_partials.append(
                    self._run_fc(st, mod, cfg, layer, FcOp.FFN2, OpKind.FFN2, f)
                )
            down = np.sum(
                [p.astype(np.float64) for p in ffn_partials], axis=0
            ).astype(np.float32)
            if tp > 1:
                self._charge_epu("FFN2", (tp - 1) * m.d_model)
            x, cyc = epu_apply("EWADD", [x, down], self.timing)
            self.phase_cycles[("RESIDUAL", "EPU")] = (
                self.phase_cycles.get(("RESIDUAL", "EPU"), 0.0) + cyc
            )
        return x
