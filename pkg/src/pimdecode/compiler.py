"""Lowers a decoder layer graph into per-module command stacks.

Three passes, mirroring the shape of a small graph compiler:

1. pattern matching -- classify graph nodes into the decode roles (QKV
   generation, score/context matmuls, softmax, projection, the two FFN
   matmuls, activation), detecting grouped-query attention from mismatched
   query vs key/value widths and the gated FFN variant from its two-branch
   shape;
2. execution-table construction -- one entry per op carrying the partition
   direction, the communication strategy and the pipeline stage; and
3. loop-based command generation -- per (stage, layer, op) one stack.
   Attention stacks are dynamic: a token-scaled loop walks the cache row
   units, with row operands resolved at dispatch via the per-request address
   table. FC stacks are concrete except for the weight-table indirection
   (weights are static but virtually addressed, so the same image survives
   relocation); their loops run over the per-bank output rows.

``codegen_static`` emits the equivalent fully-unrolled physical-address
stacks for a fixed token count. It exists for two reasons: it is the oracle
for expansion equivalence, and comparing its size against the dynamic image
demonstrates why the compact encoding is required at long context.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .device import PimTopology
from .dispatcher import ADDR_ENTRY_BYTES, Va2PaTable
from .isa import (
    CommandStack,
    DynLoop,
    DynModi,
    Field,
    OpKind,
    PimCommand,
    StackMeta,
    dot_prod,
    make_stack,
    rd_out,
    serialized_size,
    wr_inp,
)
from .partition import (
    AttnOp,
    FcOp,
    Geometry,
    LayerShape,
    PartitionError,
    Strategy,
    attention_geometry,
    partition_fc,
)


class CompileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    name: str
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_variant: str = "swiglu"  # "relu_mlp" | "swiglu"
    ffn_dim: int = 0  # 0 = 4 * d_model
    max_ctl: int = 32768

    def __post_init__(self):
        if self.ffn_variant not in ("relu_mlp", "swiglu"):
            raise CompileError(f"unknown ffn_variant {self.ffn_variant!r}")
        if self.n_heads % self.n_kv_heads:
            raise CompileError("n_heads must be a multiple of n_kv_heads")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def gqa(self) -> bool:
        return self.n_kv_heads < self.n_heads

    def qkv_out(self) -> int:
        return (self.n_heads + 2 * self.n_kv_heads) * self.head_dim

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "ffn_variant": self.ffn_variant,
            "ffn_dim": self.ffn,
            "max_ctl": self.max_ctl,
        }


PRESETS: Dict[str, ModelConfig] = {
    "1.8b": ModelConfig("1.8b", 24, 16, 16, 64),
    "7b": ModelConfig("7b", 32, 32, 32, 128),
    "7b-relu": ModelConfig("7b-relu", 32, 32, 32, 128, ffn_variant="relu_mlp"),
    "7b-gqa": ModelConfig("7b-gqa", 32, 32, 8, 128),
    "14b": ModelConfig("14b", 40, 40, 40, 128),
    "14b-gqa": ModelConfig("14b-gqa", 40, 40, 8, 128),
    "72b": ModelConfig("72b", 80, 64, 64, 128),
    "72b-gqa": ModelConfig("72b-gqa", 80, 64, 8, 128),
    "toy": ModelConfig("toy", 2, 4, 2, 8, max_ctl=1024),
}


def model_config(spec) -> ModelConfig:
    if isinstance(spec, ModelConfig):
        return spec
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise CompileError(f"unknown model preset {spec!r}")
        return PRESETS[spec]
    d = dict(spec)
    d.pop("d_model", None)
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Decoder graph and pattern matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphNode:
    id: str
    kind: str  # matmul | batch_matmul | softmax | layernorm | add | mul | silu | relu | concat
    inputs: Tuple[str, ...] = ()
    d_in: int = 0
    d_out: int = 0


@dataclass
class DecoderGraph:
    """One decoder layer as an abstract dataflow; layers are identical."""

    nodes: List[GraphNode]
    n_layers: int = 1

    def node(self, nid: str) -> GraphNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise CompileError(f"no node {nid!r}")

    def consumers(self, nid: str) -> List[GraphNode]:
        return [n for n in self.nodes if nid in n.inputs]

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise CompileError("duplicate node ids")
        known = set(ids) | {"x"}
        order: set = {"x"}
        for n in self.nodes:
            for i in n.inputs:
                if i not in known:
                    raise CompileError(f"node {n.id}: unknown input {i!r}")
                if i not in order:
                    raise CompileError(f"node {n.id}: graph is not topologically ordered")
            order.add(n.id)

    @staticmethod
    def from_json(text: str) -> "DecoderGraph":
        d = json.loads(text)
        nodes = [
            GraphNode(
                id=n["id"],
                kind=n["kind"],
                inputs=tuple(n.get("inputs", ())),
                d_in=n.get("d_in", 0),
                d_out=n.get("d_out", 0),
            )
            for n in d["nodes"]
        ]
        return DecoderGraph(nodes=nodes, n_layers=d.get("n_layers", 1))

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_layers": self.n_layers,
                "nodes": [
                    {
                        "id": n.id,
                        "kind": n.kind,
                        "inputs": list(n.inputs),
                        "d_in": n.d_in,
                        "d_out": n.d_out,
                    }
                    for n in self.nodes
                ],
            },
            indent=2,
        )


def graph_from_model(model: ModelConfig) -> DecoderGraph:
    """Canonical pre-norm decoder layer for a model configuration."""
    d = model.d_model
    dkv = model.n_kv_heads * model.head_dim
    nodes = [
        GraphNode("ln1", "layernorm", ("x",), d, d),
        GraphNode("q", "matmul", ("ln1",), d, d),
        GraphNode("k", "matmul", ("ln1",), d, dkv),
        GraphNode("v", "matmul", ("ln1",), d, dkv),
        GraphNode("scores", "batch_matmul", ("q", "k"), model.head_dim, 0),
        GraphNode("sm", "softmax", ("scores",), 0, 0),
        GraphNode("ctx", "batch_matmul", ("sm", "v"), 0, model.head_dim),
        GraphNode("cat", "concat", ("ctx",), d, d),
        GraphNode("proj", "matmul", ("cat",), d, d),
        GraphNode("res1", "add", ("x", "proj"), d, d),
        GraphNode("ln2", "layernorm", ("res1",), d, d),
    ]
    if model.ffn_variant == "swiglu":
        nodes += [
            GraphNode("up", "matmul", ("ln2",), d, model.ffn),
            GraphNode("gate", "matmul", ("ln2",), d, model.ffn),
            GraphNode("silu", "silu", ("gate",), model.ffn, model.ffn),
            GraphNode("gated", "mul", ("up", "silu"), model.ffn, model.ffn),
            GraphNode("down", "matmul", ("gated",), model.ffn, d),
            GraphNode("res2", "add", ("res1", "down"), d, d),
        ]
    else:
        nodes += [
            GraphNode("up", "matmul", ("ln2",), d, model.ffn),
            GraphNode("act", "relu", ("up",), model.ffn, model.ffn),
            GraphNode("down", "matmul", ("act",), model.ffn, d),
            GraphNode("res2", "add", ("res1", "down"), d, d),
        ]
    g = DecoderGraph(nodes=nodes, n_layers=model.n_layers)
    g.validate()
    return g


ROLES = (
    "QKV_GEN",
    "QKT",
    "SOFTMAX",
    "SV",
    "PROJ",
    "FFN1",
    "ACT",
    "FFN2",
    "NORM",
    "RESIDUAL",
)


@dataclass
class MatchedGraph:
    graph: DecoderGraph
    roles: Dict[str, str]
    gqa: bool
    swiglu: bool
    unmatched: List[str]


def match_patterns(graph: DecoderGraph) -> MatchedGraph:
    """Classify nodes into decode roles; report what did not match.

    Grouped-query attention is detected by a width mismatch between the query
    projection and the key/value projections feeding the score matmul. The
    gated FFN is detected by two parallel matmuls merged through an
    activation-times-up elementwise product.
    """
    graph.validate()
    for n in graph.nodes:
        if n.kind in ("matmul",) and (n.d_in < 1 or n.d_out < 1):
            raise CompileError(f"node {n.id}: matmul without shape")
    roles: Dict[str, str] = {}

    def claim(nid: str, role: str):
        if nid in roles:
            raise CompileError(f"ambiguous match: {nid} is {roles[nid]} and {role}")
        roles[nid] = role

    softmaxes = [n for n in graph.nodes if n.kind == "softmax"]
    gqa = False
    for sm in softmaxes:
        scores = graph.node(sm.inputs[0])
        if scores.kind != "batch_matmul":
            continue
        claim(sm.id, "SOFTMAX")
        claim(scores.id, "QKT")
        q_node = graph.node(scores.inputs[0])
        k_node = graph.node(scores.inputs[1])
        ctxs = [c for c in graph.consumers(sm.id) if c.kind == "batch_matmul"]
        for ctx in ctxs:
            claim(ctx.id, "SV")
            v_id = next(i for i in ctx.inputs if i != sm.id)
            v_node = graph.node(v_id)
            if q_node.kind == "matmul":
                claim(q_node.id, "QKV_GEN")
                if k_node.kind == "matmul":
                    claim(k_node.id, "QKV_GEN")
                    if k_node.d_out != q_node.d_out:
                        gqa = True
                if v_node.kind == "matmul":
                    claim(v_node.id, "QKV_GEN")
            for c in graph.consumers(ctx.id):
                if c.kind == "concat":
                    claim(c.id, "RESIDUAL")  # folded into the projection input
                    for p in graph.consumers(c.id):
                        if p.kind == "matmul":
                            claim(p.id, "PROJ")
                elif c.kind == "matmul":
                    claim(c.id, "PROJ")
    # FFN: matmuls not yet claimed, reachable through a norm after the
    # attention residual. Gated variant: two parallel matmuls joined by mul.
    swiglu = False
    for n in graph.nodes:
        if n.kind == "mul" and n.id not in roles:
            a, b = (graph.node(i) for i in n.inputs)
            branches = {a.kind, b.kind}
            if "silu" in branches:
                silu_node = a if a.kind == "silu" else b
                up_node = b if a.kind == "silu" else a
                gate_node = graph.node(silu_node.inputs[0])
                if up_node.kind == "matmul" and gate_node.kind == "matmul":
                    swiglu = True
                    claim(n.id, "ACT")
                    claim(silu_node.id, "ACT")
                    claim(up_node.id, "FFN1")
                    claim(gate_node.id, "FFN1")
                    for c in graph.consumers(n.id):
                        if c.kind == "matmul":
                            claim(c.id, "FFN2")
    for n in graph.nodes:
        if n.kind == "relu" and n.id not in roles:
            src = graph.node(n.inputs[0])
            if src.kind == "matmul" and src.id not in roles:
                claim(n.id, "ACT")
                claim(src.id, "FFN1")
                for c in graph.consumers(n.id):
                    if c.kind == "matmul" and c.id not in roles:
                        claim(c.id, "FFN2")
    for n in graph.nodes:
        if n.id in roles:
            continue
        if n.kind == "layernorm":
            roles[n.id] = "NORM"
        elif n.kind == "add":
            roles[n.id] = "RESIDUAL"
    unmatched = [n.id for n in graph.nodes if n.id not in roles]
    return MatchedGraph(
        graph=graph, roles=roles, gqa=gqa, swiglu=swiglu, unmatched=unmatched
    )


# ---------------------------------------------------------------------------
# Execution table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableEntry:
    node_id: str
    op_kind: str
    partition: str  # "out" | "in" | "token" | "head" | "none"
    comm: str  # "broadcast" | "gather" | "reduce" | "none"
    stage: int


@dataclass
class ExecutionTable:
    entries: List[TableEntry]
    tp: int
    pp: int
    layers_per_stage: int

    def stage_of_layer(self, layer: int) -> int:
        return layer // self.layers_per_stage

    def comm_entries(self) -> List[TableEntry]:
        return [e for e in self.entries if e.comm != "none"]


def build_execution_table(
    matched: MatchedGraph,
    tp: int,
    pp: int,
    strategy: Strategy = Strategy.TOKEN_PARALLEL,
) -> ExecutionTable:
    if matched.unmatched:
        raise CompileError(f"unmatched nodes: {matched.unmatched}")
    n_l = matched.graph.n_layers
    if pp < 1 or pp > n_l:
        raise CompileError(f"pp={pp} infeasible for {n_l} layers")
    if tp < 1:
        raise CompileError(f"tp={tp} < 1")
    layers_per_stage = -(-n_l // pp)
    attn_part = "token" if strategy is Strategy.TOKEN_PARALLEL else "head"
    entries: List[TableEntry] = []
    for n in matched.graph.nodes:
        role = matched.roles[n.id]
        if role == "QKV_GEN":
            part, comm = "out", "none"
        elif role == "FFN1":
            part, comm = "out", "none"
        elif role in ("PROJ", "FFN2"):
            part, comm = "in", "reduce" if tp > 1 else "none"
        elif role in ("QKT", "SV"):
            part = attn_part
            comm = "gather" if strategy is Strategy.TOKEN_PARALLEL else "none"
        else:
            part, comm = "none", "none"
        entries.append(TableEntry(n.id, role, part, comm, stage=0))
    return ExecutionTable(entries=entries, tp=tp, pp=pp, layers_per_stage=layers_per_stage)


# ---------------------------------------------------------------------------
# Code generation
# ---------------------------------------------------------------------------

N_FC_OPS = 4
_FC_INDEX = {FcOp.QKV_GEN: 0, FcOp.PROJ: 1, FcOp.FFN1: 2, FcOp.FFN2: 3}
_FC_OPKIND = {
    FcOp.QKV_GEN: OpKind.QKV_GEN,
    FcOp.PROJ: OpKind.PROJ,
    FcOp.FFN1: OpKind.FFN1,
    FcOp.FFN2: OpKind.FFN2,
}


def weight_space(layer: int, op: FcOp) -> int:
    """Reserved (negative) address-space id for a static weight pack."""
    return -(1 + layer * N_FC_OPS + _FC_INDEX[op])


def kv_space(request_id: int, head_local: int, n_kv_local: int) -> int:
    return request_id * n_kv_local + head_local


@dataclass(frozen=True)
class FcShape:
    op: FcOp
    d_out_s: int
    d_in_s: int
    rows_per_bank: int
    chunks: int
    row_start: int

    @property
    def pack_rows(self) -> int:
        return self.rows_per_bank * self.chunks


@dataclass
class GprMap:
    x: int
    gemv_in: int
    q: int
    scores: int
    probs: int
    attn_out: int
    fc_out: int
    total: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CompiledStage:
    stage: int
    layer_lo: int
    layer_hi: int  # exclusive
    geo: Geometry
    fc_shapes: Dict[Tuple[int, FcOp], FcShape]
    stacks: Dict[Tuple[int, OpKind], CommandStack]
    gpr: GprMap
    weight_rows: int  # rows reserved per bank for weights
    n_h_local: int
    n_kv_local: int

    @property
    def local_layers(self) -> int:
        return self.layer_hi - self.layer_lo

    def stack_bytes(self) -> int:
        return sum(serialized_size(s) for s in self.stacks.values())

    def weight_table_entries(self) -> int:
        return sum(s.rows_per_bank for s in self.fc_shapes.values())


@dataclass
class CompiledProgram:
    model: ModelConfig
    topo: PimTopology
    tp: int
    pp: int
    strategy: Strategy
    stages: List[CompiledStage]

    def stage_for_layer(self, layer: int) -> CompiledStage:
        for st in self.stages:
            if st.layer_lo <= layer < st.layer_hi:
                return st
        raise CompileError(f"no stage holds layer {layer}")

    def manifest(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "tp": self.tp,
            "pp": self.pp,
            "strategy": self.strategy.value,
            "tokens_per_row": self.stages[0].geo.tokens_per_row,
            "stages": [
                {
                    "stage": st.stage,
                    "layers": [st.layer_lo, st.layer_hi],
                    "weight_rows_per_bank": st.weight_rows,
                    "stack_bytes": st.stack_bytes(),
                    "weight_table_entries": st.weight_table_entries(),
                    "gpr_map": st.gpr.to_dict(),
                    "weights": {
                        f"{layer}.{op.value}": {
                            "space": weight_space(layer, op),
                            "row_start": s.row_start,
                            "rows_per_bank": s.rows_per_bank,
                            "chunks": s.chunks,
                            "d_out": s.d_out_s,
                            "d_in": s.d_in_s,
                        }
                        for (layer, op), s in sorted(
                            st.fc_shapes.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
                        )
                    },
                }
                for st in self.stages
            ],
        }


def _fc_layer_shapes(model: ModelConfig, tp: int) -> Dict[FcOp, Tuple[int, int]]:
    """Per-module (d_out_s, d_in_s) for each FC op under head-aligned TP."""
    if model.n_heads % tp or model.n_kv_heads % tp:
        raise CompileError(f"tp={tp} does not divide head counts")
    n_h_l = model.n_heads // tp
    n_kv_l = model.n_kv_heads // tp
    d = model.d_model
    ffn_s = -(-model.ffn // tp)
    ffn1_out = 2 * ffn_s if model.ffn_variant == "swiglu" else ffn_s
    return {
        FcOp.QKV_GEN: ((n_h_l + 2 * n_kv_l) * model.head_dim, d),
        FcOp.PROJ: (d, n_h_l * model.head_dim),
        FcOp.FFN1: (ffn1_out, d),
        FcOp.FFN2: (d, ffn_s),
    }


def compile_model(
    model,
    topo: PimTopology,
    tp: int = 1,
    pp: int = 1,
    strategy: Strategy = Strategy.TOKEN_PARALLEL,
    tokens_per_row: Optional[int] = None,
) -> CompiledProgram:
    """Full pipeline: graph, patterns, execution table, per-stage codegen."""
    model = model_config(model)
    matched = match_patterns(graph_from_model(model))
    table = build_execution_table(matched, tp, pp, strategy)
    return codegen(table, model, topo, strategy=strategy, tokens_per_row=tokens_per_row)


def codegen(
    table: ExecutionTable,
    model,
    topo: PimTopology,
    strategy: Strategy = Strategy.TOKEN_PARALLEL,
    tokens_per_row: Optional[int] = None,
) -> CompiledProgram:
    """Emit one stack per (stage, layer, op kind) plus allocation manifests.

    Modules inside a tensor-parallel group run structurally identical stacks
    (their weight contents differ, addresses do not), so one image per stage
    is emitted. Raises when shapes do not map onto the row geometry or a
    buffer budget cannot be met.
    """
    model = model_config(model)
    tp, pp = table.tp, table.pp
    E = topo.elements_per_row
    G = topo.banks_per_module
    stages: List[CompiledStage] = []
    fc_dims = _fc_layer_shapes(model, tp)
    n_h_local = model.n_heads // tp
    n_kv_local = model.n_kv_heads // tp
    for stage in range(pp):
        lo = stage * table.layers_per_stage
        hi = min(lo + table.layers_per_stage, model.n_layers)
        if lo >= hi:
            raise CompileError(f"pp={pp} leaves stage {stage} without layers")
        L = hi - lo
        geo = attention_geometry(model.head_dim, topo, strategy, local_layers=L)
        if tokens_per_row is not None and tokens_per_row != geo.tokens_per_row:
            raise CompileError(
                f"tokens_per_row={tokens_per_row} inconsistent with geometry "
                f"({geo.tokens_per_row})"
            )
        # -- weight packs, laid out from row 0 upward -----------------------
        fc_shapes: Dict[Tuple[int, FcOp], FcShape] = {}
        next_row = 0
        for ll in range(L):
            for op in (FcOp.QKV_GEN, FcOp.PROJ, FcOp.FFN1, FcOp.FFN2):
                d_out_s, d_in_s = fc_dims[op]
                rpb = -(-d_out_s // G)
                chunks = -(-d_in_s // E)
                shape = FcShape(op, d_out_s, d_in_s, rpb, chunks, next_row)
                fc_shapes[(lo + ll, op)] = shape
                next_row += shape.pack_rows
        if next_row > topo.rows_per_bank:
            raise CompileError(
                f"stage {stage}: weights need {next_row} rows/bank, "
                f"topology has {topo.rows_per_bank}"
            )
        # -- GPR region map --------------------------------------------------
        u_max = geo.units_for(model.max_ctl)
        in_elems = max(d_in for _, d_in in fc_dims.values())
        in_elems = -(-in_elems // E) * E
        score_elems = u_max * geo.tokens_per_row
        gb_banks = geo.group_banks
        attn_out = max(gb_banks, u_max * geo.v_cols_per_bank * gb_banks)
        fc_out = max(s.chunks * s.rows_per_bank * G for s in fc_shapes.values())
        off = 0

        def region(size: int) -> int:
            nonlocal off
            start = off
            off += size
            return start

        gpr = GprMap(
            x=region(model.d_model),
            gemv_in=region(in_elems),
            q=region(model.head_dim),
            scores=region(score_elems),
            probs=region(score_elems),
            attn_out=region(attn_out),
            fc_out=region(fc_out),
            total=0,
        )
        gpr.total = off
        if off > topo.gpr_elements:
            raise CompileError(
                f"stage {stage}: GPR map needs {off} elements, "
                f"capacity {topo.gpr_elements}"
            )
        # -- stacks ----------------------------------------------------------
        stacks: Dict[Tuple[int, OpKind], CommandStack] = {}
        for ll in range(L):
            layer = lo + ll
            for op in (FcOp.QKV_GEN, FcOp.PROJ, FcOp.FFN1, FcOp.FFN2):
                shape = fc_shapes[(layer, op)]
                stacks[(layer, _FC_OPKIND[op])] = _fc_stack(
                    layer, op, shape, geo, gpr, G, E, stage
                )
            stacks[(layer, OpKind.QKT)] = _qkt_stack(
                layer, ll, geo, gpr, geo.group_banks, stage
            )
            stacks[(layer, OpKind.SV)] = _sv_stack(
                layer, ll, geo, gpr, geo.group_banks, E, stage
            )
        stages.append(
            CompiledStage(
                stage=stage,
                layer_lo=lo,
                layer_hi=hi,
                geo=geo,
                fc_shapes=fc_shapes,
                stacks=stacks,
                gpr=gpr,
                weight_rows=next_row,
                n_h_local=n_h_local,
                n_kv_local=n_kv_local,
            )
        )
    return CompiledProgram(
        model=model, topo=topo, tp=tp, pp=pp, strategy=strategy, stages=stages
    )


def _fc_stack(
    layer: int,
    op: FcOp,
    shape: FcShape,
    geo: Geometry,
    gpr: GprMap,
    G: int,
    E: int,
    stage: int,
) -> CommandStack:
    """Concrete stack: per input chunk, a loop over the bank-local rows.

    Rows resolve as weight_table[lo] + chunk; partial sums are drained per
    (chunk, row) and reduced hub-side.
    """
    entries: list = []
    for c in range(shape.chunks):
        entries.append(wr_inp(gpr.gemv_in + c * E))
        entries.append(DynLoop(lb=shape.rows_per_bank, le=2))
        entries.append(DynModi(Field.ROW, 1))
        entries.append(dot_prod(c, 0))
        entries.append(DynModi(Field.GPR_INDEX, G))
        entries.append(rd_out(gpr.fc_out + c * shape.rows_per_bank * G))
    meta = StackMeta(
        layer_id=layer,
        op_kind=_FC_OPKIND[op],
        module_id=stage,
        space=weight_space(layer, op),
        tokens_per_row=geo.tokens_per_row,
        gb_chunk=E,
    )
    return make_stack(entries, meta)


def _qkt_stack(
    layer: int, local_layer: int, geo: Geometry, gpr: GprMap, G: int, stage: int
) -> CommandStack:
    """Dynamic score stack: token-scaled loop over cache row units.

    Per unit, one dot product and one drain per token slot of the bank row;
    the drain lands the group's scores in read-out order (slot-major) for the
    hub to gather.
    """
    S = geo.tokens_per_bank_row
    k_off = geo.k_offset(local_layer)
    entries: list = [wr_inp(gpr.q)]
    entries.append(DynLoop(lb=1, le=2 * S, token_scaled=True))
    for s in range(S):
        entries.append(DynModi(Field.ROW, 1))
        entries.append(dot_prod(k_off, s * geo.d_h))
        entries.append(DynModi(Field.GPR_INDEX, geo.tokens_per_row))
        entries.append(rd_out(gpr.scores + s * G))
    meta = StackMeta(
        layer_id=layer,
        op_kind=OpKind.QKT,
        module_id=stage,
        tokens_per_row=geo.tokens_per_row,
        gb_chunk=geo.d_h,
    )
    return make_stack(entries, meta)


def _sv_stack(
    layer: int, local_layer: int, geo: Geometry, gpr: GprMap, G: int, E: int, stage: int
) -> CommandStack:
    """Dynamic context stack. Two layouts share one emitter:

    - wide groups (one value column per bank): the whole reduction
      accumulates in the out-registers across units, one final drain;
    - narrow groups (several columns per bank): per unit, one buffered score
      chunk feeds one dot product and one drain per column slot, partials
      reduced hub-side.
    """
    c = geo.v_cols_per_bank
    v_rows = geo.v_rows_per_unit
    entries: list = []
    if c == 1:
        entries.append(DynLoop(lb=1, le=2 * v_rows, token_scaled=True))
        for sub in range(v_rows):
            entries.append(DynModi(Field.GPR_INDEX, geo.tokens_per_row))
            entries.append(wr_inp(gpr.probs + sub * E))
            entries.append(DynModi(Field.ROW, 1))
            entries.append(dot_prod(geo.v_offset(local_layer, sub), 0))
        entries.append(rd_out(gpr.attn_out))
        gb_chunk = E
    else:
        tpr = geo.tokens_per_row
        entries.append(DynLoop(lb=1, le=1 + 2 * c, token_scaled=True))
        entries.append(DynModi(Field.GPR_INDEX, tpr))
        entries.append(wr_inp(gpr.probs))
        for jl in range(c):
            entries.append(DynModi(Field.ROW, 1))
            entries.append(dot_prod(geo.v_offset(local_layer, 0), jl * tpr))
            entries.append(DynModi(Field.GPR_INDEX, c * G))
            entries.append(rd_out(gpr.attn_out + jl * G))
        gb_chunk = tpr
    meta = StackMeta(
        layer_id=layer,
        op_kind=OpKind.SV,
        module_id=stage,
        tokens_per_row=geo.tokens_per_row,
        gb_chunk=gb_chunk,
    )
    return make_stack(entries, meta)


# ---------------------------------------------------------------------------
# Static reference generator
# ---------------------------------------------------------------------------


def static_attention_stacks(
    program: CompiledProgram,
    stage: CompiledStage,
    layer: int,
    t_cur: int,
    table: Va2PaTable,
    space: int,
) -> Dict[OpKind, CommandStack]:
    """Fully-unrolled physical-address stacks specialized to one token count.

    This is the conventional pre-generated form: correct only for ``t_cur``
    and for the exact physical placement in ``table``. Its size grows
    linearly with context where the dynamic encoding stays constant.
    """
    geo = stage.geo
    G = geo.group_banks
    E = program.topo.elements_per_row
    ll = layer - stage.layer_lo
    units = geo.units_for(t_cur)
    gpr = stage.gpr
    qkt: list = [wr_inp(gpr.q)]
    for r in range(units):
        base = table.lookup(space, r)
        for s in range(geo.tokens_per_bank_row):
            qkt.append(dot_prod(base + geo.k_offset(ll), s * geo.d_h))
            qkt.append(rd_out(gpr.scores + r * geo.tokens_per_row + s * G))
    sv: list = []
    c = geo.v_cols_per_bank
    if c == 1:
        for r in range(units):
            base = table.lookup(space, r)
            for sub in range(geo.v_rows_per_unit):
                sv.append(wr_inp(gpr.probs + r * geo.tokens_per_row + sub * E))
                sv.append(dot_prod(base + geo.v_offset(ll, sub), 0))
        sv.append(rd_out(gpr.attn_out))
        sv_chunk = E
    else:
        tpr = geo.tokens_per_row
        for r in range(units):
            base = table.lookup(space, r)
            sv.append(wr_inp(gpr.probs + r * tpr))
            for jl in range(c):
                sv.append(dot_prod(base + geo.v_offset(ll, 0), jl * tpr))
                sv.append(rd_out(gpr.attn_out + r * c * G + jl * G))
        sv_chunk = tpr
    mk = lambda op: StackMeta(
        layer_id=layer,
        op_kind=op,
        module_id=stage.stage,
        tokens_per_row=geo.tokens_per_row,
        gb_chunk=geo.d_h if op == OpKind.QKT else sv_chunk,
    )
    return {
        OpKind.QKT: make_stack(qkt, mk(OpKind.QKT)),
        OpKind.SV: make_stack(sv, mk(OpKind.SV)),
    }


def static_fc_stack(
    stage: CompiledStage, layer: int, op: FcOp, table: Va2PaTable, topo: PimTopology
) -> CommandStack:
    shape = stage.fc_shapes[(layer, op)]
    G = topo.banks_per_module
    E = topo.elements_per_row
    gpr = stage.gpr
    space = weight_space(layer, op)
    entries: list = []
    for c in range(shape.chunks):
        entries.append(wr_inp(gpr.gemv_in + c * E))
        for lo in range(shape.rows_per_bank):
            entries.append(dot_prod(table.lookup(space, lo) + c, 0))
            entries.append(rd_out(gpr.fc_out + c * shape.rows_per_bank * G + lo * G))
    meta = StackMeta(
        layer_id=layer,
        op_kind=_FC_OPKIND[op],
        module_id=stage.stage,
        space=space,
        tokens_per_row=stage.geo.tokens_per_row,
        gb_chunk=E,
    )
    return make_stack(entries, meta)


def weight_table_entries(stage: CompiledStage) -> List[Tuple[int, List[int]]]:
    """(space, pa list) pairs for every weight pack of a stage."""
    out = []
    for (layer, op), shape in stage.fc_shapes.items():
        pas = [shape.row_start + lo * shape.chunks for lo in range(shape.rows_per_bank)]
        out.append((weight_space(layer, op), pas))
    return out
