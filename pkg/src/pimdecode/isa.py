"""Bank-level PIM command set and its compact dynamic encoding.

Three concrete commands drive the compute flow of a PIM module:

    WR-INP    gpr            copy an input chunk from GPR into the per-channel
                             global buffers (shared broadcast path)
    DOT-PROD  row, col       per-bank dot product between a DRAM row segment
                             (starting at element offset ``col``) and the
                             buffered input, accumulated in the out-register
    RD-OUT    gpr            drain all scoped out-registers into GPR

Two dynamic commands let a short stack stand for a long unrolled sequence:

    DYN-LOOP  lb, le         repeat the next ``le`` concrete commands ``lb``
                             times; ``lb`` may be marked token-scaled so the
                             dispatcher recomputes it from the live token count
    DYN-MODI  target, coeff  mark one field of the following concrete command
                             as loop-varying with per-iteration stride ``coeff``

A DYN-MODI'd ROW field is a virtual chunk index: iteration ``i`` resolves to
``table[i * coeff] + literal`` where ``table`` is the per-address-space
virtual-to-physical map and the command's literal operand is the offset inside
the mapped chunk. COL and GPR fields marked dynamic resolve without a table,
to ``literal + i * coeff``. Undecorated operands are physical and pass through
unchanged.

Binary layout (little-endian, fixed width per tag):

    header:  magic "PMS1" | layer u16 | op_kind u8 | module u16 | space i32
             | tokens_per_row u32 | gb_chunk u32 | scope u32 | n_entries u32
    WR-INP / DOT-PROD / RD-OUT:  tag u8 | arg0 u32 | arg1 u32
    DYN-LOOP:                    tag u8 | lb u32 | le u32 | flags u8
    DYN-MODI:                    tag u8 | target u8 | coeff i32

The text form is one command per line, ``DOT-PROD row=@va+6*2 col=0`` style,
with ``@va`` marking dynamic fields (base ``+6``, stride ``*2``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterator, Optional, Sequence, Union


class Opcode(IntEnum):
    WR_INP = 0x01
    DOT_PROD = 0x02
    RD_OUT = 0x03


class DynKind(IntEnum):
    DYN_LOOP = 0x10
    DYN_MODI = 0x11


class Field(IntEnum):
    """Operand fields a DYN-MODI may target."""

    ROW = 0
    COL = 1
    GPR_INDEX = 2


class OpKind(IntEnum):
    """What a stack computes; stored in the stack header."""

    QKT = 0
    SV = 1
    QKV_GEN = 2
    PROJ = 3
    FFN1 = 4
    FFN2 = 5
    OTHER = 6


# Which fields each opcode carries, in (arg0, arg1) order.
_OPERANDS = {
    Opcode.WR_INP: (Field.GPR_INDEX,),
    Opcode.DOT_PROD: (Field.ROW, Field.COL),
    Opcode.RD_OUT: (Field.GPR_INDEX,),
}

_MAX_U32 = 0xFFFFFFFF


class StackError(ValueError):
    """Malformed command, stack, or encoding input."""


@dataclass(frozen=True)
class PimCommand:
    """One concrete bank-level command. Immutable after construction."""

    opcode: Opcode
    arg0: int = 0
    arg1: int = 0

    def __post_init__(self):
        fields = _OPERANDS[self.opcode]
        args = (self.arg0, self.arg1)[: len(fields)]
        for f, v in zip(fields, args):
            if not (0 <= v <= _MAX_U32):
                raise StackError(f"{self.opcode.name}: {f.name}={v} out of range")
        if len(fields) == 1 and self.arg1 != 0:
            raise StackError(f"{self.opcode.name} takes a single operand")

    @property
    def fields(self) -> tuple:
        return _OPERANDS[self.opcode]

    def get(self, f: Field) -> int:
        idx = _OPERANDS[self.opcode].index(f)
        return (self.arg0, self.arg1)[idx]

    def with_field(self, f: Field, value: int) -> "PimCommand":
        idx = _OPERANDS[self.opcode].index(f)
        if idx == 0:
            return replace(self, arg0=value)
        return replace(self, arg1=value)


def wr_inp(gpr: int) -> PimCommand:
    return PimCommand(Opcode.WR_INP, gpr)


def dot_prod(row: int, col: int = 0) -> PimCommand:
    return PimCommand(Opcode.DOT_PROD, row, col)


def rd_out(gpr: int) -> PimCommand:
    return PimCommand(Opcode.RD_OUT, gpr)


@dataclass(frozen=True)
class DynLoop:
    """Repeat the following ``le`` concrete commands ``lb`` times.

    ``le`` counts concrete commands only; DYN-MODI entries ride along with the
    command they decorate. With ``token_scaled`` set the dispatcher replaces
    ``lb`` by ceil(t_cur / tokens_per_row) at expansion time.
    """

    lb: int
    le: int
    token_scaled: bool = False

    def __post_init__(self):
        if self.lb < 1:
            raise StackError(f"DYN-LOOP lb={self.lb} < 1")
        if self.le < 1:
            raise StackError(f"DYN-LOOP le={self.le} < 1")


@dataclass(frozen=True)
class DynModi:
    """Mark one field of the next concrete command as loop-varying."""

    target: Field
    coeff: int

    def __post_init__(self):
        if not (-(2**31) <= self.coeff < 2**31):
            raise StackError(f"DYN-MODI coeff={self.coeff} out of i32 range")


DpaCommand = Union[DynLoop, DynModi]
Entry = Union[PimCommand, DynLoop, DynModi]


@dataclass(frozen=True)
class StackMeta:
    """Stack header: identity plus the constants expansion/execution need."""

    layer_id: int = 0
    op_kind: OpKind = OpKind.OTHER
    module_id: int = 0
    space: int = 0  # address-space id the ROW table lookups use
    tokens_per_row: int = 256  # divisor for token-scaled loop bounds
    gb_chunk: int = 0  # elements moved per WR-INP (0 = full buffer)
    scope: int = 0  # channel bitmask; 0 = all channels


@dataclass(frozen=True)
class CommandStack:
    entries: tuple = ()
    meta: StackMeta = field(default_factory=StackMeta)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self.entries)

    def pim_commands(self) -> list:
        return [e for e in self.entries if isinstance(e, PimCommand)]


def make_stack(entries: Sequence[Entry], meta: Optional[StackMeta] = None) -> CommandStack:
    return CommandStack(tuple(entries), meta or StackMeta())


# ---------------------------------------------------------------------------
# Loop encoding
# ---------------------------------------------------------------------------


def encode_loop(
    body: Sequence[PimCommand],
    dyn_fields: Sequence[tuple],
    lb: int,
    meta: Optional[StackMeta] = None,
    token_scaled: bool = False,
) -> CommandStack:
    """Encode ``lb`` repetitions of ``body`` as a compact dynamic stack.

    ``dyn_fields`` lists (position, target, coefficient) triples; a DYN-MODI
    is inserted before each designated body command. Expanding the result over
    an identity address map reproduces ``lb`` concatenated copies of ``body``
    with each targeted field incremented by its coefficient per iteration.
    """
    if not body:
        raise StackError("encode_loop: empty body")
    if lb < 1:
        raise StackError(f"encode_loop: lb={lb} < 1")
    mods: dict = {}
    for pos, target, coeff in dyn_fields:
        if not (0 <= pos < len(body)):
            raise StackError(f"encode_loop: position {pos} out of range")
        target = Field(target)
        if target not in body[pos].fields:
            raise StackError(
                f"encode_loop: {body[pos].opcode.name} has no {target.name} field"
            )
        if any(t == target for t, _ in mods.get(pos, [])):
            raise StackError(f"encode_loop: duplicate modifier for position {pos}")
        mods.setdefault(pos, []).append((target, coeff))
    entries: list = [DynLoop(lb=lb, le=len(body), token_scaled=token_scaled)]
    for pos, cmd in enumerate(body):
        for target, coeff in mods.get(pos, []):
            entries.append(DynModi(target, coeff))
        entries.append(cmd)
    return make_stack(entries, meta)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"entry {self.index}: {self.reason}"


def validate_stack(stack: CommandStack) -> list:
    """Structural check. Returns a list of violations; empty means well formed.

    Rules: loop bodies must fit inside the stack (counting concrete commands
    only), loops do not nest, every DYN-MODI is attached to a following
    concrete command that has the targeted field, and no two modifiers on one
    command target the same field.
    """
    violations = []
    entries = stack.entries
    loop_end = -1  # index one past the last command of the open loop
    pending: list = []  # DynModi indices awaiting their command
    pending_targets: set = set()
    for i, e in enumerate(entries):
        if isinstance(e, DynLoop):
            if pending:
                violations.append(Violation(pending[0], "dangling modifier"))
                pending, pending_targets = [], set()
            if i < loop_end:
                violations.append(Violation(i, "nested loop"))
            remaining = sum(
                1 for x in entries[i + 1 :] if isinstance(x, PimCommand)
            )
            if e.le > remaining:
                violations.append(
                    Violation(i, f"loop overruns stack (le={e.le}, {remaining} left)")
                )
            # find the entry index just past the le-th concrete command
            seen = 0
            end = len(entries)
            for j in range(i + 1, len(entries)):
                if isinstance(entries[j], PimCommand):
                    seen += 1
                    if seen == e.le:
                        end = j + 1
                        break
            loop_end = end
        elif isinstance(e, DynModi):
            if e.target in pending_targets:
                violations.append(Violation(i, f"duplicate {e.target.name} modifier"))
            pending.append(i)
            pending_targets.add(e.target)
        else:  # PimCommand
            for j in pending:
                tgt = entries[j].target
                if tgt not in e.fields:
                    violations.append(
                        Violation(j, f"{e.opcode.name} has no {tgt.name} field")
                    )
            pending, pending_targets = [], set()
    if pending:
        violations.append(Violation(pending[0], "dangling modifier"))
    return violations


# ---------------------------------------------------------------------------
# Binary serialization
# ---------------------------------------------------------------------------

_MAGIC = b"PMS1"
_HDR = struct.Struct("<4sHBHiIIII")
_PIM = struct.Struct("<BII")
_LOOP = struct.Struct("<BIIB")
_MODI = struct.Struct("<BBi")


def serialize(stack: CommandStack) -> bytes:
    """Fixed-width binary encoding; size is what budget accounting charges."""
    m = stack.meta
    out = [
        _HDR.pack(
            _MAGIC,
            m.layer_id,
            int(m.op_kind),
            m.module_id,
            m.space,
            m.tokens_per_row,
            m.gb_chunk,
            m.scope,
            len(stack.entries),
        )
    ]
    for e in stack.entries:
        if isinstance(e, PimCommand):
            out.append(_PIM.pack(int(e.opcode), e.arg0, e.arg1))
        elif isinstance(e, DynLoop):
            out.append(_LOOP.pack(int(DynKind.DYN_LOOP), e.lb, e.le, int(e.token_scaled)))
        elif isinstance(e, DynModi):
            out.append(_MODI.pack(int(DynKind.DYN_MODI), int(e.target), e.coeff))
        else:
            raise StackError(f"unknown entry type {type(e)!r}")
    return b"".join(out)


def serialized_size(stack: CommandStack) -> int:
    n = _HDR.size
    for e in stack.entries:
        if isinstance(e, PimCommand):
            n += _PIM.size
        elif isinstance(e, DynLoop):
            n += _LOOP.size
        else:
            n += _MODI.size
    return n


def deserialize(data: bytes) -> CommandStack:
    if len(data) < _HDR.size:
        raise StackError("truncated header")
    magic, layer, op, module, space, tpr, gbc, scope, count = _HDR.unpack_from(data, 0)
    if magic != _MAGIC:
        raise StackError(f"bad magic {magic!r}")
    meta = StackMeta(
        layer_id=layer,
        op_kind=OpKind(op),
        module_id=module,
        space=space,
        tokens_per_row=tpr,
        gb_chunk=gbc,
        scope=scope,
    )
    pos = _HDR.size
    entries: list = []
    for _ in range(count):
        if pos >= len(data):
            raise StackError("truncated input")
        tag = data[pos]
        if tag in (Opcode.WR_INP, Opcode.DOT_PROD, Opcode.RD_OUT):
            if pos + _PIM.size > len(data):
                raise StackError("truncated command")
            _, a0, a1 = _PIM.unpack_from(data, pos)
            entries.append(PimCommand(Opcode(tag), a0, a1))
            pos += _PIM.size
        elif tag == DynKind.DYN_LOOP:
            if pos + _LOOP.size > len(data):
                raise StackError("truncated loop")
            _, lb, le, flags = _LOOP.unpack_from(data, pos)
            entries.append(DynLoop(lb=lb, le=le, token_scaled=bool(flags & 1)))
            pos += _LOOP.size
        elif tag == DynKind.DYN_MODI:
            if pos + _MODI.size > len(data):
                raise StackError("truncated modifier")
            _, target, coeff = _MODI.unpack_from(data, pos)
            entries.append(DynModi(Field(target), coeff))
            pos += _MODI.size
        else:
            raise StackError(f"unknown opcode 0x{tag:02x} at byte {pos}")
    if pos != len(data):
        raise StackError(f"{len(data) - pos} trailing bytes")
    return CommandStack(tuple(entries), meta)


# ---------------------------------------------------------------------------
# Text form (debugging / golden files)
# ---------------------------------------------------------------------------

_OP_NAMES = {Opcode.WR_INP: "WR-INP", Opcode.DOT_PROD: "DOT-PROD", Opcode.RD_OUT: "RD-OUT"}
_NAME_OPS = {v: k for k, v in _OP_NAMES.items()}
_FIELD_NAMES = {Field.ROW: "row", Field.COL: "col", Field.GPR_INDEX: "gpr"}
_NAME_FIELDS = {v: k for k, v in _FIELD_NAMES.items()}


def to_text(stack: CommandStack) -> str:
    """One command per line; dynamic fields rendered as ``@va+base*stride``."""
    m = stack.meta
    lines = [
        f"# stack layer={m.layer_id} op={m.op_kind.name} module={m.module_id} "
        f"space={m.space} tpr={m.tokens_per_row} gb_chunk={m.gb_chunk} scope={m.scope}"
    ]
    pending: dict = {}
    for e in stack.entries:
        if isinstance(e, DynLoop):
            suffix = " token-scaled" if e.token_scaled else ""
            lines.append(f"DYN-LOOP lb={e.lb} le={e.le}{suffix}")
        elif isinstance(e, DynModi):
            pending[e.target] = e.coeff
        else:
            parts = [_OP_NAMES[e.opcode]]
            for f in e.fields:
                v = e.get(f)
                if f in pending:
                    coeff = pending[f]
                    rendered = f"@va+{v}" if coeff == 1 else f"@va+{v}*{coeff}"
                    parts.append(f"{_FIELD_NAMES[f]}={rendered}")
                else:
                    parts.append(f"{_FIELD_NAMES[f]}={v}")
            pending = {}
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> CommandStack:
    entries: list = []
    meta = StackMeta()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            kv = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
            if "layer" in kv:
                meta = StackMeta(
                    layer_id=int(kv["layer"]),
                    op_kind=OpKind[kv.get("op", "OTHER")],
                    module_id=int(kv.get("module", 0)),
                    space=int(kv.get("space", 0)),
                    tokens_per_row=int(kv.get("tpr", 256)),
                    gb_chunk=int(kv.get("gb_chunk", 0)),
                    scope=int(kv.get("scope", 0)),
                )
            continue
        toks = line.split()
        name = toks[0]
        if name == "DYN-LOOP":
            kv = dict(t.split("=", 1) for t in toks[1:] if "=" in t)
            entries.append(
                DynLoop(
                    lb=int(kv["lb"]),
                    le=int(kv["le"]),
                    token_scaled="token-scaled" in toks,
                )
            )
            continue
        if name not in _NAME_OPS:
            raise StackError(f"line {lineno}: unknown command {name!r}")
        opcode = _NAME_OPS[name]
        args = {}
        for t in toks[1:]:
            fname, val = t.split("=", 1)
            f = _NAME_FIELDS[fname]
            if val.startswith("@va+"):
                body = val[4:]
                base, _, stride = body.partition("*")
                entries.append(DynModi(f, int(stride) if stride else 1))
                args[f] = int(base)
            else:
                args[f] = int(val)
        fields = _OPERANDS[opcode]
        vals = [args.get(f, 0) for f in fields]
        while len(vals) < 2:
            vals.append(0)
        entries.append(PimCommand(opcode, vals[0], vals[1]))
    return CommandStack(tuple(entries), meta)
