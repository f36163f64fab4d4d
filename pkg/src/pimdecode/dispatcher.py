"""On-module command dispatcher: dynamic stacks to physical command sequences.

Mirrors the controller-hub logic of the modeled hardware. A module keeps a
small configuration buffer (layer count, per-slot request id and live token
count), a virtual-to-physical address table, and a resident image of loaded
command stacks. Expansion walks a stack, unrolls each loop, steps the
loop-varying fields, and resolves ROW fields through the address table. The
result contains concrete commands only.

Both dispatcher buffers are hard-budgeted at 96 KiB in the reference
configuration: loaded stacks must fit the command buffer, and every mapped
virtual chunk costs 8 bytes (space i16 | va u16 | pa u32) of the address map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .isa import (
    CommandStack,
    DynLoop,
    DynModi,
    Field,
    OpKind,
    PimCommand,
    serialize,
    serialized_size,
)

CMD_BUFFER_BYTES = 96 * 1024
ADDR_MAP_BYTES = 96 * 1024
ADDR_ENTRY_BYTES = 8


class DispatchError(ValueError):
    pass


class BudgetError(DispatchError):
    """A dispatcher buffer budget would be exceeded."""


@dataclass(frozen=True)
class DispatchBudget:
    cmd_buffer_bytes: int = CMD_BUFFER_BYTES
    addr_map_bytes: int = ADDR_MAP_BYTES


@dataclass
class RequestSlot:
    request_id: int
    t_cur: int


@dataclass
class ConfigBuffer:
    """Host-maintained decode state for one module."""

    total_layers: int
    current_layer: int = 0
    slots: Dict[int, RequestSlot] = field(default_factory=dict)

    def add_request(self, request_id: int, t_cur: int) -> None:
        if t_cur < 1:
            raise DispatchError(f"request {request_id}: t_cur={t_cur} < 1")
        if request_id in self.slots:
            raise DispatchError(f"request {request_id} already resident")
        self.slots[request_id] = RequestSlot(request_id, t_cur)

    def t_cur(self, request_id: int) -> int:
        try:
            return self.slots[request_id].t_cur
        except KeyError:
            raise DispatchError(f"unknown request {request_id}") from None


def update_config(cfg: ConfigBuffer, request_id: int, new_t_cur: int) -> ConfigBuffer:
    """One-token advance of a live slot. Mutates and returns ``cfg``.

    Replacing a finished slot is done by removing it (release path) and calling
    :meth:`ConfigBuffer.add_request` for the successor.
    """
    if not cfg.slots:
        raise DispatchError("update on empty slot list")
    slot = cfg.slots.get(request_id)
    if slot is None:
        raise DispatchError(f"update for unknown request {request_id}")
    if new_t_cur != slot.t_cur + 1:
        raise DispatchError(
            f"request {request_id}: t_cur {slot.t_cur} -> {new_t_cur} is not +1"
        )
    slot.t_cur = new_t_cur
    return cfg


def release_slot(cfg: ConfigBuffer, request_id: int) -> None:
    if request_id not in cfg.slots:
        raise DispatchError(f"release of unknown request {request_id}")
    del cfg.slots[request_id]


class Va2PaTable:
    """Per-address-space map of dense virtual chunk indices to physical rows.

    Spaces are integer ids: one per (request, kv-head) for cache data plus
    reserved static spaces for weights. Entries within a space are dense from
    zero and append-only while the space is live.
    """

    def __init__(self, budget_bytes: int = ADDR_MAP_BYTES):
        self.budget_bytes = budget_bytes
        self._spaces: Dict[int, List[int]] = {}

    # -- mutation ---------------------------------------------------------
    def append(self, space: int, pa: int) -> int:
        """Map the next dense va of ``space`` to ``pa``; returns the new va."""
        if pa < 0:
            raise DispatchError(f"negative physical row {pa}")
        if (self.entry_count() + 1) * ADDR_ENTRY_BYTES > self.budget_bytes:
            raise BudgetError(
                f"address map budget exceeded ({self.budget_bytes} bytes)"
            )
        rows = self._spaces.setdefault(space, [])
        rows.append(pa)
        return len(rows) - 1

    def extend(self, space: int, pas: Iterable[int]) -> None:
        for pa in pas:
            self.append(space, pa)

    def drop_space(self, space: int) -> List[int]:
        return self._spaces.pop(space, [])

    # -- queries ----------------------------------------------------------
    def lookup(self, space: int, va: int) -> int:
        rows = self._spaces.get(space)
        if rows is None:
            raise DispatchError(f"unmapped space {space}")
        if not (0 <= va < len(rows)):
            raise DispatchError(f"unmapped VA {va} in space {space}")
        return rows[va]

    def size(self, space: int) -> int:
        return len(self._spaces.get(space, ()))

    def spaces(self) -> List[int]:
        return list(self._spaces)

    def entry_count(self) -> int:
        return sum(len(v) for v in self._spaces.values())

    def encoded_bytes(self) -> int:
        return self.entry_count() * ADDR_ENTRY_BYTES


def identity_table(space: int, n: int, budget_bytes: int = ADDR_MAP_BYTES) -> Va2PaTable:
    t = Va2PaTable(budget_bytes)
    t.extend(space, range(n))
    return t


def compute_loop_bound(t_cur: int, tokens_per_row: int) -> int:
    """Rows a per-bank cache shard spans: ceil(t_cur / tokens_per_row)."""
    if t_cur < 1:
        raise DispatchError(f"t_cur={t_cur} < 1")
    if tokens_per_row < 1:
        raise DispatchError(f"tokens_per_row={tokens_per_row} < 1")
    return -(-t_cur // tokens_per_row)


def expand(
    stack: CommandStack,
    cfg: ConfigBuffer,
    table: Va2PaTable,
    request_id: Optional[int] = None,
    space: Optional[int] = None,
) -> List[PimCommand]:
    """Unroll a stack into concrete physical-address commands.

    Loop-varying fields step by their coefficient each iteration starting from
    zero; ROW fields resolve as ``table[space][counter] + literal`` (literal is
    the offset inside the mapped chunk), other fields as ``literal + counter``.
    Token-scaled loop bounds are recomputed from the request's live token
    count. ``space`` overrides the stack's address space: one resident cache
    stack serves every (request, head) context the dispatcher binds it to.
    Deterministic and side-effect free.
    """
    meta = stack.meta
    if meta.layer_id >= cfg.total_layers:
        raise DispatchError(
            f"stack layer {meta.layer_id} >= total_layers {cfg.total_layers}"
        )
    if space is None:
        space = meta.space
    out: List[PimCommand] = []
    entries = stack.entries
    i = 0
    while i < len(entries):
        e = entries[i]
        if isinstance(e, DynModi):
            raise DispatchError(f"entry {i}: modifier outside loop body")
        if isinstance(e, PimCommand):
            out.append(e)
            i += 1
            continue
        # DynLoop: gather le concrete commands (with attached modifiers)
        lb = e.lb
        if e.token_scaled:
            if request_id is None:
                raise DispatchError("token-scaled loop without a request")
            lb = compute_loop_bound(cfg.t_cur(request_id), meta.tokens_per_row)
        body: List[Tuple[PimCommand, List[DynModi]]] = []
        mods: List[DynModi] = []
        j = i + 1
        while j < len(entries) and len(body) < e.le:
            x = entries[j]
            if isinstance(x, DynLoop):
                raise DispatchError(f"entry {j}: nested loop")
            if isinstance(x, DynModi):
                mods.append(x)
            else:
                body.append((x, mods))
                mods = []
            j += 1
        if len(body) < e.le or mods:
            raise DispatchError(f"entry {i}: loop overruns stack")
        for it in range(lb):
            for cmd, cmd_mods in body:
                resolved = cmd
                for m in cmd_mods:
                    counter = it * m.coeff
                    literal = cmd.get(m.target)
                    if m.target == Field.ROW:
                        value = table.lookup(space, counter) + literal
                    else:
                        value = literal + counter
                    resolved = resolved.with_field(m.target, value)
                out.append(resolved)
        i = j
    return out


@dataclass
class StackImage:
    """Resident set of loaded stacks, keyed by (layer, op_kind, part)."""

    stacks: Dict[Tuple[int, int, int], CommandStack] = field(default_factory=dict)
    total_bytes: int = 0

    def get(self, layer: int, op_kind: OpKind, part: int = 0) -> CommandStack:
        return self.stacks[(layer, int(op_kind), part)]


def load_stacks(
    stacks: Iterable[CommandStack],
    budget: DispatchBudget = DispatchBudget(),
) -> StackImage:
    """Admit stacks into the command buffer; reject if over budget."""
    image = StackImage()
    for s in stacks:
        size = serialized_size(s)
        if image.total_bytes + size > budget.cmd_buffer_bytes:
            raise BudgetError(
                f"command buffer budget exceeded: {image.total_bytes + size} "
                f"> {budget.cmd_buffer_bytes} bytes"
            )
        key = (s.meta.layer_id, int(s.meta.op_kind), 0)
        while key in image.stacks:
            key = (key[0], key[1], key[2] + 1)
        image.stacks[key] = s
        image.total_bytes += size
    return image


def budget_report(image: StackImage, table: Va2PaTable) -> dict:
    return {
        "cmd_buffer_bytes_used": image.total_bytes,
        "cmd_buffer_bytes_limit": CMD_BUFFER_BYTES,
        "addr_map_bytes_used": table.encoded_bytes(),
        "addr_map_bytes_limit": table.budget_bytes,
        "stacks_resident": len(image.stacks),
        "spaces_mapped": len(table.spaces()),
    }
