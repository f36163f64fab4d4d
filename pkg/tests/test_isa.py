"""Command set, loop encoding, validation, serialization."""

import pytest
from hypothesis import given, settings, strategies as st

from pimdecode import isa
from pimdecode.isa import (
    CommandStack,
    DynLoop,
    DynModi,
    Field,
    OpKind,
    Opcode,
    PimCommand,
    StackError,
    StackMeta,
    deserialize,
    dot_prod,
    encode_loop,
    from_text,
    make_stack,
    rd_out,
    serialize,
    serialized_size,
    to_text,
    validate_stack,
    wr_inp,
)


def reference_unroll(body, dyn_fields, lb):
    """Independent oracle: emit lb copies with manual index arithmetic."""
    out = []
    for i in range(lb):
        for pos, cmd in enumerate(body):
            for p, target, coeff in dyn_fields:
                if p == pos:
                    cmd = cmd.with_field(Field(target), cmd.get(Field(target)) + i * coeff)
            out.append(cmd)
    return out


def expand_identity(stack):
    """Expand an encoded stack assuming an identity address map."""
    out = []
    entries = list(stack.entries)
    i = 0
    while i < len(entries):
        e = entries[i]
        if isinstance(e, PimCommand):
            out.append(e)
            i += 1
            continue
        assert isinstance(e, DynLoop)
        body = []
        mods = []
        j = i + 1
        while j < len(entries) and len(body) < e.le:
            x = entries[j]
            if isinstance(x, DynModi):
                mods.append(x)
            else:
                body.append((x, mods))
                mods = []
            j += 1
        for it in range(e.lb):
            for cmd, cmd_mods in body:
                for m in cmd_mods:
                    cmd_it = cmd.with_field(m.target, cmd.get(m.target) + it * m.coeff)
                    cmd = cmd_it
                out.append(cmd)
        i = j
    return out


class TestCommands:
    def test_operand_shapes(self):
        assert wr_inp(3).get(Field.GPR_INDEX) == 3
        c = dot_prod(5, 7)
        assert c.get(Field.ROW) == 5 and c.get(Field.COL) == 7

    def test_negative_address_rejected(self):
        with pytest.raises(StackError):
            PimCommand(Opcode.DOT_PROD, -1, 0)

    def test_single_operand_opcodes_reject_second(self):
        with pytest.raises(StackError):
            PimCommand(Opcode.RD_OUT, 0, 5)

    def test_loop_bounds_validated(self):
        with pytest.raises(StackError):
            DynLoop(lb=0, le=1)
        with pytest.raises(StackError):
            DynLoop(lb=1, le=0)


class TestEncodeLoop:
    def test_row_stride_pattern(self):
        # two iterations over (dot-product, read-out) stepping the row
        stack = encode_loop(
            [dot_prod(0, 0), rd_out(0)], [(0, Field.ROW, 1)], lb=2
        )
        got = expand_identity(stack)
        assert got == [dot_prod(0, 0), rd_out(0), dot_prod(1, 0), rd_out(0)]
        head = stack.entries[0]
        assert isinstance(head, DynLoop) and head.lb == 2 and head.le == 2

    def test_single_iteration_is_identity(self):
        body = [wr_inp(3)]
        stack = encode_loop(body, [], lb=1)
        assert expand_identity(stack) == body

    def test_matches_reference_unroller(self):
        body = [dot_prod(4, 0), dot_prod(4, 8), rd_out(16)]
        dyn = [(0, Field.ROW, 2), (2, Field.GPR_INDEX, 32)]
        stack = encode_loop(body, dyn, lb=7)
        assert expand_identity(stack) == reference_unroll(body, dyn, 7)

    @pytest.mark.parametrize("lb", [1, 2, 3, 8, 17, 64])
    @pytest.mark.parametrize("k", [1, 2, 5, 8])
    def test_exhaustive_unroll_equivalence(self, lb, k):
        body = [dot_prod(i, (i * 3) % 64) for i in range(k)]
        dyn = [(i, Field.ROW, i + 1) for i in range(k)]
        stack = encode_loop(body, dyn, lb=lb)
        assert expand_identity(stack) == reference_unroll(body, dyn, lb)

    def test_position_out_of_range(self):
        with pytest.raises(StackError):
            encode_loop([rd_out(0)], [(1, Field.GPR_INDEX, 1)], lb=2)

    def test_lb_below_one(self):
        with pytest.raises(StackError):
            encode_loop([rd_out(0)], [], lb=0)

    def test_compactness_independent_of_lb(self):
        body = [dot_prod(0, 0), rd_out(0)]
        small = encode_loop(body, [(0, Field.ROW, 1)], lb=2)
        large = encode_loop(body, [(0, Field.ROW, 1)], lb=4096)
        assert len(small) == len(large)
        assert serialized_size(small) == serialized_size(large)


class TestValidate:
    def test_well_formed_loop(self):
        stack = encode_loop(
            [dot_prod(0, 0), rd_out(0), dot_prod(0, 8), rd_out(1)],
            [(0, Field.ROW, 1), (2, Field.ROW, 1)],
            lb=2,
        )
        assert validate_stack(stack) == []

    def test_loop_overruns_stack(self):
        stack = make_stack([DynLoop(lb=2, le=4), dot_prod(0, 0)])
        report = validate_stack(stack)
        assert len(report) == 1 and "overruns" in report[0].reason

    def test_dangling_modifier(self):
        stack = make_stack([DynModi(Field.ROW, 1), DynModi(Field.ROW, 2)])
        reasons = [v.reason for v in validate_stack(stack)]
        assert any("dangling" in r for r in reasons)
        assert any("duplicate" in r for r in reasons)

    def test_modifier_targeting_missing_field(self):
        stack = make_stack([DynLoop(lb=1, le=1), DynModi(Field.COL, 1), rd_out(0)])
        report = validate_stack(stack)
        assert len(report) == 1 and "COL" in report[0].reason

    def test_nested_loop_flagged(self):
        stack = make_stack(
            [DynLoop(lb=2, le=2), dot_prod(0, 0), DynLoop(lb=2, le=1), rd_out(0)]
        )
        assert any("nested" in v.reason for v in validate_stack(stack))


class TestSerialization:
    def test_empty_stack_round_trips(self):
        s = make_stack([], StackMeta(layer_id=3, op_kind=OpKind.SV))
        blob = serialize(s)
        assert len(blob) == serialized_size(s)
        assert deserialize(blob) == s

    def test_loop_stack_round_trips_byte_identically(self):
        s = encode_loop(
            [dot_prod(0, 0), rd_out(0), dot_prod(0, 8), rd_out(1)],
            [(0, Field.ROW, 1), (2, Field.ROW, 1)],
            lb=2,
            meta=StackMeta(layer_id=1, op_kind=OpKind.QKT, tokens_per_row=256),
        )
        blob = serialize(s)
        assert serialize(deserialize(blob)) == blob

    def test_rejects_bad_magic(self):
        with pytest.raises(StackError):
            deserialize(b"XXXX" + b"\x00" * 30)

    def test_rejects_truncation(self):
        blob = serialize(make_stack([wr_inp(1), rd_out(2)]))
        with pytest.raises(StackError):
            deserialize(blob[:-3])

    def test_rejects_unknown_opcode(self):
        s = make_stack([wr_inp(1)])
        blob = bytearray(serialize(s))
        blob[-9] = 0x7F  # clobber the command tag
        with pytest.raises(StackError):
            deserialize(bytes(blob))

    def test_rejects_trailing_bytes(self):
        with pytest.raises(StackError):
            deserialize(serialize(make_stack([wr_inp(1)])) + b"\x00")


# -- structural generator for property tests --------------------------------

_commands = st.one_of(
    st.builds(wr_inp, st.integers(0, 2**20)),
    st.builds(dot_prod, st.integers(0, 2**20), st.integers(0, 2**12)),
    st.builds(rd_out, st.integers(0, 2**20)),
)


@st.composite
def valid_stacks(draw):
    n_sections = draw(st.integers(1, 4))
    entries = []
    for _ in range(n_sections):
        if draw(st.booleans()):
            body = draw(st.lists(_commands, min_size=1, max_size=5))
            dyn = []
            for pos, cmd in enumerate(body):
                for f in cmd.fields:
                    if draw(st.booleans()):
                        dyn.append((pos, f, draw(st.integers(-(2**10), 2**10))))
            lb = draw(st.integers(1, 64))
            section = encode_loop(body, dyn, lb, token_scaled=draw(st.booleans()))
            entries.extend(section.entries)
        else:
            entries.extend(draw(st.lists(_commands, min_size=1, max_size=4)))
    meta = StackMeta(
        layer_id=draw(st.integers(0, 500)),
        op_kind=draw(st.sampled_from(list(OpKind))),
        module_id=draw(st.integers(0, 100)),
        space=draw(st.integers(-(2**20), 2**20)),
        tokens_per_row=draw(st.integers(1, 4096)),
        gb_chunk=draw(st.integers(0, 2048)),
        scope=draw(st.integers(0, 2**16 - 1)),
    )
    return make_stack(entries, meta)


@settings(max_examples=1000, deadline=None)
@given(valid_stacks())
def test_binary_round_trip_property(stack):
    assert validate_stack(stack) == []
    assert deserialize(serialize(stack)) == stack


@settings(max_examples=300, deadline=None)
@given(valid_stacks())
def test_text_round_trip_property(stack):
    assert from_text(to_text(stack)) == stack


def test_ten_thousand_random_stacks_round_trip():
    import random

    rng = random.Random(7)
    ops = [
        lambda: wr_inp(rng.randrange(2**16)),
        lambda: dot_prod(rng.randrange(2**16), rng.randrange(1024)),
        lambda: rd_out(rng.randrange(2**16)),
    ]
    for _ in range(10_000):
        body = [rng.choice(ops)() for _ in range(rng.randint(1, 6))]
        dyn = []
        for pos, cmd in enumerate(body):
            if rng.random() < 0.4:
                f = rng.choice(cmd.fields)
                dyn.append((pos, f, rng.randint(-64, 64)))
        stack = encode_loop(body, dyn, rng.randint(1, 128))
        assert deserialize(serialize(stack)) == stack


def test_text_form_marks_dynamic_fields():
    stack = encode_loop([dot_prod(6, 5)], [(0, Field.ROW, 2)], lb=3)
    text = to_text(stack)
    assert "DOT-PROD row=@va+6*2 col=5" in text
    assert "DYN-LOOP lb=3 le=1" in text
