"""P-code style IR: varnodes, ops, blocks, a textual format, evaluation and a
lightweight block optimizer.

Guest instructions are lifted into short sequences of these ops; instrumentation
plugins inject more of them.  Everything downstream (execution, analysis,
injection) works on this representation only.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

VALID_SIZES = (1, 2, 4, 8)

_MASK = {1: 0xFF, 2: 0xFFFF, 4: 0xFFFFFFFF, 8: 0xFFFFFFFFFFFFFFFF}


class AddressSpace(enum.Enum):
    REGISTER = "r"
    RAM = "@"
    CONSTANT = "#"
    TEMP = "t"


class OpCode(enum.Enum):
    COPY = "COPY"
    LOAD = "LOAD"
    STORE = "STORE"
    INT_ADD = "INT_ADD"
    INT_SUB = "INT_SUB"
    INT_MULT = "INT_MULT"
    INT_AND = "INT_AND"
    INT_OR = "INT_OR"
    INT_XOR = "INT_XOR"
    INT_LEFT = "INT_LEFT"
    INT_RIGHT = "INT_RIGHT"
    INT_SRIGHT = "INT_SRIGHT"
    INT_EQUAL = "INT_EQUAL"
    INT_NOTEQUAL = "INT_NOTEQUAL"
    INT_LESS = "INT_LESS"
    INT_SLESS = "INT_SLESS"
    INT_ZEXT = "INT_ZEXT"
    INT_SEXT = "INT_SEXT"
    TRUNC = "TRUNC"
    BOOL_NEGATE = "BOOL_NEGATE"
    BRANCH = "BRANCH"
    CBRANCH = "CBRANCH"
    BRANCHIND = "BRANCHIND"
    CALL = "CALL"
    CALLIND = "CALLIND"
    RETURN = "RETURN"
    ENVCALL = "ENVCALL"
    INVALID = "INVALID"


# Ops allowed as the final op of a block.  CBRANCH is not in this set: a lifted
# conditional branch is always followed by an unconditional fallthrough BRANCH.
FINAL_OPS = frozenset(
    {OpCode.BRANCH, OpCode.BRANCHIND, OpCode.CALL, OpCode.CALLIND, OpCode.RETURN, OpCode.INVALID}
)

FLOW_OPS = FINAL_OPS | {OpCode.CBRANCH}

# Two-input integer ops with in0.size == in1.size == out.size.
BIN_OPS = frozenset(
    {OpCode.INT_ADD, OpCode.INT_SUB, OpCode.INT_MULT, OpCode.INT_AND, OpCode.INT_OR, OpCode.INT_XOR}
)
SHIFT_OPS = frozenset({OpCode.INT_LEFT, OpCode.INT_RIGHT, OpCode.INT_SRIGHT})
CMP_OPS = frozenset({OpCode.INT_EQUAL, OpCode.INT_NOTEQUAL, OpCode.INT_LESS, OpCode.INT_SLESS})
EXT_OPS = frozenset({OpCode.INT_ZEXT, OpCode.INT_SEXT})

# Ops with no side effect beyond their output; candidates for dead-code removal.
PURE_OPS = BIN_OPS | SHIFT_OPS | CMP_OPS | EXT_OPS | {OpCode.COPY, OpCode.TRUNC, OpCode.BOOL_NEGATE}


@dataclass(frozen=True)
class VarNode:
    space: AddressSpace
    id: int
    size: int

    def __repr__(self) -> str:
        return format_varnode(self)


def reg(i: int, size: int = 4) -> VarNode:
    return VarNode(AddressSpace.REGISTER, i, size)


def tmp(i: int, size: int = 4) -> VarNode:
    return VarNode(AddressSpace.TEMP, i, size)


def const(v: int, size: int = 4) -> VarNode:
    return VarNode(AddressSpace.CONSTANT, v & _MASK[size], size)


def ram(addr: int, size: int = 8) -> VarNode:
    return VarNode(AddressSpace.RAM, addr, size)


def skip(delta: int) -> VarNode:
    """CBRANCH target for an intra-block forward skip of `delta` ops."""
    return VarNode(AddressSpace.CONSTANT, delta, 8)


@dataclass(frozen=True)
class PcodeOp:
    opcode: OpCode
    output: VarNode | None
    inputs: tuple[VarNode, ...]
    # True for instrumentation-injected ops; analyses and other plugins skip
    # them so plugins never instrument each other's code.
    synthetic: bool = field(default=False, compare=False)

    def __repr__(self) -> str:
        return format_op(self)


def op(opcode: OpCode, output: VarNode | None, *inputs: VarNode, synthetic: bool = False) -> PcodeOp:
    return PcodeOp(opcode, output, tuple(inputs), synthetic)


@dataclass
class PcodeBlock:
    """One lifted guest block: straight-line ops ending in a terminator.

    instr_starts maps guest instructions to op indices; duplicates are allowed
    (an instruction can lift to zero ops) so budget accounting stays exact.
    """

    guest_addr: int
    ops: list[PcodeOp]
    byte_len: int
    instr_starts: tuple[int, ...]
    generation: int = 0

    @property
    def instr_count(self) -> int:
        return len(self.instr_starts)

    def max_temp(self) -> int:
        m = -1
        for o in self.ops:
            for vn in o.inputs:
                if vn.space is AddressSpace.TEMP and vn.id > m:
                    m = vn.id
            if o.output is not None and o.output.space is AddressSpace.TEMP and o.output.id > m:
                m = o.output.id
        return m

    def __repr__(self) -> str:
        return f"<PcodeBlock @{self.guest_addr:#x} gen={self.generation} ops={len(self.ops)}>"


class ValidationError(Exception):
    pass


class EvalError(Exception):
    pass


def mask(size: int) -> int:
    return _MASK[size]


def to_signed(v: int, size: int) -> int:
    half = 1 << (8 * size - 1)
    return v - (1 << (8 * size)) if v >= half else v


# ---------------------------------------------------------------------------
# validation


def _check_sizes(o: PcodeOp, idx: int) -> None:
    def fail(msg: str):
        raise ValidationError(f"op {idx}: {msg}: {format_op(o)}")

    out, ins = o.output, o.inputs
    code = o.opcode
    for vn in ins + ((out,) if out else ()):
        if vn.size not in VALID_SIZES:
            fail(f"bad size {vn.size}")
    if out is not None and out.space is AddressSpace.CONSTANT:
        fail("constant output")
    if code in BIN_OPS:
        if out is None or len(ins) != 2:
            fail("needs output and 2 inputs")
        if not (ins[0].size == ins[1].size == out.size):
            fail("operand size mismatch")
    elif code in SHIFT_OPS:
        if out is None or len(ins) != 2 or ins[0].size != out.size:
            fail("shift size mismatch")
    elif code in CMP_OPS:
        if out is None or len(ins) != 2 or ins[0].size != ins[1].size or out.size != 1:
            fail("comparison wants equal inputs and 1-byte output")
    elif code in EXT_OPS:
        if out is None or len(ins) != 1 or out.size <= ins[0].size:
            fail("extension must widen")
    elif code is OpCode.TRUNC:
        if out is None or len(ins) != 1 or out.size >= ins[0].size:
            fail("truncation must narrow")
    elif code is OpCode.COPY:
        if out is None or len(ins) != 1 or out.size != ins[0].size:
            fail("copy size mismatch")
    elif code is OpCode.BOOL_NEGATE:
        if out is None or len(ins) != 1 or out.size != 1 or ins[0].size != 1:
            fail("bool negate is 1-byte")
    elif code is OpCode.LOAD:
        if out is None or len(ins) != 1 or ins[0].size not in (4, 8):
            fail("load wants an address input")
    elif code is OpCode.STORE:
        if out is not None or len(ins) != 2 or ins[0].size not in (4, 8):
            fail("store wants address and value inputs")
    elif code is OpCode.CBRANCH:
        if out is not None or len(ins) != 2 or ins[1].size != 1:
            fail("cbranch wants target and 1-byte condition")
        if ins[0].space not in (AddressSpace.RAM, AddressSpace.CONSTANT):
            fail("cbranch target must be an address or op-index skip")
    elif code in (OpCode.BRANCH, OpCode.CALL):
        if out is not None or len(ins) != 1 or ins[0].space is not AddressSpace.RAM:
            fail("wants one direct address target")
    elif code in (OpCode.BRANCHIND, OpCode.CALLIND, OpCode.RETURN):
        if out is not None or len(ins) != 1 or ins[0].space is AddressSpace.CONSTANT:
            fail("wants one computed target input")
    elif code is OpCode.ENVCALL:
        if out is not None or len(ins) > 1:
            fail("envcall takes at most a constant marker")
        if ins and ins[0].space is not AddressSpace.CONSTANT:
            fail("envcall marker must be constant")
    elif code is OpCode.INVALID:
        if out is not None or ins:
            fail("invalid takes nothing")
    else:
        fail("unknown opcode")


def validate_block(block: PcodeBlock, reg_sizes: dict[int, int] | None = None) -> None:
    """Raise ValidationError unless `block` is well formed.

    reg_sizes gives the declared size per REGISTER id; ids 0..31 default to 4
    (guest registers), other ids are pinned by first use.
    """
    ops = block.ops
    if not ops:
        raise ValidationError("empty block")
    if ops[-1].opcode not in FINAL_OPS:
        raise ValidationError(f"block must end in a terminator, got {ops[-1].opcode.value}")
    sizes: dict[int, int] = dict(reg_sizes or {})
    temp_def: dict[int, int] = {}

    def check_reg(vn: VarNode, idx: int):
        want = sizes.get(vn.id, 4 if vn.id < 32 else None)
        if want is None:
            sizes[vn.id] = vn.size
        elif vn.size != want:
            raise ValidationError(f"op {idx}: register r{vn.id} used at size {vn.size}, declared {want}")

    for idx, o in enumerate(ops):
        if o.opcode in FINAL_OPS and idx != len(ops) - 1:
            raise ValidationError(f"op {idx}: terminator {o.opcode.value} before end of block")
        _check_sizes(o, idx)
        for vn in o.inputs:
            if vn.space is AddressSpace.TEMP:
                if vn.id not in temp_def:
                    raise ValidationError(f"op {idx}: temp t{vn.id} read before definition")
                if temp_def[vn.id] != vn.size:
                    raise ValidationError(f"op {idx}: temp t{vn.id} read at size {vn.size}, defined {temp_def[vn.id]}")
            elif vn.space is AddressSpace.REGISTER:
                check_reg(vn, idx)
        if o.opcode is OpCode.CBRANCH and o.inputs[0].space is AddressSpace.CONSTANT:
            delta = o.inputs[0].id
            if delta < 1 or idx + delta > len(ops) - 1:
                raise ValidationError(f"op {idx}: skip target {delta} leaves the block")
        if o.output is not None:
            if o.output.space is AddressSpace.TEMP:
                temp_def[o.output.id] = o.output.size
            elif o.output.space is AddressSpace.REGISTER:
                check_reg(o.output, idx)
            elif o.output.space is AddressSpace.RAM:
                raise ValidationError(f"op {idx}: direct RAM output not supported, use STORE")
    starts = block.instr_starts
    if not starts or starts[0] != 0:
        raise ValidationError("instr_starts must begin at op 0")
    for a, b in zip(starts, starts[1:]):
        if b < a:
            raise ValidationError("instr_starts must be non-decreasing")
    if starts[-1] > len(ops):
        raise ValidationError("instr_starts out of range")


# ---------------------------------------------------------------------------
# evaluation of data ops


def eval_op(opcode: OpCode, a: int, b: int, in_size: int, out_size: int) -> int:
    """Evaluate one data op on unsigned operand values; result is masked to out_size.

    Shift amounts of in_size*8 or more give 0 (sign fill for INT_SRIGHT).
    """
    m_in = _MASK[in_size]
    m_out = _MASK[out_size]
    bits = 8 * in_size
    if opcode is OpCode.COPY:
        return a & m_out
    if opcode is OpCode.INT_ADD:
        return (a + b) & m_out
    if opcode is OpCode.INT_SUB:
        return (a - b) & m_out
    if opcode is OpCode.INT_MULT:
        return (a * b) & m_out
    if opcode is OpCode.INT_AND:
        return a & b
    if opcode is OpCode.INT_OR:
        return a | b
    if opcode is OpCode.INT_XOR:
        return a ^ b
    if opcode is OpCode.INT_LEFT:
        return (a << b) & m_out if b < bits else 0
    if opcode is OpCode.INT_RIGHT:
        return (a & m_in) >> b if b < bits else 0
    if opcode is OpCode.INT_SRIGHT:
        return (to_signed(a, in_size) >> min(b, bits)) & m_out
    if opcode is OpCode.INT_EQUAL:
        return 1 if a == b else 0
    if opcode is OpCode.INT_NOTEQUAL:
        return 1 if a != b else 0
    if opcode is OpCode.INT_LESS:
        return 1 if a < b else 0
    if opcode is OpCode.INT_SLESS:
        return 1 if to_signed(a, in_size) < to_signed(b, in_size) else 0
    if opcode is OpCode.INT_ZEXT:
        return a & m_out
    if opcode is OpCode.INT_SEXT:
        return to_signed(a, in_size) & m_out
    if opcode is OpCode.TRUNC:
        return a & m_out
    if opcode is OpCode.BOOL_NEGATE:
        return 0 if a else 1
    raise EvalError(f"not a data op: {opcode.value}")


# ---------------------------------------------------------------------------
# textual format


def format_varnode(vn: VarNode) -> str:
    if vn.space is AddressSpace.REGISTER:
        return f"r{vn.id}:{vn.size}"
    if vn.space is AddressSpace.TEMP:
        return f"t{vn.id}:{vn.size}"
    if vn.space is AddressSpace.CONSTANT:
        return f"#{vn.id:#x}:{vn.size}"
    return f"@{vn.id:#x}:{vn.size}"


def _format_target(vn: VarNode) -> str:
    if vn.space is AddressSpace.CONSTANT:
        return f"+{vn.id}"
    if vn.space is AddressSpace.RAM:
        return f"@{vn.id:#x}"
    return format_varnode(vn)


def format_op(o: PcodeOp) -> str:
    code = o.opcode
    if code in (OpCode.BRANCH, OpCode.CALL):
        return f"{code.value} {_format_target(o.inputs[0])}"
    if code is OpCode.CBRANCH:
        return f"CBRANCH {_format_target(o.inputs[0])}, {format_varnode(o.inputs[1])}"
    parts = [format_varnode(v) for v in o.inputs]
    rhs = code.value + ((" " + ", ".join(parts)) if parts else "")
    if o.output is not None:
        return f"{format_varnode(o.output)} = {rhs}"
    return rhs


def format_block(block: PcodeBlock, name: str = "B") -> str:
    lines = [f"{name}@{block.guest_addr:#x}:"]
    lines += [f"  {format_op(o)}" for o in block.ops]
    return "\n".join(lines)


def format_blocks(blocks: list[PcodeBlock]) -> str:
    return "\n".join(format_block(b, f"B{i}") for i, b in enumerate(blocks))


_HEADER_RE = re.compile(r"^(\w+)\s*(?:@\s*(0x[0-9a-fA-F]+|\d+))?\s*:$")
_OPERAND_RE = re.compile(
    r"^(?:(r|t)(\d+):(\d+)|#(-?0x[0-9a-fA-F]+|-?\d+):(\d+)|@(0x[0-9a-fA-F]+|\d+)(?::(\d+))?|\+(\d+)|([A-Za-z_]\w*))$"
)

DEFAULT_BASE = 0x1000


def parse_pcode_asm(text: str, validate: bool = True) -> list[PcodeBlock]:
    """Parse the textual block format.

    Lines: an optional `name:` or `name@0x2000:` header starts a block (blocks
    without an explicit address get 0x1000 + 0x100 * index), then one op per
    line as `out = OPCODE in0, in1`.  Operands: rN:S, tN:S, #const:S, @addr
    (branch target), +N (intra-block skip), or a block name.  `;` comments.
    """
    raw_blocks: list[tuple[str, int | None, list[str]]] = []
    cur: tuple[str, int | None, list[str]] | None = None
    for line in text.splitlines():
        line = line.split(";", 1)[0].strip()
        if not line:
            continue
        m = _HEADER_RE.match(line)
        if m:
            cur = (m.group(1), int(m.group(2), 0) if m.group(2) else None, [])
            raw_blocks.append(cur)
            continue
        if cur is None:
            cur = ("B0", None, [])
            raw_blocks.append(cur)
        cur[2].append(line)

    addrs: dict[str, int] = {}
    for i, (bname, baddr, _) in enumerate(raw_blocks):
        addr = baddr if baddr is not None else DEFAULT_BASE + 0x100 * i
        if bname in addrs:
            raise ValidationError(f"duplicate block name {bname}")
        addrs[bname] = addr

    def parse_operand(tok: str, labels_ok: bool) -> VarNode:
        m = _OPERAND_RE.match(tok)
        if not m:
            raise ValidationError(f"bad operand {tok!r}")
        if m.group(1):
            space = AddressSpace.REGISTER if m.group(1) == "r" else AddressSpace.TEMP
            return VarNode(space, int(m.group(2)), int(m.group(3)))
        if m.group(4):
            size = int(m.group(5))
            if size not in VALID_SIZES:
                raise ValidationError(f"bad size in {tok!r}")
            return const(int(m.group(4), 0), size)
        if m.group(6):
            size = int(m.group(7)) if m.group(7) else 8
            return VarNode(AddressSpace.RAM, int(m.group(6), 0), size)
        if m.group(8):
            return skip(int(m.group(8)))
        name = m.group(9)
        if not labels_ok or name not in addrs:
            raise ValidationError(f"unknown label {name!r}")
        return ram(addrs[name])

    out: list[PcodeBlock] = []
    for bname, _, lines in raw_blocks:
        ops: list[PcodeOp] = []
        for line in lines:
            output = None
            body = line
            if "=" in line and not line.lstrip().startswith(tuple(c.value for c in FLOW_OPS)):
                lhs, body = line.split("=", 1)
                output = parse_operand(lhs.strip(), labels_ok=False)
            toks = body.strip().split(None, 1)
            try:
                code = OpCode(toks[0])
            except ValueError:
                raise ValidationError(f"unknown opcode {toks[0]!r}") from None
            operands = []
            if len(toks) > 1:
                operands = [parse_operand(t.strip(), labels_ok=True) for t in toks[1].split(",")]
            ops.append(PcodeOp(code, output, tuple(operands)))
        blk = PcodeBlock(addrs[bname], ops, 4 * len(ops), tuple(range(len(ops))))
        if validate:
            validate_block(blk)
        out.append(blk)
    return out


# ---------------------------------------------------------------------------
# optimizer: one forward constant-folding pass, one backward dead-temp pass.


def _fold_key(vn: VarNode) -> tuple[AddressSpace, int]:
    return (vn.space, vn.id)


def optimize_block(block: PcodeBlock) -> PcodeBlock:
    """Constant folding plus dead temp elimination; no fixpoint iteration.

    Blocks containing intra-block skips are returned unchanged (injected code
    relies on stable op indices).  guest_addr/byte_len/generation carry over.
    """
    for o in block.ops:
        if o.opcode is OpCode.CBRANCH and o.inputs[0].space is AddressSpace.CONSTANT:
            return block

    known: dict[tuple[AddressSpace, int], tuple[int, int]] = {}  # key -> (value, size)

    def lookup(vn: VarNode) -> int | None:
        if vn.space is AddressSpace.CONSTANT:
            return vn.id
        got = known.get(_fold_key(vn))
        if got is not None and got[1] == vn.size:
            return got[0]
        return None

    folded: list[PcodeOp] = []
    for o in block.ops:
        code = o.opcode
        vals = [lookup(v) for v in o.inputs]
        new_inputs = tuple(
            const(v, vn.size) if (v is not None and vn.space is not AddressSpace.CONSTANT
                                  and vn.space is not AddressSpace.RAM) else vn
            for v, vn in zip(vals, o.inputs)
        )
        o = PcodeOp(code, o.output, new_inputs) if new_inputs != o.inputs else o
        out = o.output
        if out is not None:
            known.pop(_fold_key(out), None)
        if code in PURE_OPS and out is not None:
            if all(v is not None for v in vals):
                a = vals[0]
                b = vals[1] if len(vals) > 1 else 0
                res = eval_op(code, a, b, o.inputs[0].size, out.size)
                folded.append(PcodeOp(OpCode.COPY, out, (const(res, out.size),)))
                known[_fold_key(out)] = (res, out.size)
                continue
            simplified = _identity(code, o.inputs, vals, out)
            if simplified is not None:
                o = simplified
                src = o.inputs[0]
                v = lookup(src)
                if v is not None:
                    known[_fold_key(out)] = (v, out.size)
        folded.append(o)

    # backward pass: drop pure ops whose TEMP output is never read afterwards
    used: set[tuple[AddressSpace, int]] = set()
    kept_rev: list[tuple[int, PcodeOp]] = []
    for idx in range(len(folded) - 1, -1, -1):
        o = folded[idx]
        out = o.output
        if (
            o.opcode in PURE_OPS
            and out is not None
            and out.space is AddressSpace.TEMP
            and _fold_key(out) not in used
        ):
            continue
        if out is not None:
            used.discard(_fold_key(out))
        for vn in o.inputs:
            if vn.space in (AddressSpace.REGISTER, AddressSpace.TEMP):
                used.add(_fold_key(vn))
        kept_rev.append((idx, o))
    kept_rev.reverse()

    kept_ops = [o for _, o in kept_rev]
    kept_idx = [i for i, _ in kept_rev]
    new_starts = []
    for s in block.instr_starts:
        n = 0
        while n < len(kept_idx) and kept_idx[n] < s:
            n += 1
        new_starts.append(n)
    return PcodeBlock(block.guest_addr, kept_ops, block.byte_len, tuple(new_starts), block.generation)


def _identity(code: OpCode, ins: tuple[VarNode, ...], vals: list[int | None], out: VarNode) -> PcodeOp | None:
    """Rewrite ops with a neutral constant operand into COPY."""
    if len(ins) != 2 or ins[0].size != out.size:
        return None

    def copy_of(vn: VarNode) -> PcodeOp | None:
        if vn.size != out.size:
            return None
        return PcodeOp(OpCode.COPY, out, (vn,))

    a, b = vals[0], vals[1]
    if code in (OpCode.INT_ADD, OpCode.INT_OR, OpCode.INT_XOR):
        if b == 0:
            return copy_of(ins[0])
        if a == 0:
            return copy_of(ins[1])
    elif code is OpCode.INT_SUB and b == 0:
        return copy_of(ins[0])
    elif code is OpCode.INT_MULT:
        if b == 1:
            return copy_of(ins[0])
        if a == 1:
            return copy_of(ins[1])
    elif code in SHIFT_OPS and b == 0:
        return copy_of(ins[0])
    elif code is OpCode.INT_AND:
        full = mask(out.size)
        if b == full:
            return copy_of(ins[0])
        if a == full:
            return copy_of(ins[1])
    return None
