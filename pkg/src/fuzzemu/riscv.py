"""RV32I decoding and lifting to P-code blocks.

A block is lifted instruction by instruction until the first control-flow
instruction (jump, branch, ecall/ebreak or an undecodable word) or until the
128-instruction cap.  Writes to x0 are dropped at lift time, so x0 can never
change.  JAL/JALR writing the link register become CALL/CALLIND hints and the
`jalr x0, ra` return idiom becomes RETURN; this only matters to plugins, the
jump itself is the same.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .mmu import MemFault
from .pcode import (
    OpCode,
    PcodeBlock,
    PcodeOp,
    VarNode,
    const,
    op,
    ram,
    reg,
    tmp,
)

MAX_BLOCK_INSTRS = 128
LINK_REG = 1  # ra
M32 = 0xFFFFFFFF


@dataclass(frozen=True)
class Instr:
    mnemonic: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0


def _sext(v: int, bits: int) -> int:
    return v - (1 << bits) if v & (1 << (bits - 1)) else v


_OP_IMM = {0: "addi", 2: "slti", 3: "sltiu", 4: "xori", 6: "ori", 7: "andi"}
_OP_REG = {
    (0, 0x00): "add",
    (0, 0x20): "sub",
    (1, 0x00): "sll",
    (2, 0x00): "slt",
    (3, 0x00): "sltu",
    (4, 0x00): "xor",
    (5, 0x00): "srl",
    (5, 0x20): "sra",
    (6, 0x00): "or",
    (7, 0x00): "and",
}
_LOADS = {0: "lb", 1: "lh", 2: "lw", 4: "lbu", 5: "lhu"}
_STORES = {0: "sb", 1: "sh", 2: "sw"}
_BRANCHES = {0: "beq", 1: "bne", 4: "blt", 5: "bge", 6: "bltu", 7: "bgeu"}


def decode(word: int) -> Instr:
    """Decode one 32-bit word; unknown encodings come back as `invalid`."""
    word &= M32
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    funct3 = (word >> 12) & 7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    funct7 = word >> 25
    bad = Instr("invalid", imm=word)

    if opcode == 0x37:
        return Instr("lui", rd=rd, imm=word & 0xFFFFF000)
    if opcode == 0x17:
        return Instr("auipc", rd=rd, imm=word & 0xFFFFF000)
    if opcode == 0x6F:
        imm = (
            ((word >> 31) << 20)
            | (((word >> 12) & 0xFF) << 12)
            | (((word >> 20) & 1) << 11)
            | (((word >> 21) & 0x3FF) << 1)
        )
        return Instr("jal", rd=rd, imm=_sext(imm, 21))
    if opcode == 0x67:
        if funct3 != 0:
            return bad
        return Instr("jalr", rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x63:
        if funct3 not in _BRANCHES:
            return bad
        imm = (
            ((word >> 31) << 12)
            | (((word >> 7) & 1) << 11)
            | (((word >> 25) & 0x3F) << 5)
            | (((word >> 8) & 0xF) << 1)
        )
        return Instr(_BRANCHES[funct3], rs1=rs1, rs2=rs2, imm=_sext(imm, 13))
    if opcode == 0x03:
        if funct3 not in _LOADS:
            return bad
        return Instr(_LOADS[funct3], rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x23:
        if funct3 not in _STORES:
            return bad
        imm = ((word >> 25) << 5) | ((word >> 7) & 0x1F)
        return Instr(_STORES[funct3], rs1=rs1, rs2=rs2, imm=_sext(imm, 12))
    if opcode == 0x13:
        if funct3 == 1:
            return Instr("slli", rd=rd, rs1=rs1, imm=rs2) if funct7 == 0 else bad
        if funct3 == 5:
            if funct7 == 0:
                return Instr("srli", rd=rd, rs1=rs1, imm=rs2)
            if funct7 == 0x20:
                return Instr("srai", rd=rd, rs1=rs1, imm=rs2)
            return bad
        return Instr(_OP_IMM[funct3], rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x33:
        name = _OP_REG.get((funct3, funct7))
        return Instr(name, rd=rd, rs1=rs1, rs2=rs2) if name else bad
    if opcode == 0x73 and rd == 0 and funct3 == 0 and rs1 == 0:
        if word >> 20 == 0:
            return Instr("ecall")
        if word >> 20 == 1:
            return Instr("ebreak")
        return bad
    return bad


_ALU_IMM_OPS = {"addi": OpCode.INT_ADD, "xori": OpCode.INT_XOR, "ori": OpCode.INT_OR, "andi": OpCode.INT_AND}
_ALU_REG_OPS = {
    "add": OpCode.INT_ADD,
    "sub": OpCode.INT_SUB,
    "xor": OpCode.INT_XOR,
    "or": OpCode.INT_OR,
    "and": OpCode.INT_AND,
}
_SHIFT_OPS = {"sll": OpCode.INT_LEFT, "srl": OpCode.INT_RIGHT, "sra": OpCode.INT_SRIGHT}
_SHIFT_IMM_OPS = {"slli": OpCode.INT_LEFT, "srli": OpCode.INT_RIGHT, "srai": OpCode.INT_SRIGHT}
_LOAD_SIZES = {"lb": (1, True), "lbu": (1, False), "lh": (2, True), "lhu": (2, False), "lw": (4, False)}
_STORE_SIZES = {"sb": 1, "sh": 2, "sw": 4}
_BRANCH_OPS = {
    "beq": (OpCode.INT_EQUAL, False),
    "bne": (OpCode.INT_NOTEQUAL, False),
    "blt": (OpCode.INT_SLESS, False),
    "bge": (OpCode.INT_SLESS, True),
    "bltu": (OpCode.INT_LESS, False),
    "bgeu": (OpCode.INT_LESS, True),
}

EBREAK_MARKER = 1  # ENVCALL constant marker for debug traps



def _src(i: int) -> VarNode:
    """Register read for lifting: x0 is architecturally zero, surface it as a
    literal so the optimizer and comparison analysis see the constant."""
    return reg(i) if i else const(0)


class Lifter:
    def __init__(self, max_instrs: int = MAX_BLOCK_INSTRS):
        self.max_instrs = max_instrs

    def lift_block(self, fetch: Callable[[int, int], bytes], addr: int) -> PcodeBlock:
        """Lift starting at `addr`; `fetch` provides executable bytes.

        A fetch fault on the first instruction propagates; afterwards the block
        is cut short so the fault surfaces when the next block is entered.
        """
        ops: list[PcodeOp] = []
        starts: list[int] = []
        self._next_tmp = 0
        pc = addr
        for k in range(self.max_instrs):
            try:
                word = int.from_bytes(fetch(pc, 4), "little")
            except MemFault:
                if k == 0:
                    raise
                ops.append(op(OpCode.BRANCH, None, ram(pc)))
                return self._finish(addr, ops, starts, pc - addr)
            starts.append(len(ops))
            ins = decode(word)
            done = self._lift_one(ops, ins, pc)
            pc += 4
            if done:
                return self._finish(addr, ops, starts, pc - addr)
        ops.append(op(OpCode.BRANCH, None, ram(pc)))
        return self._finish(addr, ops, starts, pc - addr)

    def _finish(self, addr: int, ops, starts, byte_len: int) -> PcodeBlock:
        return PcodeBlock(addr, ops, byte_len, tuple(starts))

    def _tmp(self, size: int) -> VarNode:
        self._next_tmp += 1
        return tmp(self._next_tmp - 1, size)

    def _lift_one(self, ops: list[PcodeOp], ins: Instr, pc: int) -> bool:
        """Append ops for one instruction; True if it ends the block."""
        name = ins.mnemonic
        rd, rs1, rs2, imm = ins.rd, ins.rs1, ins.rs2, ins.imm

        def dst() -> VarNode | None:
            return reg(rd) if rd != 0 else None

        if name == "lui":
            if rd:
                ops.append(op(OpCode.COPY, reg(rd), const(imm)))
            return False
        if name == "auipc":
            if rd:
                ops.append(op(OpCode.COPY, reg(rd), const((pc + imm) & M32)))
            return False
        if name in _ALU_IMM_OPS:
            if rd:
                ops.append(op(_ALU_IMM_OPS[name], reg(rd), _src(rs1), const(imm)))
            return False
        if name in ("slti", "sltiu"):
            if rd:
                t = self._tmp(1)
                cmp = OpCode.INT_SLESS if name == "slti" else OpCode.INT_LESS
                ops.append(op(cmp, t, _src(rs1), const(imm)))
                ops.append(op(OpCode.INT_ZEXT, reg(rd), t))
            return False
        if name in _SHIFT_IMM_OPS:
            if rd:
                ops.append(op(_SHIFT_IMM_OPS[name], reg(rd), _src(rs1), const(imm)))
            return False
        if name in _ALU_REG_OPS:
            if rd:
                ops.append(op(_ALU_REG_OPS[name], reg(rd), _src(rs1), _src(rs2)))
            return False
        if name in _SHIFT_OPS:
            if rd:
                amt = self._tmp(4)
                ops.append(op(OpCode.INT_AND, amt, _src(rs2), const(0x1F)))
                ops.append(op(_SHIFT_OPS[name], reg(rd), _src(rs1), amt))
            return False
        if name in ("slt", "sltu"):
            if rd:
                t = self._tmp(1)
                cmp = OpCode.INT_SLESS if name == "slt" else OpCode.INT_LESS
                ops.append(op(cmp, t, _src(rs1), _src(rs2)))
                ops.append(op(OpCode.INT_ZEXT, reg(rd), t))
            return False
        if name in _LOAD_SIZES:
            size, signed = _LOAD_SIZES[name]
            a = self._addr(ops, rs1, imm)
            if size == 4 and rd:
                ops.append(op(OpCode.LOAD, reg(rd), a))
            else:
                t = self._tmp(size)
                ops.append(op(OpCode.LOAD, t, a))
                if rd:
                    ops.append(op(OpCode.INT_SEXT if signed else OpCode.INT_ZEXT, reg(rd), t))
            return False
        if name in _STORE_SIZES:
            size = _STORE_SIZES[name]
            a = self._addr(ops, rs1, imm)
            if size == 4:
                ops.append(op(OpCode.STORE, None, a, _src(rs2)))
            else:
                t = self._tmp(size)
                ops.append(op(OpCode.TRUNC, t, _src(rs2)))
                ops.append(op(OpCode.STORE, None, a, t))
            return False
        if name in _BRANCH_OPS:
            cmp, negate = _BRANCH_OPS[name]
            t = self._tmp(1)
            ops.append(op(cmp, t, _src(rs1), _src(rs2)))
            if negate:
                t2 = self._tmp(1)
                ops.append(op(OpCode.BOOL_NEGATE, t2, t))
                t = t2
            ops.append(op(OpCode.CBRANCH, None, ram((pc + imm) & M32), t))
            ops.append(op(OpCode.BRANCH, None, ram(pc + 4)))
            return True
        if name == "jal":
            target = (pc + imm) & M32
            if rd:
                ops.append(op(OpCode.COPY, reg(rd), const(pc + 4)))
            kind = OpCode.CALL if rd == LINK_REG else OpCode.BRANCH
            ops.append(op(kind, None, ram(target)))
            return True
        if name == "jalr":
            t = self._addr(ops, rs1, imm, force_tmp=True)
            t2 = self._tmp(4)
            ops.append(op(OpCode.INT_AND, t2, t, const(0xFFFFFFFE)))
            if rd == 0 and rs1 == LINK_REG:
                ops.append(op(OpCode.RETURN, None, t2))
            else:
                if rd:
                    ops.append(op(OpCode.COPY, reg(rd), const(pc + 4)))
                kind = OpCode.CALLIND if rd == LINK_REG else OpCode.BRANCHIND
                ops.append(op(kind, None, t2))
            return True
        if name == "ecall":
            ops.append(op(OpCode.ENVCALL, None))
            ops.append(op(OpCode.BRANCH, None, ram(pc + 4)))
            return True
        if name == "ebreak":
            ops.append(op(OpCode.ENVCALL, None, const(EBREAK_MARKER, 1)))
            ops.append(op(OpCode.BRANCH, None, ram(pc + 4)))
            return True
        ops.append(op(OpCode.INVALID, None))
        return True

    def _addr(self, ops: list[PcodeOp], rs1: int, imm: int, force_tmp: bool = False) -> VarNode:
        if imm == 0 and not force_tmp:
            return _src(rs1)
        t = self._tmp(4)
        ops.append(op(OpCode.INT_ADD, t, _src(rs1), const(imm)))
        return t
